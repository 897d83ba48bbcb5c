//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes whose
//! inputs are all constants are folded into constants on creation, so only
//! the part of the computation reachable from trainable parameters carries a
//! backward rule. [`Tape::backward`] walks the nodes in reverse creation order
//! and returns a [`Gradients`] table; forward values are never touched.

use std::collections::BTreeMap;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters enter as constants: nothing is recorded
    /// and `backward` yields no parameter gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            inference: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn tracked_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.tracked).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if p.is_frozen() || self.inference {
            self.constant(p.value().clone())
        } else {
            self.push_raw(p.value().clone(), Op::Param(id), true)
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        if tracked {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Constant, false)
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            let op = if b_t { "matmul_nt" } else { "matmul" };
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_t,
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, b_t }, &[a, b]))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, ())> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, ()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in value.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax where row `r` only sees columns `c <= r + offset`;
    /// masked entries are exactly zero.
    pub fn softmax_causal(&mut self, a: Var, offset: usize) -> Result<Var> {
        self.softmax_impl(a, Some(offset))
    }

    fn softmax_impl(&mut self, a: Var, causal: Option<usize>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c == 0 {
            return Err(Error::dim("softmax_rows", self.shape(a), &[1]));
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            let limit = causal.map_or(c, |off| (i + off + 1).min(c));
            softmax_in_place(&mut value.data_mut()[i * c..(i + 1) * c], limit);
        }
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Row-wise layer normalization with per-column gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut value.data_mut()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * is * g[j] + b[j];
            }
            inv_std.push(is);
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, inv_std }, &[x, gain, bias]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", &[], &[]));
        };
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", &[], &[]));
        };
        let r = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += self.dims(p).1;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(r, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(r, len, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Row-major reinterpretation of the shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// Propagates `d loss / d node` for every tracked node. `loss` must be a
    /// `1 × 1` value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim("backward", lt.shape(), &[1, 1]));
        }
        if !lt.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lt.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                params
                    .entry(*id)
                    .and_modify(|acc: &mut Tensor| acc.add_assign(g))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, b_t } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.rows(), va.cols());
                let n = g.cols();
                if self.is_tracked(*a) {
                    // dA = dC · Bᵀ  (or dC · B when B entered transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), !*b_t, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    if *b_t {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g.data(), true, va.data(), false, &mut db, false);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.is_tracked(*a) {
                    let d = zip_map(g, vb, |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.is_tracked(*b) {
                    let d = zip_map(g, va, |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.is_tracked(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |dy, x| if x > 0.0 { dy } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |dy, x| dy * gelu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, gain, bias, inv_std } => {
                let vx = self.value(*x);
                let gv = self.value(*gain).data();
                let (r, c) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let row = vx.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let is = inv_std[i];
                    let gr = g.row(i);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * is;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = is * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.is_tracked(*x) {
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
                }
                if self.is_tracked(*gain) {
                    self.accumulate(grads, *gain, Tensor::row_vector(dgain));
                }
                if self.is_tracked(*bias) {
                    self.accumulate(grads, *bias, Tensor::row_vector(dbias));
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.is_tracked(p) {
                        let data = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?);
                    }
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.is_tracked(p) {
                        let mut data = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?);
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut d = Tensor::zeros(vx.shape().to_vec());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let len = g.cols();
                let mut d = Tensor::zeros(vx.shape().to_vec());
                for i in 0..vx.rows() {
                    d.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.shape(*x).to_vec(), g.data()[0]);
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let d = Tensor::full(self.shape(*x).to_vec(), g.data()[0] / n);
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = zip_map(g, self.value(*x), |dy, v| 2.0 * v * dy);
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a node, if it is tracked and reachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient summed over every leaf created for the parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Parameter gradients in parameter-id order.
    pub fn into_param_grads(self) -> Vec<(ParamId, Tensor)> {
        self.params.into_iter().collect()
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map on equal shapes")
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], limit: usize) {
    let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in &mut row[..limit] {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in &mut row[..limit] {
        *v /= total;
    }
    row[limit..].fill(0.0);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}
