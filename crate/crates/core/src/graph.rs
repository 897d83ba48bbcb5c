//! Station graph and the two-layer graph convolution.
//!
//! The adjacency is a mutual-correlation graph: absolute Pearson correlation
//! of training-split loads, thresholded, with unit self-loops. It is
//! symmetrically normalized once (`D^-1/2 A D^-1/2`) before use.

use std::io::{Read, Write};

use rand::Rng;

use crate::data::synth::pearson;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::reprogram::glorot;

pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    weights: Tensor,
    threshold: f64,
    normalized: bool,
}

impl AdjacencyMatrix {
    pub fn new(weights: Tensor, threshold: f64, normalized: bool) -> Result<Self> {
        let n = weights.rows();
        if weights.shape() != [n, n] {
            return Err(Error::dim("adjacency", weights.shape(), &[n, n]));
        }
        for i in 0..n {
            for j in 0..n {
                if (weights.get(i, j) - weights.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Data(format!("adjacency is not symmetric at ({i}, {j})")));
                }
                if !normalized && !(0.0..=1.0).contains(&weights.get(i, j)) {
                    return Err(Error::Data(format!(
                        "adjacency weight {} at ({i}, {j}) outside [0, 1]",
                        weights.get(i, j)
                    )));
                }
            }
        }
        Ok(Self {
            weights,
            threshold,
            normalized,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: Tensor::identity(n),
            threshold: DEFAULT_THRESHOLD,
            normalized: false,
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    /// `Â ⊗ I_p`: mixes stations independently at each of `positions` rows
    /// when station tokens are stacked station-major (row `i·p + q`).
    pub fn block_diagonal_mixer(&self, positions: usize) -> Tensor {
        let n = self.n();
        let size = n * positions;
        let mut out = Tensor::zeros(vec![size, size]);
        for i in 0..n {
            for j in 0..n {
                let w = self.weights.get(i, j);
                if w != 0.0 {
                    for q in 0..positions {
                        out.set(i * positions + q, j * positions + q, w);
                    }
                }
            }
        }
        out
    }
}

/// Thresholded absolute-correlation graph with unit self-loops.
///
/// Constant station series have zero correlation with every other station.
pub fn build_mam(train_loads: &Tensor, threshold: f64) -> Result<AdjacencyMatrix> {
    let (t, n) = (train_loads.rows(), train_loads.cols());
    if t < 48 {
        return Err(Error::Data(format!(
            "correlation graph needs at least 48 training rows, got {t}"
        )));
    }
    if n == 0 {
        return Err(Error::Data("correlation graph needs at least one station".into()));
    }
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..t).map(|r| train_loads.get(r, s)).collect())
        .collect();
    let mut w = Tensor::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&cols[i], &cols[j]).abs().min(1.0);
            let v = if r >= threshold { r } else { 0.0 };
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    AdjacencyMatrix::new(w, threshold, false)
}

/// `D^-1/2 · A · D^-1/2` with `D` the row-degree matrix.
pub fn normalize_adjacency(a: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    if a.normalized {
        return Err(Error::Config("adjacency is already normalized".into()));
    }
    let n = a.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.weights.row(i).iter().sum();
            1.0 / d.sqrt()
        })
        .collect();
    let w = Tensor::from_fn(n, n, |i, j| inv_sqrt[i] * a.weights.get(i, j) * inv_sqrt[j]);
    Ok(AdjacencyMatrix {
        weights: w,
        threshold: a.threshold,
        normalized: true,
    })
}

/// Layer weights of the two-layer GCN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl GcnParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add("gcn.w1", glorot(d_in, d_hidden, rng), false)?,
            w2: store.add("gcn.w2", glorot(d_hidden, d_out, rng), false)?,
        })
    }
}

/// `Â · relu(Â · X · W1) · W2` on the tape. `mixer` is the normalized
/// adjacency (or its block-diagonal expansion) matching the rows of `x`.
pub fn gcn_forward(tape: &mut Tape, x: Var, mixer: Var, w1: Var, w2: Var) -> Result<Var> {
    let ax = tape.matmul(mixer, x)?;
    let h = tape.matmul(ax, w1)?;
    let h = tape.relu(h);
    let ah = tape.matmul(mixer, h)?;
    tape.matmul(ah, w2)
}

/// Writes the matrix as CSV with station ids as header and a leading
/// comment carrying the threshold and normalization flag.
pub fn write_adjacency_csv<W: Write>(a: &AdjacencyMatrix, ids: &[String], w: W) -> Result<()> {
    if ids.len() != a.n() {
        return Err(Error::dim("adjacency export", &[ids.len()], &[a.n()]));
    }
    let mut w = w;
    writeln!(w, "# threshold={} normalized={}", a.threshold, a.normalized)?;
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(ids)?;
    for i in 0..a.n() {
        writer.write_record(a.weights.row(i).iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_adjacency_csv<R: Read>(mut r: R) -> Result<(Vec<String>, AdjacencyMatrix)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut threshold = DEFAULT_THRESHOLD;
    let mut normalized = false;
    if let Some(first) = text.lines().next().and_then(|l| l.strip_prefix('#')) {
        for kv in first.split_whitespace() {
            match kv.split_once('=') {
                Some(("threshold", v)) => {
                    threshold = v.parse().map_err(|_| Error::Parse {
                        line: 1,
                        message: format!("bad threshold `{v}`"),
                    })?
                }
                Some(("normalized", v)) => normalized = v == "true",
                _ => {}
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let ids: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let n = ids.len();
    let mut data = Vec::with_capacity(n * n);
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != n {
            return Err(Error::Parse {
                line,
                message: format!("expected {n} weights, found {}", record.len()),
            });
        }
        for f in record.iter() {
            data.push(f.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad weight `{f}`"),
            })?);
        }
    }
    let weights = Tensor::matrix(data.len() / n.max(1), n, data)?;
    Ok((ids, AdjacencyMatrix::new(weights, threshold, normalized)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_valid_adjacency(rng: &mut ChaCha8Rng, n: usize) -> AdjacencyMatrix {
        let mut w = Tensor::identity(n);
        for i in 0..n {
            for j in i + 1..n {
                let v = if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() };
                w.set(i, j, v);
                w.set(j, i, v);
            }
        }
        AdjacencyMatrix::new(w, 0.3, false).unwrap()
    }

    #[test]
    fn identical_series_fully_connected() {
        let s: Vec<f64> = (0..100).map(|t| (t as f64 * 0.3).sin()).collect();
        let loads = Tensor::from_fn(100, 2, |r, _| s[r]);
        let a = build_mam(&loads, 0.3).unwrap();
        assert!((a.weights().get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(a.weights().get(0, 0), 1.0);
    }

    #[test]
    fn single_station_graph() {
        let loads = Tensor::from_fn(60, 1, |r, _| r as f64);
        let a = build_mam(&loads, 0.3).unwrap();
        assert_eq!(a.weights().data(), &[1.0]);
    }

    #[test]
    fn independent_noise_disconnected() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let loads = Tensor::from_fn(2000, 2, |_, _| normal.sample(&mut rng));
        let a = build_mam(&loads, 0.3).unwrap();
        assert_eq!(a.weights().get(0, 1), 0.0);
        assert_eq!(a.weights().get(1, 0), 0.0);
    }

    #[test]
    fn constant_series_keeps_only_self_loop() {
        let loads = Tensor::from_fn(60, 2, |r, c| if c == 0 { 3.0 } else { r as f64 });
        let a = build_mam(&loads, 0.0).unwrap();
        assert_eq!(a.weights().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn too_few_rows_rejected() {
        assert!(build_mam(&Tensor::zeros(vec![47, 2]), 0.3).is_err());
    }

    #[test]
    fn normalization_examples() {
        let i = normalize_adjacency(&AdjacencyMatrix::identity(3)).unwrap();
        assert_eq!(i.weights(), &Tensor::identity(3));
        let ones = AdjacencyMatrix::new(Tensor::full(vec![2, 2], 1.0), 0.3, false).unwrap();
        let n = normalize_adjacency(&ones).unwrap();
        for v in n.weights().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(normalize_adjacency(&n).is_err());
    }

    /// Largest |eigenvalue| by power iteration.
    fn spectral_radius(m: &Tensor) -> f64 {
        let n = m.rows();
        let mut v = Tensor::from_fn(n, 1, |r, _| 1.0 + r as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = m.matmul(&v).unwrap();
            let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.map(|x| x / norm);
        }
        lambda
    }

    #[test]
    fn normalized_random_graph_is_symmetric_and_contractive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_valid_adjacency(&mut rng, 4);
            let n = normalize_adjacency(&a).unwrap();
            let w = n.weights();
            assert!(w.max_abs_diff(&w.transpose()) < 1e-15);
            assert!(spectral_radius(w) <= 1.0 + 1e-9);
        }
    }

    fn run_gcn(adj: &Tensor, x: &Tensor, w1: &Tensor, w2: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (a, x, w1, w2) = (
            tape.constant(adj.clone()),
            tape.constant(x.clone()),
            tape.constant(w1.clone()),
            tape.constant(w2.clone()),
        );
        let out = gcn_forward(&mut tape, x, a, w1, w2).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn identity_fixed_point() {
        let x = Tensor::from_fn(3, 4, |r, c| (r + c) as f64 * 0.5);
        let out = run_gcn(&Tensor::identity(3), &x, &Tensor::identity(4), &Tensor::identity(4));
        assert_eq!(out, x);
    }

    #[test]
    fn single_station_reduces_to_dense_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 1, 3);
        let w1 = random(&mut rng, 3, 5);
        let w2 = random(&mut rng, 5, 3);
        let out = run_gcn(&Tensor::identity(1), &x, &w1, &w2);
        let dense = x.matmul(&w1).unwrap().map(|v| v.max(0.0)).matmul(&w2).unwrap();
        assert!(out.max_abs_diff(&dense) < 1e-15);
    }

    /// Triple-nested-loop evaluation of the two GCN layers.
    fn gcn_loops(a: &Tensor, x: &Tensor, w1: &Tensor, w2: &Tensor) -> Tensor {
        let layer = |x: &Tensor, w: &Tensor, relu: bool| {
            let (n, d_in, d_out) = (x.rows(), x.cols(), w.cols());
            Tensor::from_fn(n, d_out, |i, o| {
                let mut acc = 0.0;
                for j in 0..n {
                    for k in 0..d_in {
                        acc += a.get(i, j) * x.get(j, k) * w.get(k, o);
                    }
                }
                if relu {
                    acc.max(0.0)
                } else {
                    acc
                }
            })
        };
        layer(&layer(x, w1, true), w2, false)
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..=4 {
            let a = normalize_adjacency(&random_valid_adjacency(&mut rng, n)).unwrap();
            let x = random(&mut rng, n, 5);
            let w1 = random(&mut rng, 5, 6);
            let w2 = random(&mut rng, 6, 5);
            let fast = run_gcn(a.weights(), &x, &w1, &w2);
            let slow = gcn_loops(a.weights(), &x, &w1, &w2);
            assert!(fast.max_abs_diff(&slow) < 1e-10);
        }
    }

    #[test]
    fn block_mixer_equals_per_position_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, p, d) = (3, 4, 5);
        let a = normalize_adjacency(&random_valid_adjacency(&mut rng, n)).unwrap();
        let stacked = random(&mut rng, n * p, d);
        let w1 = random(&mut rng, d, d);
        let w2 = random(&mut rng, d, d);
        let all = run_gcn(&a.block_diagonal_mixer(p), &stacked, &w1, &w2);
        for q in 0..p {
            let slice = Tensor::from_fn(n, d, |i, c| stacked.get(i * p + q, c));
            let out = run_gcn(a.weights(), &slice, &w1, &w2);
            for i in 0..n {
                for c in 0..d {
                    assert!((out.get(i, c) - all.get(i * p + q, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = normalize_adjacency(&random_valid_adjacency(&mut rng, 3)).unwrap();
        let mut store = ParamStore::new();
        store.add("x", random(&mut rng, 3, 4), false).unwrap();
        store.add("w1", random(&mut rng, 4, 6), false).unwrap();
        store.add("w2", random(&mut rng, 6, 4), false).unwrap();
        let target = random(&mut rng, 3, 4);
        let report = grad_check(&store, 1e-5, |t, s| {
            let x = t.param(s, s.id("x").unwrap());
            let w1 = t.param(s, s.id("w1").unwrap());
            let w2 = t.param(s, s.id("w2").unwrap());
            let m = t.constant(a.weights().clone());
            let y = gcn_forward(t, x, m, w1, w2)?;
            let tg = t.constant(target.clone());
            let d = t.sub(y, tg)?;
            let sq = t.square(d);
            Ok(t.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn csv_round_trip() {
        let a = normalize_adjacency(&random_valid_adjacency(&mut ChaCha8Rng::seed_from_u64(2), 3)).unwrap();
        let ids: Vec<String> = ["S01", "S02", "S03"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        write_adjacency_csv(&a, &ids, &mut buf).unwrap();
        let (ids2, b) = read_adjacency_csv(buf.as_slice()).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(b, a);
    }

    proptest! {
        #[test]
        fn station_permutation_equivariance(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let a = normalize_adjacency(&random_valid_adjacency(&mut rng, n)).unwrap();
            let x = random(&mut rng, n, 3);
            let w1 = random(&mut rng, 3, 3);
            let w2 = random(&mut rng, 3, 3);
            let perm = [2usize, 0, 3, 1];
            let pa = Tensor::from_fn(n, n, |i, j| a.weights().get(perm[i], perm[j]));
            let px = Tensor::from_fn(n, 3, |i, c| x.get(perm[i], c));
            let out = run_gcn(a.weights(), &x, &w1, &w2);
            let pout = run_gcn(&pa, &px, &w1, &w2);
            for i in 0..n {
                for c in 0..3 {
                    prop_assert!((pout.get(i, c) - out.get(perm[i], c)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn mam_invariant_to_positive_affine_rescaling(scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = Tensor::from_fn(100, 3, |r, c| (r as f64 * 0.2 + c as f64).sin() + rng.random_range(-0.5..0.5));
            let mut scaled = base.clone();
            for r in 0..100 {
                scaled.set(r, 1, base.get(r, 1) * scale + shift);
            }
            let a = build_mam(&base, 0.3).unwrap();
            let b = build_mam(&scaled, 0.3).unwrap();
            prop_assert!(a.weights().max_abs_diff(b.weights()) < 1e-9);
        }
    }
}
