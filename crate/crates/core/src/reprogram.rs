//! Patch embedding and multi-head cross-attention from patch queries onto
//! the frozen token-embedding table.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReprogramShape {
    pub patch_len: usize,
    pub d_m: usize,
    pub d_llm: usize,
    pub heads: usize,
}

impl ReprogramShape {
    pub fn d_k(&self) -> usize {
        self.d_m / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_m == 0 || self.d_m % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_m = {} must be a positive multiple of the head count {}",
                self.d_m, self.heads
            )));
        }
        if self.patch_len == 0 || self.d_llm == 0 {
            return Err(Error::Config("patch length and d_llm must be positive".into()));
        }
        Ok(())
    }
}

/// Handles of the trainable reprogramming weights in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReprogramParams {
    pub shape: ReprogramShape,
    pub w_embed: ParamId,
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_out: ParamId,
}

/// Reprogramming weights bound onto a tape.
#[derive(Clone, Debug)]
pub struct ReprogramVars {
    pub w_embed: Var,
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_out: Var,
}

pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / (rows + cols) as f64).sqrt()).expect("positive std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl ReprogramParams {
    pub fn init<R: Rng>(store: &mut ParamStore, shape: ReprogramShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d_k = shape.d_k();
        let w_embed = store.add("reprogram.w_embed", glorot(shape.patch_len, shape.d_m, rng), false)?;
        let mut w_q = Vec::with_capacity(shape.heads);
        let mut w_k = Vec::with_capacity(shape.heads);
        let mut w_v = Vec::with_capacity(shape.heads);
        for h in 0..shape.heads {
            w_q.push(store.add(format!("reprogram.w_q.{h}"), glorot(shape.d_m, d_k, rng), false)?);
            w_k.push(store.add(format!("reprogram.w_k.{h}"), glorot(shape.d_llm, d_k, rng), false)?);
            w_v.push(store.add(format!("reprogram.w_v.{h}"), glorot(shape.d_llm, d_k, rng), false)?);
        }
        let w_out = store.add("reprogram.w_out", glorot(shape.d_m, shape.d_llm, rng), false)?;
        Ok(Self {
            shape,
            w_embed,
            w_q,
            w_k,
            w_v,
            w_out,
        })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_embed];
        ids.extend(&self.w_q);
        ids.extend(&self.w_k);
        ids.extend(&self.w_v);
        ids.push(self.w_out);
        ids
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> ReprogramVars {
        ReprogramVars {
            w_embed: tape.param(store, self.w_embed),
            w_q: self.w_q.iter().map(|&id| tape.param(store, id)).collect(),
            w_k: self.w_k.iter().map(|&id| tape.param(store, id)).collect(),
            w_v: self.w_v.iter().map(|&id| tape.param(store, id)).collect(),
            w_out: tape.param(store, self.w_out),
        }
    }
}

/// `patches · W_embed`: rows are patches of length `rows(W_embed)`.
pub fn embed_patches(tape: &mut Tape, patches: Var, w_embed: Var) -> Result<Var> {
    let (pl, wl) = (tape.value(patches).cols(), tape.value(w_embed).rows());
    if pl != wl {
        return Err(Error::dim("embed_patches", &[pl], &[wl]));
    }
    tape.matmul(patches, w_embed)
}

/// `(x·W_Q) · (E·W_K)ᵀ / √d_k` for one head.
pub fn attention_logits(tape: &mut Tape, x: Var, e: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let d_k = tape.value(w_q).cols();
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(e, w_k)?;
    let raw = tape.matmul_nt(q, k)?;
    Ok(tape.scale(raw, 1.0 / (d_k as f64).sqrt()))
}

/// Cross-attention of every row of `x` (patch embeddings, `R×d_m`) over the
/// rows of `e`; head outputs are concatenated and projected to `R×d_llm`.
/// Rows are independent, so patches of several stations may be stacked.
pub fn reprogram(tape: &mut Tape, x: Var, e: Var, vars: &ReprogramVars) -> Result<Var> {
    if vars.w_q.is_empty() {
        return Err(Error::Config("reprogramming needs at least one head".into()));
    }
    let mut heads = Vec::with_capacity(vars.w_q.len());
    for (h, ((&w_q, &w_k), &w_v)) in vars.w_q.iter().zip(&vars.w_k).zip(&vars.w_v).enumerate() {
        let logits = attention_logits(tape, x, e, w_q, w_k)?;
        if !tape.value(logits).is_finite() {
            return Err(Error::Numeric(format!("non-finite attention logits in head {h}")));
        }
        let weights = tape.softmax_rows(logits)?;
        let v = tape.matmul(e, w_v)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let z = tape.concat_cols(&heads)?;
    tape.matmul(z, vars.w_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn toy(seed: u64, shape: ReprogramShape) -> (ParamStore, ReprogramParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ReprogramParams::init(&mut store, shape, &mut rng).unwrap();
        (store, params)
    }

    fn forward(store: &ParamStore, params: &ReprogramParams, x: &Tensor, e: &Tensor) -> Tensor {
        let mut tape = Tape::inference();
        let vars = params.bind(&mut tape, store);
        let (x, e) = (tape.constant(x.clone()), tape.constant(e.clone()));
        let out = reprogram(&mut tape, x, e, &vars).unwrap();
        tape.value(out).clone()
    }

    /// Scalar loops over heads, rows, prototypes and features.
    fn brute_force(store: &ParamStore, params: &ReprogramParams, x: &Tensor, e: &Tensor) -> Tensor {
        let (p, v) = (x.rows(), e.rows());
        let d_k = params.shape.d_k();
        let mut z = Tensor::zeros(vec![p, params.shape.d_m]);
        for h in 0..params.shape.heads {
            let (wq, wk, wv) = (
                store.value(params.w_q[h]),
                store.value(params.w_k[h]),
                store.value(params.w_v[h]),
            );
            for i in 0..p {
                let mut logits = vec![0.0; v];
                for (j, logit) in logits.iter_mut().enumerate() {
                    for a in 0..d_k {
                        let mut q = 0.0;
                        for c in 0..x.cols() {
                            q += x.get(i, c) * wq.get(c, a);
                        }
                        let mut k = 0.0;
                        for c in 0..e.cols() {
                            k += e.get(j, c) * wk.get(c, a);
                        }
                        *logit += q * k;
                    }
                    *logit /= (d_k as f64).sqrt();
                }
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for a in 0..d_k {
                    let mut acc = 0.0;
                    for j in 0..v {
                        let mut val = 0.0;
                        for c in 0..e.cols() {
                            val += e.get(j, c) * wv.get(c, a);
                        }
                        acc += exps[j] / total * val;
                    }
                    z.set(i, h * d_k + a, acc);
                }
            }
        }
        let wo = store.value(params.w_out);
        Tensor::from_fn(p, wo.cols(), |i, o| {
            (0..z.cols()).map(|c| z.get(i, c) * wo.get(c, o)).sum()
        })
    }

    const TOY: ReprogramShape = ReprogramShape {
        patch_len: 3,
        d_m: 4,
        d_llm: 5,
        heads: 2,
    };

    #[test]
    fn zero_embedding_weights_give_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_fn(2, 3, |r, c| (r + c) as f64));
        let w = tape.constant(Tensor::zeros(vec![3, 4]));
        let out = embed_patches(&mut tape, p, w).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_embedding_sums_patch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row_vector(vec![1.5, -2.0, 4.0]));
        let w = tape.constant(Tensor::full(vec![3, 1], 1.0));
        let out = embed_patches(&mut tape, p, w).unwrap();
        assert_eq!(tape.value(out).data(), &[3.5]);
    }

    #[test]
    fn embedding_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(vec![2, 3]));
        let w = tape.constant(Tensor::zeros(vec![4, 4]));
        assert!(embed_patches(&mut tape, p, w).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let (store, params) = toy(5, TOY);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 2, 4);
        let e = random(&mut rng, 3, 5);
        let fast = forward(&store, &params, &x, &e);
        let slow = brute_force(&store, &params, &x, &e);
        assert!(fast.max_abs_diff(&slow) < 1e-10);
    }

    #[test]
    fn single_prototype_ignores_patch_content() {
        let (store, params) = toy(7, TOY);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = random(&mut rng, 1, 5);
        let out = forward(&store, &params, &random(&mut rng, 3, 4), &e);
        let mut z = Vec::new();
        for h in 0..2 {
            z.extend_from_slice(e.matmul(store.value(params.w_v[h])).unwrap().data());
        }
        let expected = Tensor::row_vector(z).matmul(store.value(params.w_out)).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                assert!((out.get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, params) = toy(9, TOY);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::inference();
        let vars = params.bind(&mut tape, &store);
        let x = tape.constant(random(&mut rng, 4, 4).map(|v| v * 5.0));
        let e = tape.constant(random(&mut rng, 6, 5));
        let logits = attention_logits(&mut tape, x, e, vars.w_q[0], vars.w_k[0]).unwrap();
        let a = tape.softmax_rows(logits).unwrap();
        for r in 0..4 {
            assert!((tape.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn logits_follow_inverse_sqrt_dk() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 2, 3);
        let e = random(&mut rng, 4, 5);
        let wq = random(&mut rng, 3, 2);
        let wk = random(&mut rng, 5, 2);
        let pad = |w: &Tensor| Tensor::from_fn(w.rows(), 4, |r, c| if c < 2 { w.get(r, c) } else { 0.0 });
        let mut tape = Tape::inference();
        let (xv, ev) = (tape.constant(x), tape.constant(e));
        let (q2, k2) = (tape.constant(wq.clone()), tape.constant(wk.clone()));
        let (q4, k4) = (tape.constant(pad(&wq)), tape.constant(pad(&wk)));
        let l2 = attention_logits(&mut tape, xv, ev, q2, k2).unwrap();
        let l4 = attention_logits(&mut tape, xv, ev, q4, k4).unwrap();
        let ratio = 2f64.sqrt() / 2.0;
        for (a, b) in tape.value(l2).data().iter().zip(tape.value(l4).data()) {
            assert!((b - a * ratio).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_logits_name_the_head() {
        let (store, params) = toy(12, TOY);
        let mut tape = Tape::inference();
        let vars = params.bind(&mut tape, &store);
        let x = tape.constant(Tensor::full(vec![1, 4], f64::INFINITY));
        let e = tape.constant(Tensor::full(vec![2, 5], 1.0));
        let err = reprogram(&mut tape, x, e, &vars).unwrap_err();
        assert!(err.to_string().contains("head 0"), "{err}");
    }

    #[test]
    fn bad_head_count_rejected() {
        let shape = ReprogramShape { heads: 3, ..TOY };
        assert!(ReprogramParams::init(&mut ParamStore::new(), shape, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gradients_pass_grad_check_and_skip_table() {
        let (mut store, params) = toy(13, TOY);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let e_id = store.add("e", random(&mut rng, 4, 5), true).unwrap();
        let patches = random(&mut rng, 2, 3);
        let target = random(&mut rng, 2, 5);
        let loss = |t: &mut Tape, s: &ParamStore| {
            let vars = params.bind(t, s);
            let e = t.param(s, e_id);
            let p = t.constant(patches.clone());
            let x = embed_patches(t, p, vars.w_embed)?;
            let y = reprogram(t, x, e, &vars)?;
            let tg = t.constant(target.clone());
            let d = t.sub(y, tg)?;
            let sq = t.square(d);
            Ok(t.mean(sq))
        };
        let report = grad_check(&store, 1e-5, loss).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.per_param.len(), params.all_ids().len());

        let mut tape = Tape::new();
        let l = loss(&mut tape, &store).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.param(e_id).is_none());
    }

    proptest! {
        #[test]
        fn prototype_permutation_invariance(seed in 0u64..200) {
            let (store, params) = toy(seed, TOY);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let x = random(&mut rng, 2, 4);
            let e = random(&mut rng, 5, 5);
            let perm = [3usize, 0, 4, 1, 2];
            let pe = Tensor::from_fn(5, 5, |r, c| e.get(perm[r], c));
            let a = forward(&store, &params, &x, &e);
            let b = forward(&store, &params, &x, &pe);
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
