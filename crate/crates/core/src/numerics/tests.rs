use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Store with trainable `a` and `b`, plus a fixed random projection `r`
/// used to turn a matrix output into a scalar with non-uniform weights.
fn two_param_store(seed: u64, a: (usize, usize), b: (usize, usize)) -> (ParamStore, ParamId, ParamId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ia = store.add("a", random(&mut rng, a.0, a.1), false).unwrap();
    let ib = store.add("b", random(&mut rng, b.0, b.1), false).unwrap();
    (store, ia, ib)
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(x).shape().to_vec();
    let w = Tensor::new(
        shape.clone(),
        (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = tape.constant(Tensor::identity(2));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let b = tape.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(
        tape.matmul(a, b),
        Err(crate::Error::Dimension { left, right, .. }) if left == vec![2, 2] && right == vec![3, 2]
    ));
}

#[test]
fn matmul_gradient_of_sum_matches_central_differences() {
    let (store, _, _) = two_param_store(1, (3, 4), (4, 2));
    let report = grad_check(&store, 1e-5, |t, s| {
        let a = t.param(s, s.id("a").unwrap());
        let b = t.param(s, s.id("b").unwrap());
        let c = t.matmul(a, b)?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn matmul_nt_gradient() {
    let (store, _, _) = two_param_store(2, (3, 4), (5, 4));
    let report = grad_check(&store, 1e-5, |t, s| {
        let a = t.param(s, s.id("a").unwrap());
        let b = t.param(s, s.id("b").unwrap());
        let c = t.matmul_nt(a, b)?;
        weighted_sum(t, c, 9)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let y = tape.value(y);
    for v in y.row(0) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((y.get(1, 0) - 1.0).abs() < 1e-12);
    assert!(y.get(1, 1).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, 5, 7).map(|v| v * 30.0));
    let y = tape.softmax_rows(x).unwrap();
    for r in 0..5 {
        let row = tape.value(y).row(r);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let (store, _, _) = two_param_store(4, (2, 3), (1, 1));
    let report = grad_check(&store, 1e-5, |t, s| {
        let a = t.param(s, s.id("a").unwrap());
        let y = t.softmax_rows(a)?;
        weighted_sum(t, y, 5)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn causal_softmax_masks_future_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![3, 5]));
    let y = tape.softmax_causal(x, 1).unwrap();
    let y = tape.value(y);
    assert_eq!(y.row(0), &[0.5, 0.5, 0.0, 0.0, 0.0]);
    assert!((y.get(2, 3) - 0.25).abs() < 1e-15);
    assert_eq!(y.get(2, 4), 0.0);
}

#[test]
fn causal_softmax_gradient() {
    let (store, _, _) = two_param_store(6, (3, 5), (1, 1));
    let report = grad_check(&store, 1e-5, |t, s| {
        let a = t.param(s, s.id("a").unwrap());
        let y = t.softmax_causal(a, 2)?;
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row_vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let x = tape.constant(Tensor::row_vector(vec![0.0, 0.5, 3.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn relu_gradient_mask_away_from_zero() {
    let mut store = ParamStore::new();
    store
        .add("a", Tensor::row_vector(vec![-1.5, -0.2, 0.3, 2.0]), false)
        .unwrap();
    let report = grad_check(&store, 1e-5, |t, s| {
        let a = t.param(s, s.id("a").unwrap());
        let y = t.relu(a);
        weighted_sum(t, y, 8)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");

    // subgradient at exactly zero is zero
    let mut store = ParamStore::new();
    let id = store.add("z", Tensor::row_vector(vec![0.0]), false).unwrap();
    let mut tape = Tape::new();
    let z = tape.param(&store, id);
    let y = tape.relu(z);
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(id).unwrap().data(), &[0.0]);
}

#[test]
fn quadratic_loss_has_gradient_two_w() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, 3, 3), false).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&store, w);
    let sq = tape.square(v);
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    let expected = store.value(w).map(|x| 2.0 * x);
    assert!(g.param(w).unwrap().max_abs_diff(&expected) < 1e-15);

    let report = grad_check(&store, 1e-5, |t, s| {
        let v = t.param(s, w);
        let sq = t.square(v);
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn frozen_parameters_are_not_checked() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::row_vector(vec![1.0, 2.0]), false).unwrap();
    store.add("e", Tensor::row_vector(vec![3.0, 4.0]), true).unwrap();
    let report = grad_check(&store, 1e-5, |t, s| {
        let w = t.param(s, s.id("w").unwrap());
        let e = t.param(s, s.id("e").unwrap());
        let p = t.mul(w, e)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert_eq!(report.scalars_checked, 2);
    assert_eq!(report.per_param.len(), 1);
    assert_eq!(report.per_param[0].0, "w");
}

#[test]
fn non_finite_loss_is_a_numeric_error() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::row_vector(vec![f64::INFINITY]), false).unwrap();
    let err = grad_check(&store, 1e-5, |t, s| {
        let w = t.param(s, s.id("w").unwrap());
        Ok(t.sum(w))
    })
    .unwrap_err();
    assert!(err.is_numeric_error());
}

#[test]
fn constant_only_graphs_record_no_backward_rules() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::identity(3));
    let b = tape.matmul(a, a).unwrap();
    let _ = tape.relu(b);
    assert_eq!(tape.tracked_len(), 0);
}

#[test]
fn every_op_matches_finite_differences() {
    // layer norm, gelu, add_row, concat/slice, reshape, mean, scale, sub
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    store.add("x", random(&mut rng, 4, 6), false).unwrap();
    store.add("g", random(&mut rng, 1, 6), false).unwrap();
    store.add("b", random(&mut rng, 1, 6), false).unwrap();
    store.add("y", random(&mut rng, 4, 6), false).unwrap();
    let report = grad_check(&store, 1e-5, |t, s| {
        let x = t.param(s, s.id("x").unwrap());
        let g = t.param(s, s.id("g").unwrap());
        let b = t.param(s, s.id("b").unwrap());
        let y = t.param(s, s.id("y").unwrap());
        let ln = t.layer_norm(x, g, b)?;
        let act = t.gelu(ln);
        let shifted = t.add_row(act, b)?;
        let top = t.slice_rows(shifted, 0, 2)?;
        let bottom = t.slice_rows(y, 2, 2)?;
        let stacked = t.concat_rows(&[top, bottom])?;
        let left = t.slice_cols(stacked, 0, 3)?;
        let right = t.slice_cols(x, 3, 3)?;
        let wide = t.concat_cols(&[right, left])?;
        let flat = t.reshape(wide, &[1, 24])?;
        let scaled = t.scale(flat, 0.7);
        let y_flat = t.reshape(y, &[1, 24])?;
        let diff = t.sub(scaled, y_flat)?;
        let sq = t.square(diff);
        let m = t.mean(sq);
        let w = weighted_sum(t, stacked, 3)?;
        t.add(m, w)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn backward_does_not_mutate_forward_values() {
    let (store, ia, ib) = two_param_store(31, (3, 3), (3, 3));
    let mut tape = Tape::new();
    let a = tape.param(&store, ia);
    let b = tape.param(&store, ib);
    let c = tape.matmul(a, b).unwrap();
    let s = tape.softmax_rows(c).unwrap();
    let l = tape.sum(s);
    let before: Vec<Tensor> = [a, b, c, s].iter().map(|&v| tape.value(v).clone()).collect();
    tape.backward(l).unwrap();
    let after: Vec<Tensor> = [a, b, c, s].iter().map(|&v| tape.value(v).clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn repeated_parameter_leaves_accumulate() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(vec![1.5]), false).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, w);
    let b = tape.param(&store, w);
    let p = tape.mul(a, b).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(w).unwrap().data(), &[3.0]);
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let c = random(&mut rng, n, p);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn matmul_backward_matches_fd_on_random_shapes(seed in 0u64..200, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let (store, _, _) = two_param_store(seed, (m, k), (k, n));
        let report = grad_check(&store, 1e-5, |t, s| {
            let a = t.param(s, s.id("a").unwrap());
            let b = t.param(s, s.id("b").unwrap());
            let c = t.matmul(a, b)?;
            weighted_sum(t, c, seed + 1)
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4);
    }
}
