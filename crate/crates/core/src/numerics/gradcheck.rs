use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked scalars of
    /// `|analytic − central| / max(1, |central|)`.
    pub max_rel_error: f64,
    /// Per-parameter maximum, in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub scalars_checked: usize,
}

/// Compares reverse-mode gradients with central differences over every
/// trainable scalar of `store`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_params(store, &store.trainable_ids(), eps, loss_fn)
}

/// Like [`grad_check`], restricted to `ids`. Frozen ids are skipped.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let l = loss_fn(&mut t, s)?;
        let v = t.value(l).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("non-finite loss {v} during grad_check")))
        }
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::new(),
        scalars_checked: 0,
    };
    for &id in ids {
        if store.get(id).is_frozen() {
            continue;
        }
        let len = store.value(id).len();
        let analytic = grads.param(id);
        let mut worst = 0.0f64;
        for i in 0..len {
            let original = store.value(id).data()[i];
            set_scalar(&mut work, id, i, original + eps);
            let plus = eval(&work)?;
            set_scalar(&mut work, id, i, original - eps);
            let minus = eval(&work)?;
            set_scalar(&mut work, id, i, original);
            let central = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let err = (a - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
        report.scalars_checked += len;
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push((store.get(id).name().to_string(), worst));
    }
    Ok(report)
}

fn set_scalar(store: &mut ParamStore, id: ParamId, i: usize, v: f64) {
    if let Some(t) = store.get_mut(id).value_mut() {
        t.data_mut()[i] = v;
    }
}
