//! SGD update and the finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// One plain SGD step: value <- value - lr * grad, then grads are zeroed.
/// A non-finite gradient aborts the step before any parameter is touched.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    for (_, p) in store.iter() {
        if !p.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGrad {
                param: p.name.clone(),
            });
        }
    }
    let lr = T::of_f64(lr);
    let n = store.len();
    for i in 0..n {
        let id = crate::params::ParamId(i);
        let grad = store.grad(id).to_vec();
        let mut value = store.value(id).clone();
        for (v, g) in value.data_mut().iter_mut().zip(&grad) {
            *v = *v - lr * *g;
        }
        store.set_value(id, value)?;
    }
    store.zero_grads();
    Ok(())
}

/// A scalar function of one tensor that also reports its analytic gradient.
/// The gradient is only consulted at the centre point; perturbed calls may
/// return any gradient.
pub type CheckedFn<'a> = dyn Fn(&Tensor<f64>) -> Result<(f64, Vec<f64>)> + 'a;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where the max occurred.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare an analytic gradient against central differences, coordinate by
/// coordinate, in f64. Returns the max relative error
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check(f: &CheckedFn, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::GradCheck(format!(
            "eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    let (v0, analytic) = f(point)?;
    let (v1, _) = f(point)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::GradCheck(
            "function is not deterministic at the check point".into(),
        ));
    }
    if analytic.len() != point.numel() {
        return Err(Error::GradCheck(format!(
            "gradient length {} does not match point size {}",
            analytic.len(),
            point.numel()
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}
