//! Central finite differences, used as the independent oracle for every
//! gradient produced by the tape.

use crate::error::{Error, Result};

use super::param::ParamSet;
use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Denominator floor in [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Numerical gradient of `f` for every trainable parameter of `params`
/// (`None` for frozen ones), by central differences with step `eps`.
///
/// `f` is evaluated twice at the unperturbed point first; differing
/// results mean `f` is not deterministic and the estimate would be
/// meaningless.
pub fn finite_difference_gradient<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<Vec<Option<Tensor>>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in 0..params.len() {
        if !params.get(id).trainable {
            out.push(None);
            continue;
        }
        let n = params.get(id).value.len();
        let mut grad = Tensor::zeros(params.get(id).value.shape());
        for k in 0..n {
            let orig = params.get(id).value.data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = f(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = f(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(Some(grad));
    }
    Ok(out)
}

/// `max |analytic − numeric| / (|numeric| + 1e-8)` over all elements.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares accumulated gradients in `analytic` against `numeric` and
/// returns the worst relative error across all trainable parameters.
pub fn max_relative_error(analytic: &ParamSet, numeric: &[Option<Tensor>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter_map(|(p, n)| n.as_ref().map(|n| relative_error(&p.grad, n)))
        .fold(0.0, f64::max)
}
