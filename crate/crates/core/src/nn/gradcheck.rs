use alloc::format;
use alloc::string::{String, ToString};

use super::ParamStore;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// A scalar function of a parameter store.
///
/// When `with_grad` is set the implementation must accumulate the gradient of
/// the returned value into `params` (gradients are zeroed by the caller).
pub trait Objective {
    fn evaluate(&mut self, params: &mut ParamStore, with_grad: bool) -> Result<f64>;
}

impl<F> Objective for F
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    fn evaluate(&mut self, params: &mut ParamStore, with_grad: bool) -> Result<f64> {
        self(params, with_grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients against central differences with step
/// [`FD_STEP`]. Per-coordinate error is `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
///
/// `params` is restored to its original values on return.
pub fn grad_check<O: Objective>(objective: &mut O, params: &mut ParamStore) -> Result<GradCheckReport> {
    params.zero_grads();
    let base = objective.evaluate(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the check point".to_string()));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    for e in 0..params.entry_count() {
        let analytic = params.entry_grad(e).clone();
        let name = params.entry_name(e).to_string();
        for idx in 0..analytic.data().len() {
            let original = params.entry_value_mut(e).data()[idx];
            params.entry_value_mut(e).data_mut()[idx] = original + FD_STEP;
            let plus = objective.evaluate(params, false)?;
            params.entry_value_mut(e).data_mut()[idx] = original - FD_STEP;
            let minus = objective.evaluate(params, false)?;
            params.entry_value_mut(e).data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective when perturbing {name}[{idx}]")));
            }
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = analytic.data()[idx];
            if !ad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{idx}]")));
            }
            let err = libm::fabs(ad - fd) / 1f64.max(libm::fabs(ad)).max(libm::fabs(fd));
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param.clone_from(&name);
                report.worst_index = idx;
            }
        }
    }
    params.zero_grads();
    Ok(report)
}
