//! Finite-difference gradient checking in 64-bit using the fourth-order
//! five-point central stencil.

use thiserror::Error;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("objective is not finite at coordinate {index}")]
    NonFinite { index: usize },
    #[error("analytic gradient has {analytic} entries, parameter vector has {params}")]
    LengthMismatch { params: usize, analytic: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` coordinate by
/// coordinate and reports the largest relative error. The stencil's
/// truncation error is O(h⁴), so a fairly large `h` keeps rounding noise
/// small without biasing the estimate.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(GradCheckError::LengthMismatch { params: x.len(), analytic: analytic.len() });
    }
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, numeric: vec![] };
    for i in 0..x.len() {
        let mut at = |offset: f64| {
            probe[i] = x[i] + offset;
            let v = f(&probe);
            probe[i] = x[i];
            v
        };
        let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        if ![p1, m1, p2, m2].iter().all(|v| v.is_finite()) {
            return Err(GradCheckError::NonFinite { index: i });
        }
        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let err = relative_error(analytic[i], fd);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        numeric.push(fd);
    }
    report.numeric = numeric;
    Ok(report)
}
