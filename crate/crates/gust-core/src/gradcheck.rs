//! Central finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all coordinates of
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter index and flat coordinate of the worst entry.
    pub worst_coordinate: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_at`, perturbing one coordinate at a time by `±h`.
///
/// `loss_at` must be a deterministic function of the parameter values: any
/// sampling noise has to be frozen by the caller before checking.
pub fn finite_diff_check<F>(
    values: &[DenseMatrix],
    analytic: &[DenseMatrix],
    h: f64,
    mut loss_at: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[DenseMatrix]) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidConfig(String::from(
            "finite difference step h must be positive and finite",
        )));
    }
    if values.len() != analytic.len() {
        return Err(Error::InvalidConfig(String::from(
            "values and analytic gradient lists differ in length",
        )));
    }
    for (v, g) in values.iter().zip(analytic) {
        if v.shape() != g.shape() {
            return Err(Error::dim_mismatch("finite_diff_check", v.shape(), g.shape()));
        }
    }

    let mut work: Vec<DenseMatrix> = values.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        coordinates_checked: 0,
    };
    for p in 0..values.len() {
        for k in 0..values[p].as_slice().len() {
            let original = work[p].as_slice()[k];

            work[p].as_mut_slice()[k] = original + h;
            let up = loss_at(&work)?;
            work[p].as_mut_slice()[k] = original - h;
            let down = loss_at(&work)?;
            work[p].as_mut_slice()[k] = original;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].as_slice()[k];
            let denom = libm::fmax(1e-8, libm::fabs(a) + libm::fabs(numeric));
            let rel = libm::fabs(a - numeric) / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coordinate = Some((p, k));
            }
            report.coordinates_checked += 1;
        }
    }
    Ok(report)
}
