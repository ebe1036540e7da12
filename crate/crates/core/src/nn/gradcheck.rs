//! Central-difference gradient oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ParamBlock;
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index over all blocks, in block order.
    pub worst_coordinate: usize,
    pub worst_block: String,
    /// Largest `|a − n|` over all coordinates.
    pub max_abs_err: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences `(f(p+ε) − f(p−ε)) / 2ε`, coordinate by coordinate.
///
/// `loss_fn` returns `(loss, gradient blocks)`; only the loss is used at the
/// perturbed points. Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[ParamBlock], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[ParamBlock]) -> Result<(f64, Vec<ParamBlock>)>,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps must lie in [1e-8, 1e-3], got {eps}"
        )));
    }
    let (f0, analytic) = loss_fn(params)?;
    let (f0_again, analytic_again) = loss_fn(params)?;
    let same_grads = analytic.len() == analytic_again.len()
        && analytic.iter().zip(&analytic_again).all(|(a, b)| {
            a.values.len() == b.values.len() && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    if f0.to_bits() != f0_again.to_bits() || !same_grads {
        return Err(Error::OracleInvalid("loss function is not deterministic".into()));
    }
    if analytic.len() != params.len()
        || analytic
            .iter()
            .zip(params)
            .any(|(a, p)| a.values.len() != p.values.len())
    {
        return Err(Error::OracleInvalid("gradient blocks do not match parameters".into()));
    }

    let mut work: Vec<ParamBlock> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        worst_block: String::new(),
        max_abs_err: 0.0,
        coordinates: 0,
        passed: true,
    };
    let mut flat = 0;
    for bi in 0..params.len() {
        for j in 0..params[bi].values.len() {
            let orig = params[bi].values[j];
            work[bi].values[j] = orig + eps;
            let (fp, _) = loss_fn(&work)?;
            work[bi].values[j] = orig - eps;
            let (fm, _) = loss_fn(&work)?;
            work[bi].values[j] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[bi].values[j];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::NonFinite("gradient check"));
            }
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coordinate = flat;
                report.worst_block = params[bi].name.clone();
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
