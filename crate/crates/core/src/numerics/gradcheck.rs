//! Central-difference verification of analytic gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (tensor index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(θ+εe) - f(θ-εe)) / 2ε` for every element
/// of every tensor in `params`. `f` must be deterministic: it is evaluated
/// twice at the unperturbed point and any bitwise difference is rejected.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be > 0, got {eps}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract("analytic gradients do not align with parameters".into()));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::shape("finite_diff_check", p.shape(), g.shape()));
        }
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "objective is not deterministic ({first} vs {second}); disable dropout and other randomness"
        )));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for ti in 0..params.len() {
        for ei in 0..params[ti].numel() {
            let orig = params[ti].data()[ei];
            params[ti].data_mut()[ei] = orig + eps;
            let plus = f(params)?;
            params[ti].data_mut()[ei] = orig - eps;
            let minus = f(params)?;
            params[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = err;
                report.worst = (ti, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
