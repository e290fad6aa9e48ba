use nalgebra::DVector;

use super::AggregationWeights;
use crate::error::{Error, Result};
use crate::linalg::PdMatrix;

/// Arithmetic mean of the current round's estimates.
pub fn averaging(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidParameter("no estimates to average".into()));
    }
    Ok(y.iter().sum::<f64>() / y.len() as f64)
}

pub fn averaging_weights(k: usize) -> AggregationWeights {
    AggregationWeights::uniform(k, 1.0 / k as f64)
}

/// `ν* = v̄ (Σ* + v̄ 11ᵀ)⁻¹ 1`.
///
/// Evaluated through the Sherman–Morrison form `Σ*⁻¹1 / (1/v̄ + 1ᵀΣ*⁻¹1)`,
/// which needs only the factor of `Σ*`.
pub fn clairvoyant_weights(noise_cov: &PdMatrix, outcome_var: f64) -> Result<AggregationWeights> {
    check_outcome_var(outcome_var)?;
    let a = noise_cov.solve(&DVector::from_element(noise_cov.dim(), 1.0))?;
    let denom = 1.0 / outcome_var + a.sum();
    AggregationWeights::new(a / denom)
}

/// Clairvoyant weights computed from `diag(Σ*)` alone.
pub fn only_skills_weights(noise_diag: &[f64], outcome_var: f64) -> Result<AggregationWeights> {
    check_outcome_var(outcome_var)?;
    if noise_diag.is_empty() {
        return Err(Error::InvalidParameter("empty noise diagonal".into()));
    }
    if let Some(d) = noise_diag.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "noise variances must be positive, got {d}"
        )));
    }
    let inv = DVector::from_iterator(noise_diag.len(), noise_diag.iter().map(|d| 1.0 / d));
    let denom = 1.0 / outcome_var + inv.sum();
    AggregationWeights::new(inv / denom)
}

pub(crate) fn check_outcome_var(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("outcome variance must be > 0, got {v}")))
    }
}
