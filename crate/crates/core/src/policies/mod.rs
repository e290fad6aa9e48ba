//! Group-estimation policies. Every policy here is linear in the current
//! round's estimates, `Ẑ_t = νᵀ Y_t`, with weights depending only on earlier
//! rounds, so each exposes its aggregation weights.

mod baselines;
mod em;
mod pew;
mod stats;

use nalgebra::DVector;

use crate::error::{Error, Result};

pub use crate::linalg::SslModelSet;
pub use baselines::{averaging, averaging_weights, clairvoyant_weights, only_skills_weights};
pub use em::{
    e_step, e_step_estimate, elbo, em_estimate, em_fit, em_fit_traced, em_m_step, em_weights,
    EmFit, EmHyperparams,
};
pub use pew::{
    blr_fit, blr_loss, fit_ssl_models, pew_aggregation_weights, pew_estimate, pew_prior_weights,
    pew_weights, regularization_weight, PewHyperparams,
};
pub use stats::SufficientStats;

/// Weight vector `ν` of a linear aggregation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(DVector<f64>);

impl AggregationWeights {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("non-finite aggregation weight".into()));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize, weight: f64) -> Self {
        Self(DVector::from_element(k, weight))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    /// `νᵀ y`.
    pub fn apply(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: y.len(),
            });
        }
        Ok(self.0.iter().zip(y).map(|(w, v)| w * v).sum())
    }

    /// `γ·self + (1 − γ)·other`.
    pub fn blend(&self, other: &AggregationWeights, gamma: f64) -> Result<Self> {
        if other.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        Self::new(&self.0 * gamma + &other.0 * (1.0 - gamma))
    }
}
