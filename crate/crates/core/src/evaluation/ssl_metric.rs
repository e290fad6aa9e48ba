//! Quality of fitted leave-one-out models, measured as the KL divergence
//! between the true distribution of a round and the one the models imply.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{kl_zero_mean_gaussian, precision_from_regression_params, PdMatrix, SslModelSet};
use crate::policies::{fit_ssl_models, PewHyperparams, SufficientStats};

/// Eigenvalue floor of the projected precision.
const EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SslQuality {
    Valid(f64),
    /// The models imply a precision with non-positive determinant.
    InvalidModel,
}

impl SslQuality {
    /// The divergence, with invalid models ranked last.
    pub fn value(&self) -> f64 {
        match self {
            SslQuality::Valid(v) => *v,
            SslQuality::InvalidModel => f64::INFINITY,
        }
    }
}

/// Covariance implied by a set of leave-one-out models.
///
/// The models are assembled into a precision estimate `P`. If `det P ≤ 0`
/// there is no valid estimate and `None` is returned. Otherwise the
/// symmetric part of `P` is eigendecomposed, eigenvalues are floored at 1e−8
/// and then rescaled by a common factor so the determinant equals `det P`;
/// the inverse of the result is the covariance estimate. This approximates
/// the nearest positive definite matrix with the same determinant.
pub fn covariance_from_models(models: &SslModelSet) -> Result<Option<PdMatrix>> {
    let p = precision_from_regression_params(models)?;
    let k = p.nrows();
    let det = p.clone().lu().determinant();
    if !(det > 0.0 && det.is_finite()) {
        return Ok(None);
    }
    let sym = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floored: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(EIGEN_FLOOR)).collect();
    let log_scale = (det.ln() - floored.iter().map(|l| l.ln()).sum::<f64>()) / k as f64;
    let scale = log_scale.exp();
    let inv_eigs = DVector::from_iterator(k, floored.iter().map(|l| 1.0 / (l * scale)));
    let v = &eig.eigenvectors;
    let cov = v * DMatrix::from_diagonal(&inv_eigs) * v.transpose();
    match PdMatrix::from_matrix(cov) {
        Ok(c) => Ok(Some(c)),
        Err(Error::NotPositiveDefinite) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `KL(N(0, S*) ‖ N(0, Ŝ))` with `S* = Σ* + v̄11ᵀ` and `Ŝ` implied by the models.
pub fn ssl_quality_metric(models: &SslModelSet, noise_cov: &PdMatrix, outcome_var: f64) -> Result<SslQuality> {
    let k = noise_cov.dim();
    if models.num_workers() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: models.num_workers(),
        });
    }
    let s_true = PdMatrix::from_matrix(noise_cov.matrix() + DMatrix::from_element(k, k, outcome_var))?;
    Ok(match covariance_from_models(models)? {
        Some(s_hat) => SslQuality::Valid(kl_zero_mean_gaussian(&s_true, &s_hat)?),
        None => SslQuality::InvalidModel,
    })
}

/// Unbiased sample variance of per-round group estimates, used as an
/// estimate of the outcome variance when it is unknown.
pub fn estimate_outcome_variance(group_estimates: &[f64]) -> Result<f64> {
    let n = group_estimates.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 rounds to estimate a variance, got {n}"
        )));
    }
    let mean = group_estimates.iter().sum::<f64>() / n as f64;
    Ok(group_estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64)
}

/// Zero-mean sample covariance `YᵀY / n`.
pub fn sample_covariance(rows: &DMatrix<f64>) -> Result<PdMatrix> {
    let n = rows.nrows();
    let k = rows.ncols();
    if n < k + 1 {
        return Err(Error::InsufficientData(format!(
            "test split has {n} rows; at least {} are needed for {k} workers",
            k + 1
        )));
    }
    PdMatrix::from_matrix(rows.transpose() * rows / n as f64).map_err(|_| {
        Error::InsufficientData("test sample covariance is singular; use a larger test split".into())
    })
}

/// Train/test score for SSL hyperparameters without access to `Σ*`:
/// `KL(N(0, Ŝ_train) ‖ N(0, Ŝ_test))`, where `Ŝ_train` is implied by models
/// fitted on `train` and `Ŝ_test` is the sample covariance of `test`.
pub fn train_test_ssl_score(
    train: &SufficientStats,
    test: &DMatrix<f64>,
    hp: &PewHyperparams,
) -> Result<SslQuality> {
    if test.ncols() != train.num_workers() {
        return Err(Error::DimensionMismatch {
            expected: train.num_workers(),
            found: test.ncols(),
        });
    }
    let s_test = sample_covariance(test)?;
    let models = fit_ssl_models(train, hp)?;
    Ok(match covariance_from_models(&models)? {
        Some(s_train) => SslQuality::Valid(kl_zero_mean_gaussian(&s_train, &s_test)?),
        None => SslQuality::InvalidModel,
    })
}
