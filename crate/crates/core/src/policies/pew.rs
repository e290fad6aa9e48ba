//! Predict-each-worker for the Gaussian model.
//!
//! Each worker gets a leave-one-out Bayesian linear regression on the other
//! workers' estimates. The posterior mode `(û, ℓ̂)` of that regression is
//! turned into an aggregation weight `v̄ (1 − 1ᵀû) / ℓ̂`, and the resulting
//! vector is shrunk toward the data-free weights with factor
//! `γ_t = r / (r + t − 1)`.

use nalgebra::{DMatrix, DVector};

use super::baselines::check_outcome_var;
use super::stats::SufficientStats;
use super::AggregationWeights;
use crate::error::{Error, Result};
use crate::linalg::{column_without, without_row_col, PdMatrix, RegressionParams, SslModelSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PewHyperparams {
    /// Diagonal `λ` of the prior precision `Λ = λ((1 − ρ)I + ρ11ᵀ)`.
    pub lambda: f64,
    /// Correlation `ρ` of the prior precision.
    pub rho: f64,
    /// Prior mean `ū` of every regression coefficient.
    pub prior_coeff_mean: f64,
    /// Prior residual variance `ℓ̄`.
    pub prior_residual_var: f64,
    /// Inverse-gamma shape parameter `λ_ℓ` (the density uses `λ_ℓ / 2`).
    pub ig_shape: f64,
    /// Decay `r` of the shrinkage toward the prior weights.
    pub reg_decay: f64,
    pub outcome_var: f64,
}

impl PewHyperparams {
    /// Hyperparameters with `ū = 1/(K+1)`, `ℓ̄ = 2 + 2/(K+1)` and `v̄ = 1`.
    pub fn with_defaults(k: usize, lambda: f64, rho: f64, ig_shape: f64, reg_decay: f64) -> Self {
        let kp1 = (k + 1) as f64;
        Self {
            lambda,
            rho,
            prior_coeff_mean: 1.0 / kp1,
            prior_residual_var: 2.0 + 2.0 / kp1,
            ig_shape,
            reg_decay,
            outcome_var: 1.0,
        }
    }

    /// Published tuned values for `K ∈ {10, 20, 30}`.
    pub fn tuned_reference(k: usize) -> Option<Self> {
        let (lambda, rho, ig_shape, r) = match k {
            10 => (16.0, 0.4, 0.0, 75.0),
            20 => (24.0, 0.6, 0.0, 150.0),
            30 => (36.0, 0.6, 0.0, 300.0),
            _ => return None,
        };
        Some(Self::with_defaults(k, lambda, rho, ig_shape, r))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidParameter(format!("{what} = {v}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", self.rho);
        }
        if !self.prior_coeff_mean.is_finite() {
            return bad("prior_coeff_mean", self.prior_coeff_mean);
        }
        if !(self.prior_residual_var > 0.0 && self.prior_residual_var.is_finite()) {
            return bad("prior_residual_var", self.prior_residual_var);
        }
        if !(self.ig_shape >= 0.0 && self.ig_shape.is_finite()) {
            return bad("ig_shape", self.ig_shape);
        }
        if !(self.reg_decay > 0.0 && self.reg_decay.is_finite()) {
            return bad("reg_decay", self.reg_decay);
        }
        check_outcome_var(self.outcome_var)
    }

    /// `Λ` for `dim` regression coefficients.
    pub fn prior_precision(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                self.lambda
            } else {
                self.lambda * self.rho
            }
        })
    }
}

/// Posterior mode of the leave-one-out regression for worker `k` given the
/// rows summarized in `stats` (the `t − 1` rounds before round `t`).
///
/// `û = (Λ + G₋ₖ₋ₖ)⁻¹(ū Λ1 + G₋ₖₖ)` and
/// `ℓ̂ = [(λ_ℓ + K + 1)ℓ̄ + (û − ū1)ᵀΛ(û − ū1) + RSS] / (λ_ℓ + K + t)`.
pub fn blr_fit(stats: &SufficientStats, k: usize, hp: &PewHyperparams) -> Result<RegressionParams> {
    hp.validate()?;
    let dim = stats.num_workers();
    if dim < 2 {
        return Err(Error::InvalidParameter(
            "leave-one-out regression needs at least two workers".into(),
        ));
    }
    if k >= dim {
        return Err(Error::IndexOutOfRange { index: k, dim });
    }
    let g = stats.gram();
    let t = (stats.rows() + 1) as f64;
    let big_k = dim as f64;
    let lambda = hp.prior_precision(dim - 1);
    let g_rest = without_row_col(g, k);
    let g_cross = column_without(g, k);
    let prior_mean = DVector::from_element(dim - 1, hp.prior_coeff_mean);

    let system = PdMatrix::from_matrix(&lambda + &g_rest)?;
    let u = system.solve(&(&lambda * &prior_mean + &g_cross))?;

    let dev = &u - &prior_mean;
    let prior_quad = dev.dot(&(&lambda * &dev));
    let rss = (g[(k, k)] - 2.0 * u.dot(&g_cross) + u.dot(&(&g_rest * &u))).max(0.0);
    let ell = ((hp.ig_shape + big_k + 1.0) * hp.prior_residual_var + prior_quad + rss)
        / (hp.ig_shape + big_k + t);
    RegressionParams::new(u, ell)
}

/// Negative log posterior (up to a constant) of the leave-one-out regression
/// for worker `k`, evaluated directly on the history rows.
///
/// Gaussian prior `N(ū1, ℓΛ⁻¹)` on `u`, inverse-gamma prior with shape
/// `λ_ℓ/2` and scale `(λ_ℓ + K + 1)ℓ̄/2` on `ℓ`, Gaussian likelihood.
pub fn blr_loss(
    rows: &DMatrix<f64>,
    k: usize,
    hp: &PewHyperparams,
    coeffs: &DVector<f64>,
    residual_var: f64,
) -> f64 {
    let dim = rows.ncols();
    let big_k = dim as f64;
    let ell = residual_var;
    let mut sq = 0.0;
    for r in rows.row_iter() {
        let mut pred = 0.0;
        for (j, other) in (0..dim).filter(|&j| j != k).enumerate() {
            pred += coeffs[j] * r[other];
        }
        sq += (r[k] - pred).powi(2);
    }
    let likelihood = sq / (2.0 * ell) + rows.nrows() as f64 / 2.0 * ell.ln();
    let dev = coeffs - DVector::from_element(dim - 1, hp.prior_coeff_mean);
    let lambda = hp.prior_precision(dim - 1);
    let coeff_prior = dev.dot(&(&lambda * &dev)) / (2.0 * ell) + (big_k - 1.0) / 2.0 * ell.ln();
    let var_prior = (hp.ig_shape / 2.0 + 1.0) * ell.ln()
        + (hp.ig_shape + big_k + 1.0) * hp.prior_residual_var / (2.0 * ell);
    likelihood + coeff_prior + var_prior
}

pub fn fit_ssl_models(stats: &SufficientStats, hp: &PewHyperparams) -> Result<SslModelSet> {
    SslModelSet::new(
        (0..stats.num_workers())
            .map(|k| blr_fit(stats, k, hp))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// `ν_k = v̄ (1 − 1ᵀu⁽ᵏ⁾) / ℓ⁽ᵏ⁾`.
pub fn pew_weights(models: &SslModelSet, outcome_var: f64) -> Result<AggregationWeights> {
    check_outcome_var(outcome_var)?;
    let w = models
        .models()
        .iter()
        .map(|m| {
            if m.residual_var() > 0.0 {
                Ok(outcome_var * (1.0 - m.coeffs().sum()) / m.residual_var())
            } else {
                Err(Error::InvalidParameter("non-positive residual variance".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    AggregationWeights::new(DVector::from_vec(w))
}

/// Weights before any data: `v̄ (1 − (K − 1)ū) / ℓ̄` for every worker.
pub fn pew_prior_weights(k: usize, hp: &PewHyperparams) -> AggregationWeights {
    let w = hp.outcome_var * (1.0 - (k as f64 - 1.0) * hp.prior_coeff_mean) / hp.prior_residual_var;
    AggregationWeights::uniform(k, w)
}

/// `γ_t = r / (r + t − 1)`.
pub fn regularization_weight(reg_decay: f64, t: usize) -> f64 {
    reg_decay / (reg_decay + t as f64 - 1.0)
}

/// Weights `ν̂_t` used in round `t = stats.rows() + 1`.
pub fn pew_aggregation_weights(
    stats: &SufficientStats,
    hp: &PewHyperparams,
) -> Result<AggregationWeights> {
    hp.validate()?;
    let k = stats.num_workers();
    let prior = pew_prior_weights(k, hp);
    let t = stats.rows() + 1;
    if t == 1 {
        return Ok(prior);
    }
    let fitted = pew_weights(&fit_ssl_models(stats, hp)?, hp.outcome_var)?;
    prior.blend(&fitted, regularization_weight(hp.reg_decay, t))
}

/// Group estimate for the last row of `rows`, learning from the rows before it.
pub fn pew_estimate(rows: &DMatrix<f64>, hp: &PewHyperparams) -> Result<f64> {
    let t = rows.nrows();
    if t == 0 {
        return Err(Error::InsufficientData("need the current round's estimates".into()));
    }
    let mut stats = SufficientStats::new(rows.ncols());
    stats.extend(rows, 0, t - 1)?;
    let w = pew_aggregation_weights(&stats, hp)?;
    let current: Vec<f64> = rows.row(t - 1).iter().copied().collect();
    w.apply(&current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_pd;
    use crate::linalg::regression_params_from_cov;
    use crate::policies::clairvoyant_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn hp10() -> PewHyperparams {
        PewHyperparams::tuned_reference(10).unwrap()
    }

    #[test]
    fn no_data_returns_prior() {
        let stats = SufficientStats::new(10);
        let hp = hp10();
        for k in [0, 4, 9] {
            let p = blr_fit(&stats, k, &hp).unwrap();
            assert!(p.coeffs().iter().all(|u| (u - 1.0 / 11.0).abs() < 1e-15));
            assert!((p.residual_var() - hp.prior_residual_var).abs() < 1e-14);
        }
    }

    #[test]
    fn prior_weights_arithmetic() {
        let hp = hp10();
        let w = pew_prior_weights(10, &hp);
        assert!(w.as_vector().iter().all(|x| (x - 1.0 / 12.0).abs() < 1e-15));
        let hp0 = PewHyperparams { prior_coeff_mean: 0.0, prior_residual_var: 4.0, outcome_var: 2.0, ..hp };
        assert!(pew_prior_weights(5, &hp0).as_vector().iter().all(|x| *x == 0.5));
    }

    #[test]
    fn regularization_weight_values() {
        assert_eq!(regularization_weight(75.0, 1), 1.0);
        assert_eq!(regularization_weight(75.0, 76), 0.5);
    }

    #[test]
    fn first_round_uses_prior_weights() {
        let rows = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]);
        let hp = PewHyperparams::with_defaults(3, 1.0, 0.0, 0.0, 5.0);
        let expected = pew_prior_weights(3, &hp).apply(&[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(pew_estimate(&rows, &hp).unwrap(), expected);
        assert!(pew_estimate(&DMatrix::zeros(0, 3), &hp).is_err());
    }

    #[test]
    fn prescient_two_worker_weights() {
        let s = PdMatrix::from_matrix(DMatrix::identity(2, 2) * 2.0 + DMatrix::from_element(2, 2, 1.0)).unwrap();
        let models = SslModelSet::new((0..2).map(|k| regression_params_from_cov(&s, k).unwrap()).collect()).unwrap();
        assert!((models.get(0).unwrap().coeffs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((models.get(0).unwrap().residual_var() - 8.0 / 3.0).abs() < 1e-14);
        let w = pew_weights(&models, 1.0).unwrap();
        assert!(w.as_vector().iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn flat_models_give_uniform_weights() {
        let models = SslModelSet::new(
            (0..4).map(|_| RegressionParams::new(DVector::zeros(3), 2.5).unwrap()).collect(),
        )
        .unwrap();
        let w = pew_weights(&models, 1.5).unwrap();
        assert!(w.as_vector().iter().all(|x| (x - 0.6).abs() < 1e-15));
    }

    #[test]
    fn prescient_matches_clairvoyant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for k in [2, 5, 13] {
            let sigma = random_pd(k, &mut rng);
            let s = PdMatrix::from_matrix(sigma.matrix() + DMatrix::from_element(k, k, 1.0)).unwrap();
            let models = SslModelSet::new((0..k).map(|j| regression_params_from_cov(&s, j).unwrap()).collect()).unwrap();
            let a = pew_weights(&models, 1.0).unwrap();
            let b = clairvoyant_weights(&sigma, 1.0).unwrap();
            assert!((a.as_vector() - b.as_vector()).amax() < 1e-10);
        }
    }

    #[test]
    fn closed_form_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let hp = PewHyperparams::with_defaults(4, 2.0, 0.3, 2.0, 10.0);
        let rows = DMatrix::from_fn(30, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stats = SufficientStats::from_rows(&rows);
        for k in 0..4 {
            let p = blr_fit(&stats, k, &hp).unwrap();
            let f = |u: &DVector<f64>, l: f64| blr_loss(&rows, k, &hp, u, l);
            let h = 1e-5;
            let base = f(p.coeffs(), p.residual_var());
            let mut grad: Vec<f64> = (0..3)
                .map(|j| {
                    let mut up = p.coeffs().clone();
                    let mut dn = p.coeffs().clone();
                    up[j] += h;
                    dn[j] -= h;
                    (f(&up, p.residual_var()) - f(&dn, p.residual_var())) / (2.0 * h)
                })
                .collect();
            grad.push((f(p.coeffs(), p.residual_var() + h) - f(p.coeffs(), p.residual_var() - h)) / (2.0 * h));
            let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            assert!(gmax <= 1e-4 * (1.0 + base.abs()), "k={k} grad={grad:?}");
        }
    }

    #[test]
    fn zero_prior_precision_without_data_is_singular() {
        let hp = PewHyperparams::with_defaults(3, 0.0, 0.0, 0.0, 1.0);
        assert!(blr_fit(&SufficientStats::new(3), 0, &hp).is_err());
    }

    #[test]
    fn hyperparameter_validation() {
        let base = hp10();
        assert!(base.validate().is_ok());
        assert!(PewHyperparams { rho: 1.0, ..base }.validate().is_err());
        assert!(PewHyperparams { lambda: -1.0, ..base }.validate().is_err());
        assert!(PewHyperparams { prior_residual_var: 0.0, ..base }.validate().is_err());
        assert!(PewHyperparams { reg_decay: 0.0, ..base }.validate().is_err());
        assert!(PewHyperparams { outcome_var: 0.0, ..base }.validate().is_err());
        assert!(PewHyperparams { ig_shape: -0.5, ..base }.validate().is_err());
    }

    #[test]
    fn prior_precision_structure() {
        let hp = PewHyperparams::with_defaults(10, 16.0, 0.4, 0.0, 75.0);
        let l = hp.prior_precision(9);
        assert_eq!(l[(0, 0)], 16.0);
        assert!((l[(0, 1)] - 6.4).abs() < 1e-15);
        assert!(PdMatrix::from_matrix(l).is_ok());
    }
}
