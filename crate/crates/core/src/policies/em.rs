//! MAP estimation of the noise covariance by expectation maximization.
//!
//! The latent outcomes of past rounds have a Gaussian posterior given the
//! current covariance estimate, and the M-step has a closed form. Both steps
//! only touch the history through its Gram matrix: the E-step means are
//! `ẑ_τ = wᵀY_τ` for a single weight vector `w`, so every sum over rounds
//! reduces to a quadratic form in `Σ_τ Y_τ Y_τᵀ`.

use nalgebra::{DMatrix, DVector};

use super::baselines::{check_outcome_var, clairvoyant_weights};
use super::stats::SufficientStats;
use super::AggregationWeights;
use crate::error::{Error, Result};
use crate::linalg::PdMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmHyperparams {
    /// Diagonal `σ̄²` of the prior mean `Σ̄`.
    pub prior_var: f64,
    /// Correlation `ρ̄` of the prior mean.
    pub prior_corr: f64,
    /// Prior concentration `c`.
    pub concentration: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl EmHyperparams {
    pub fn new(prior_var: f64, prior_corr: f64, concentration: f64) -> Self {
        Self {
            prior_var,
            prior_corr,
            concentration,
            tol: 1e-10,
            max_iters: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidParameter(format!("{what} = {v}")));
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return bad("prior_var", self.prior_var);
        }
        if !(0.0..1.0).contains(&self.prior_corr) {
            return bad("prior_corr", self.prior_corr);
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad("concentration", self.concentration);
        }
        if !(self.tol > 0.0) {
            return bad("tol", self.tol);
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// `Σ̄ = σ̄²((1 − ρ̄)I + ρ̄11ᵀ)`.
    pub fn prior_mean(&self, k: usize) -> Result<PdMatrix> {
        self.validate()?;
        let (v, c) = (self.prior_var, self.prior_var * self.prior_corr);
        PdMatrix::from_matrix(DMatrix::from_fn(k, k, |i, j| if i == j { v } else { c }))
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub covariance: PdMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// ELBO after each M-step; empty unless requested.
    pub elbo_trace: Vec<f64>,
}

/// Posterior of the outcome given one round under `Σ̂`: returns `(w, v̂)` with
/// `ẑ = wᵀy`, `w = Σ̂⁻¹1 / (1/v̄ + 1ᵀΣ̂⁻¹1)` and `v̂ = 1 / (1/v̄ + 1ᵀΣ̂⁻¹1)`.
pub fn e_step(sigma: &PdMatrix, outcome_var: f64) -> Result<(DVector<f64>, f64)> {
    check_outcome_var(outcome_var)?;
    let a = sigma.solve(&DVector::from_element(sigma.dim(), 1.0))?;
    let precision = 1.0 / outcome_var + a.sum();
    Ok((a / precision, 1.0 / precision))
}

/// E-step posterior mean for a single round.
pub fn e_step_estimate(sigma: &PdMatrix, y: &[f64], outcome_var: f64) -> Result<f64> {
    let (w, _) = e_step(sigma, outcome_var)?;
    AggregationWeights::new(w)?.apply(y)
}

/// Unnormalized M-step numerator
/// `cΣ̄ + Σ_τ (Y_τ − ẑ_τ1)(Y_τ − ẑ_τ1)ᵀ + Σ_τ v̂ 11ᵀ`.
fn m_step_numerator(
    stats: &SufficientStats,
    prior: &PdMatrix,
    concentration: f64,
    w: &DVector<f64>,
    v_hat: f64,
) -> DMatrix<f64> {
    let g = stats.gram();
    let k = g.nrows();
    let gw = g * w;
    let z_sq = w.dot(&gw);
    let n = stats.rows() as f64;
    let mut out = prior.matrix() * concentration + g;
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] += z_sq + n * v_hat - gw[i] - gw[j];
        }
    }
    out
}

fn m_step_denominator(stats: &SufficientStats, concentration: f64) -> f64 {
    // c + 2K + t + 1 with t − 1 = rows.
    concentration + 2.0 * stats.num_workers() as f64 + stats.rows() as f64 + 2.0
}

/// Closed-form M-step, before symmetrization and factorization.
pub fn em_m_step(
    stats: &SufficientStats,
    prior: &PdMatrix,
    concentration: f64,
    w: &DVector<f64>,
    v_hat: f64,
) -> DMatrix<f64> {
    m_step_numerator(stats, prior, concentration, w, v_hat) / m_step_denominator(stats, concentration)
}

/// ELBO at `Σ̂` for E-step output `(w, v̂)` shared by all rounds.
fn elbo_from_stats(
    stats: &SufficientStats,
    prior: &PdMatrix,
    concentration: f64,
    w: &DVector<f64>,
    v_hat: f64,
    sigma: &PdMatrix,
    outcome_var: f64,
) -> Result<f64> {
    let numerator = m_step_numerator(stats, prior, concentration, w, v_hat);
    let trace = sigma.solve_matrix(&numerator)?.trace();
    let n = stats.rows() as f64;
    let z_sq = w.dot(&(stats.gram() * w));
    let kl_sum = 0.5 * (n * v_hat / outcome_var + z_sq / outcome_var - n - n * (v_hat / outcome_var).ln());
    Ok(-m_step_denominator(stats, concentration) * sigma.log_det() - trace - 2.0 * kl_sum)
}

/// Evidence lower bound `g(Σ̂)` for per-round posteriors `N(ẑ_τ, v̂_τ)`,
/// evaluated term by term over the rows. Larger is better.
pub fn elbo(
    rows: &DMatrix<f64>,
    prior: &PdMatrix,
    concentration: f64,
    z_hat: &[f64],
    v_hat: &[f64],
    sigma: &PdMatrix,
    outcome_var: f64,
) -> Result<f64> {
    let n = rows.nrows();
    let k = rows.ncols();
    if z_hat.len() != n || v_hat.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: z_hat.len().min(v_hat.len()),
        });
    }
    if prior.dim() != k || sigma.dim() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: sigma.dim(),
        });
    }
    check_outcome_var(outcome_var)?;
    let t = (n + 1) as f64;
    let ones = DVector::from_element(k, 1.0);
    let ones_quad = sigma.inv_quad_form(&ones)?;
    let mut g = -(concentration + 2.0 * k as f64 + 1.0 + t) * sigma.log_det()
        - sigma.solve_matrix(&(prior.matrix() * concentration))?.trace();
    for (tau, r) in rows.row_iter().enumerate() {
        let (z, v) = (z_hat[tau], v_hat[tau]);
        if !(v > 0.0) {
            return Err(Error::InvalidParameter(format!("posterior variance {v} at row {tau}")));
        }
        let resid = DVector::from_fn(k, |i, _| r[i] - z);
        let kl = 0.5 * (v / outcome_var + z * z / outcome_var - 1.0 - (v / outcome_var).ln());
        g -= sigma.inv_quad_form(&resid)? + v * ones_quad + 2.0 * kl;
    }
    Ok(g)
}

pub fn em_fit(stats: &SufficientStats, hp: &EmHyperparams, outcome_var: f64) -> Result<EmFit> {
    run_em(stats, hp, outcome_var, false)
}

/// As [`em_fit`], recording the ELBO after every iteration.
pub fn em_fit_traced(stats: &SufficientStats, hp: &EmHyperparams, outcome_var: f64) -> Result<EmFit> {
    run_em(stats, hp, outcome_var, true)
}

fn run_em(stats: &SufficientStats, hp: &EmHyperparams, outcome_var: f64, trace: bool) -> Result<EmFit> {
    check_outcome_var(outcome_var)?;
    let k = stats.num_workers();
    let prior = hp.prior_mean(k)?;
    if stats.rows() == 0 {
        return Ok(EmFit {
            covariance: prior,
            iterations: 0,
            converged: true,
            elbo_trace: Vec::new(),
        });
    }
    let n = stats.rows() as f64;
    let mut sigma = prior.clone();
    let mut prev_w: Option<DVector<f64>> = None;
    let mut elbo_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < hp.max_iters {
        iterations += 1;
        let (w, v_hat) = e_step(&sigma, outcome_var)?;
        let update = em_m_step(stats, &prior, hp.concentration, &w, v_hat);
        sigma = PdMatrix::from_matrix(update).map_err(|_| Error::EmLostDefiniteness { iteration: iterations })?;
        if trace {
            elbo_trace.push(elbo_from_stats(stats, &prior, hp.concentration, &w, v_hat, &sigma, outcome_var)?);
        }
        if let Some(prev) = &prev_w {
            // ‖ẑ' − ẑ‖² / (t − 1) with ẑ = Yw.
            let d = &w - prev;
            if d.dot(&(stats.gram() * &d)) / n < hp.tol {
                converged = true;
                break;
            }
        }
        prev_w = Some(w);
    }
    log::trace!("em: {iterations} iterations, converged={converged}");
    Ok(EmFit {
        covariance: sigma,
        iterations,
        converged,
        elbo_trace,
    })
}

/// `E[Z_t | Y_t, Σ* ← Σ̂]`.
pub fn em_estimate(sigma_hat: &PdMatrix, y: &[f64], outcome_var: f64) -> Result<f64> {
    clairvoyant_weights(sigma_hat, outcome_var)?.apply(y)
}

/// Weights used in round `t = stats.rows() + 1`; with no history the prior
/// mean stands in for the covariance.
pub fn em_weights(stats: &SufficientStats, hp: &EmHyperparams, outcome_var: f64) -> Result<AggregationWeights> {
    let fit = em_fit(stats, hp, outcome_var)?;
    clairvoyant_weights(&fit.covariance, outcome_var)
}
