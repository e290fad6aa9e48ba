//! `crowdfuse selftest`: a fast invariant suite.
//!
//! The functions under test are passed in through [`Subjects`], so tests can
//! substitute deliberately broken versions and confirm the suite notices.

use std::time::Instant;

use crowdfuse_core::datagen::sample_history_from_covariance;
use crowdfuse_core::fixtures::random_pd;
use crowdfuse_core::linalg::{
    precision_from_regression_params, regression_params_from_cov, PdMatrix, SslModelSet, SymMatrix,
};
use crowdfuse_core::policies::{
    blr_fit, blr_loss, clairvoyant_weights, e_step, elbo, em_m_step, pew_weights, AggregationWeights,
    EmHyperparams, PewHyperparams, SufficientStats,
};
use crowdfuse_core::seeding::stream_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const SEED: u64 = 0x5e1f_7e57;

pub type PewWeightsFn = fn(&SslModelSet, f64) -> crowdfuse_core::Result<AggregationWeights>;
pub type MStepFn = fn(&SufficientStats, &PdMatrix, f64, &DVector<f64>, f64) -> DMatrix<f64>;

/// Implementations checked by the suite.
#[derive(Clone, Copy)]
pub struct Subjects {
    pub pew_weights: PewWeightsFn,
    pub em_m_step: MStepFn,
    /// Symmetrize each M-step result before certifying it positive definite.
    pub symmetrize: bool,
}

impl Default for Subjects {
    fn default() -> Self {
        Self {
            pew_weights,
            em_m_step,
            symmetrize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub observed: String,
    pub expected: String,
}

fn check(name: &'static str, result: crowdfuse_core::Result<(bool, String)>, expected: &str) -> CheckOutcome {
    let (pass, observed) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        pass,
        observed,
        expected: expected.to_string(),
    }
}

fn prescient(s: &PdMatrix) -> crowdfuse_core::Result<SslModelSet> {
    SslModelSet::new((0..s.dim()).map(|k| regression_params_from_cov(s, k)).collect::<Result<_, _>>()?)
}

fn precision_round_trip() -> crowdfuse_core::Result<(bool, String)> {
    let mut rng = stream_rng(SEED, &[1]);
    let mut worst = 0.0f64;
    for i in 0..60 {
        let s = random_pd(2 + i % 29, &mut rng);
        let p = precision_from_regression_params(&prescient(&s)?)?;
        worst = worst.max((p - s.inverse()).amax());
    }
    Ok((worst <= 1e-8, format!("max entry error {worst:.2e}")))
}

fn prescient_identity(subjects: &Subjects) -> crowdfuse_core::Result<(bool, String)> {
    let mut rng = stream_rng(SEED, &[2]);
    let mut worst = 0.0f64;
    for i in 0..30 {
        let v = [0.5, 1.0, 2.0][i % 3];
        let k = 2 + rng.random_range(0..20);
        let sigma = random_pd(k, &mut rng);
        let s = PdMatrix::from_matrix(sigma.matrix() + DMatrix::from_element(k, k, v))?;
        let a = (subjects.pew_weights)(&prescient(&s)?, v)?;
        let b = clairvoyant_weights(&sigma, v)?;
        worst = worst.max((a.as_vector() - b.as_vector()).amax());
    }
    Ok((worst <= 1e-8, format!("max weight gap {worst:.2e}")))
}

fn blr_gradient() -> crowdfuse_core::Result<(bool, String)> {
    let mut rng = stream_rng(SEED, &[3]);
    let k = 10;
    let mut worst = 0.0f64;
    for i in 0..15 {
        let t = [1, 50, 500][i % 3];
        let sigma = random_pd(k, &mut rng);
        let rows = sample_history_from_covariance(&sigma, t - 1, 1.0, &mut rng)?.estimates().clone();
        let stats = SufficientStats::from_rows(&rows);
        let hp = PewHyperparams::with_defaults(k, rng.random_range(0.5..20.0), rng.random_range(0.0..0.8), rng.random_range(0.0..6.0), 75.0);
        let w = rng.random_range(0..k);
        let fit = blr_fit(&stats, w, &hp)?;
        let f = |u: &DVector<f64>, l: f64| blr_loss(&rows, w, &hp, u, l);
        let base = f(fit.coeffs(), fit.residual_var());
        let mut scaled = 0.0f64;
        for j in 0..k - 1 {
            let scale = fit.coeffs()[j].abs().max(1.0);
            let h = 1e-6 * scale;
            let (mut up, mut dn) = (fit.coeffs().clone(), fit.coeffs().clone());
            up[j] += h;
            dn[j] -= h;
            let g = (f(&up, fit.residual_var()) - f(&dn, fit.residual_var())) / (2.0 * h);
            scaled = scaled.max(g.abs() * scale);
        }
        let l = fit.residual_var();
        let h = 1e-6 * l;
        let g = (f(fit.coeffs(), l + h) - f(fit.coeffs(), l - h)) / (2.0 * h);
        scaled = scaled.max(g.abs() * l);
        worst = worst.max(scaled / base.abs().max(1.0));
    }
    Ok((worst <= 1e-4, format!("max scaled gradient {worst:.2e}")))
}

/// Runs EM with the subject M-step and checks the bound never decreases.
fn elbo_ascent(subjects: &Subjects) -> crowdfuse_core::Result<(bool, String)> {
    let mut rng = stream_rng(SEED, &[4]);
    let (k, rows_n, v) = (6, 80, 1.0);
    let mut worst = 0.0f64;
    let mut iterations = 0;
    for i in 0..4 {
        let truth = random_pd(k, &mut rng);
        let rows = sample_history_from_covariance(&truth, rows_n, v, &mut rng)?.estimates().clone();
        let stats = SufficientStats::from_rows(&rows);
        let hp = EmHyperparams::new([0.2, 2.0][i % 2], [0.0, 0.1][i % 2], [0.1, 1.0, 10.0][i % 3]);
        let prior = hp.prior_mean(k)?;
        let mut sigma = prior.clone();
        let mut previous: Option<f64> = None;
        for _ in 0..200 {
            iterations += 1;
            let (w, v_hat) = e_step(&sigma, v)?;
            let update = (subjects.em_m_step)(&stats, &prior, hp.concentration, &w, v_hat);
            sigma = if subjects.symmetrize {
                PdMatrix::from_matrix(update)?
            } else {
                PdMatrix::new(SymMatrix::new(update)?)?
            };
            let z: Vec<f64> = (&rows * &w).iter().copied().collect();
            let g = elbo(&rows, &prior, hp.concentration, &z, &vec![v_hat; rows_n], &sigma, v)?;
            if let Some(p) = previous {
                worst = worst.max((p - g) / p.abs().max(1.0));
                if (g - p).abs() <= 1e-12 * p.abs().max(1.0) {
                    break;
                }
            }
            previous = Some(g);
        }
    }
    Ok((worst <= 1e-6, format!("largest relative decrease {worst:.2e} over {iterations} iterations")))
}

pub fn run_checks(subjects: &Subjects) -> Vec<CheckOutcome> {
    vec![
        check("precision_round_trip", precision_round_trip(), "max entry error <= 1e-8"),
        check("prescient_identity", prescient_identity(subjects), "max weight gap <= 1e-8"),
        check("blr_gradient", blr_gradient(), "max scaled gradient <= 1e-4"),
        check("elbo_ascent", elbo_ascent(subjects), "relative decrease <= 1e-6"),
    ]
}

/// Runs the suite, printing one line per check; true if all pass.
pub fn run_selftest(subjects: &Subjects) -> bool {
    let start = Instant::now();
    let results = run_checks(subjects);
    for r in &results {
        if r.pass {
            println!("ok   {}: {}", r.name, r.observed);
        } else {
            println!("FAIL {}: observed {}; expected {}", r.name, r.observed, r.expected);
        }
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed, {:.1}s", results.len(), start.elapsed().as_secs_f64());
    failed == 0
}
