//! Out-of-sample surrogate for MSE when outcomes are never observed.
//!
//! A held-out worker's estimate `Ỹ = Z + noise` stands in for the outcome.
//! Because the held-out noise is independent of the pool's estimates (given
//! the factors, its loadings are fresh), `E[(Ỹ − Ẑ)²] = MSE + E[𝕍[Ỹ − Z]]`:
//! the surrogate differs from the MSE by a policy-independent constant.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;

use super::mean_stderr;
use super::mse::Policy;
use super::replicate::Replicate;
use crate::datagen::{sample_worker_loadings, DgpConfig};
use crate::error::{Error, Result};
use crate::linalg::sample_mvn_zero_mean;
use crate::seeding::{stream_rng, STREAM_EVAL};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct SurrogateEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Mean squared deviation on each seed's evaluation rounds, in seed order.
    pub per_seed: Vec<f64>,
}

impl SurrogateEstimate {
    fn from_per_seed(per_seed: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&per_seed);
        Self { mean, stderr, per_seed }
    }
}

/// Mean of `(Ỹ − Ẑ)²` over `eval_rounds` fresh rounds of `rep`.
///
/// `cfg` supplies the loading scale of held-out workers.
/// `estimator(y, z)` returns the group estimate for a round; `z` is passed
/// only so tests can build an oracle estimator. With a factor pool every
/// round draws a fresh worker's loadings; with a covariance-only replicate
/// the held-out noise is independent with variance equal to the mean noise
/// variance of the pool.
pub fn surrogate_squared_error<R, F>(
    rep: &Replicate,
    cfg: &DgpConfig,
    eval_rounds: usize,
    rng: &mut R,
    estimator: F,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&[f64], f64) -> Result<f64>,
{
    Ok(squared_errors(rep, cfg, eval_rounds, rng, &[&estimator])?[0])
}

type Estimator<'a> = &'a dyn Fn(&[f64], f64) -> Result<f64>;

/// Mean squared deviation of every estimator on common evaluation rounds.
fn squared_errors<R: Rng + ?Sized>(
    rep: &Replicate,
    cfg: &DgpConfig,
    eval_rounds: usize,
    rng: &mut R,
    estimators: &[Estimator<'_>],
) -> Result<Vec<f64>> {
    if eval_rounds == 0 {
        return Err(Error::InvalidParameter("eval_rounds must be >= 1".into()));
    }
    let z_dist = Normal::new(0.0, rep.outcome_var.sqrt())
        .map_err(|_| Error::InvalidParameter(format!("outcome variance {}", rep.outcome_var)))?;
    let k = rep.num_workers();
    let mut sums = vec![0.0; estimators.len()];
    let mut y = vec![0.0; k];
    let score = |z: f64, y: &[f64], held_out: f64, sums: &mut [f64]| -> Result<()> {
        for (s, est) in sums.iter_mut().zip(estimators) {
            *s += (held_out - est(y, z)?).powi(2);
        }
        Ok(())
    };

    match &rep.pool {
        Some(pool) => {
            let n = pool.num_factors();
            if cfg.num_factors != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: cfg.num_factors,
                });
            }
            let mut start = 0;
            while start < eval_rounds {
                let len = EVAL_CHUNK.min(eval_rounds - start);
                let mut z = Vec::with_capacity(len);
                let mut factors = DMatrix::<f64>::zeros(n, len);
                let mut fresh = Vec::with_capacity(len);
                for j in 0..len {
                    z.push(rng.sample(z_dist));
                    for i in 0..n {
                        factors[(i, j)] = rng.sample(StandardNormal);
                    }
                    fresh.push(sample_worker_loadings(cfg, rng));
                }
                let noise = pool.loadings() * &factors;
                for j in 0..len {
                    for w in 0..k {
                        y[w] = z[j] + noise[(w, j)];
                    }
                    let held_out = z[j] + fresh[j].dot(&factors.column(j));
                    score(z[j], &y, held_out, &mut sums)?;
                }
                start += len;
            }
        }
        None => {
            let sd = (rep.noise_cov.matrix().diagonal().mean()).sqrt();
            for _ in 0..eval_rounds {
                let z = rng.sample(z_dist);
                let noise = sample_mvn_zero_mean(&rep.noise_cov, rng);
                for w in 0..k {
                    y[w] = z + noise[w];
                }
                let held_out = z + sd * rng.sample::<f64, _>(StandardNormal);
                score(z, &y, held_out, &mut sums)?;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / eval_rounds as f64).collect())
}

/// Surrogate MSE of `policy` at round `t`, one replicate per seed.
pub fn surrogate_mse(
    policy: &Policy,
    cfg: &DgpConfig,
    t: usize,
    seeds: &[u64],
    eval_rounds: usize,
) -> Result<SurrogateEstimate> {
    Ok(surrogate_mse_paired(std::slice::from_ref(policy), cfg, t, seeds, eval_rounds)?
        .pop()
        .expect("one policy in, one estimate out"))
}

/// Surrogate MSE of several policies on common replicates and common
/// evaluation rounds (stream `(seed, [EVAL])`), so per-seed differences are
/// paired.
pub fn surrogate_mse_paired(
    policies: &[Policy],
    cfg: &DgpConfig,
    t: usize,
    seeds: &[u64],
    eval_rounds: usize,
) -> Result<Vec<SurrogateEstimate>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("empty seed list".into()));
    }
    if t == 0 {
        return Err(Error::InvalidParameter("t must be >= 1".into()));
    }
    let rows = if policies.iter().any(Policy::uses_history) { t - 1 } else { 0 };
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let rep = Replicate::draw(cfg, seed, rows)?;
            let stats = rep.stats(rows)?;
            let weights = policies
                .iter()
                .map(|p| p.weights(&rep.noise_cov, &stats, cfg.outcome_var))
                .collect::<Result<Vec<_>>>()?;
            let closures: Vec<_> = weights
                .iter()
                .map(|w| move |y: &[f64], _z: f64| w.apply(y))
                .collect();
            let refs: Vec<Estimator<'_>> = closures.iter().map(|c| c as Estimator<'_>).collect();
            squared_errors(&rep, cfg, eval_rounds, &mut stream_rng(seed, &[STREAM_EVAL]), &refs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..policies.len())
        .map(|i| SurrogateEstimate::from_per_seed(per_seed.iter().map(|v| v[i]).collect()))
        .collect())
}
