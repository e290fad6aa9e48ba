use log::warn;
use nalgebra::DMatrix;

use crate::datagen::{
    noise_covariance, sample_history, sample_history_from_covariance, sample_loadings, DgpConfig,
    History, WorkerPool,
};
use crate::error::{Error, Result};
use crate::linalg::PdMatrix;
use crate::policies::SufficientStats;
use crate::seeding::{stream_rng, STREAM_HISTORY, STREAM_POOL};

/// Pool redraws allowed before a degenerate configuration is reported.
const MAX_POOL_ATTEMPTS: u64 = 16;

/// One Monte Carlo replicate: a noise covariance and a history drawn under it.
///
/// The pool comes from stream `(seed, [POOL, attempt])` and the history from
/// `(seed, [HISTORY])`. A degenerate pool is redrawn with `attempt + 1`.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub seed: u64,
    pub noise_cov: PdMatrix,
    /// `None` when the covariance was supplied directly.
    pub pool: Option<WorkerPool>,
    pub history: History,
    pub outcome_var: f64,
    pub pool_redraws: u64,
}

impl Replicate {
    pub fn draw(cfg: &DgpConfig, seed: u64, rows: usize) -> Result<Self> {
        let (pool, noise_cov, pool_redraws) = draw_pool(cfg, seed)?;
        let history = sample_history(
            &pool,
            rows,
            cfg.outcome_var,
            &mut stream_rng(seed, &[STREAM_HISTORY]),
        )?;
        Ok(Self {
            seed,
            noise_cov,
            pool: Some(pool),
            history,
            outcome_var: cfg.outcome_var,
            pool_redraws,
        })
    }

    /// Replicate with a fixed noise covariance in place of a sampled pool.
    pub fn with_covariance(noise_cov: PdMatrix, outcome_var: f64, seed: u64, rows: usize) -> Result<Self> {
        let history = sample_history_from_covariance(
            &noise_cov,
            rows,
            outcome_var,
            &mut stream_rng(seed, &[STREAM_HISTORY]),
        )?;
        Ok(Self {
            seed,
            noise_cov,
            pool: None,
            history,
            outcome_var,
            pool_redraws: 0,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.noise_cov.dim()
    }

    /// Sufficient statistics of the first `rows` rounds.
    pub fn stats(&self, rows: usize) -> Result<SufficientStats> {
        let mut s = SufficientStats::new(self.num_workers());
        s.extend(self.history.estimates(), 0, rows)?;
        Ok(s)
    }

    pub fn rows(&self, rows: usize) -> Result<DMatrix<f64>> {
        if rows > self.history.rounds() {
            return Err(Error::IndexOutOfRange {
                index: rows,
                dim: self.history.rounds(),
            });
        }
        Ok(self.history.estimates().rows(0, rows).into_owned())
    }
}

pub(crate) fn draw_pool(cfg: &DgpConfig, seed: u64) -> Result<(WorkerPool, PdMatrix, u64)> {
    for attempt in 0..MAX_POOL_ATTEMPTS {
        let pool = sample_loadings(cfg, &mut stream_rng(seed, &[STREAM_POOL, attempt]))?;
        match noise_covariance(&pool) {
            Ok(cov) => {
                if attempt > 0 {
                    warn!("seed {seed}: pool redrawn {attempt} time(s) after degenerate covariance");
                }
                return Ok((pool, cov, attempt));
            }
            Err(Error::DegeneratePool) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegeneratePool)
}
