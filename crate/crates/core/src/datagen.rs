//! Gaussian factor-model data generation.
//!
//! Worker `k` reports `Y_k = Z + Σₙ C[k][n]·Xₙ` where `Z ~ N(0, v̄)`, the
//! factors `X ~ N(0, I_N)` are fresh each round and the loadings
//! `C[k][n] ~ N(0, n^{−q})` (1-based `n`) are drawn once per pool.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{sample_mvn_zero_mean, PdMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpConfig {
    pub num_factors: usize,
    pub decay: f64,
    pub num_workers: usize,
    pub outcome_var: f64,
}

impl DgpConfig {
    pub fn new(num_workers: usize) -> Self {
        Self {
            num_factors: 1000,
            decay: 1.7,
            num_workers,
            outcome_var: 1.0,
        }
    }

    pub fn with_workers(self, num_workers: usize) -> Self {
        Self { num_workers, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_factors == 0 {
            return Err(Error::InvalidParameter("num_factors must be >= 1".into()));
        }
        if self.num_workers == 0 {
            return Err(Error::InvalidParameter("num_workers must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::InvalidParameter(format!("decay must be > 0, got {}", self.decay)));
        }
        if !(self.outcome_var > 0.0 && self.outcome_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "outcome_var must be > 0, got {}",
                self.outcome_var
            )));
        }
        Ok(())
    }

    /// Standard deviation of loading column `n` (0-based).
    pub fn loading_sd(&self, n: usize) -> f64 {
        ((n + 1) as f64).powf(-self.decay / 2.0)
    }

    /// `E[Σ*ₖₖ] = Σₙ n^{−q}`.
    pub fn expected_noise_var(&self) -> f64 {
        (1..=self.num_factors).map(|n| (n as f64).powf(-self.decay)).sum()
    }
}

/// Factor loadings of a pool of workers, one row per worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerPool {
    loadings: DMatrix<f64>,
}

impl WorkerPool {
    pub fn new(loadings: DMatrix<f64>) -> Result<Self> {
        if loadings.nrows() == 0 || loadings.ncols() == 0 {
            return Err(Error::InvalidParameter("empty loading matrix".into()));
        }
        if loadings.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite loading".into()));
        }
        Ok(Self { loadings })
    }

    pub fn num_workers(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn num_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    /// The first `k` workers of the pool.
    pub fn leading(&self, k: usize) -> Result<WorkerPool> {
        if k == 0 || k > self.num_workers() {
            return Err(Error::IndexOutOfRange {
                index: k,
                dim: self.num_workers(),
            });
        }
        Ok(Self {
            loadings: self.loadings.rows(0, k).into_owned(),
        })
    }

    /// Reorders workers so that new worker `i` is old worker `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<WorkerPool> {
        let k = self.num_workers();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParameter("not a permutation of the pool".into()));
        }
        Ok(Self {
            loadings: DMatrix::from_fn(k, self.num_factors(), |i, n| self.loadings[(perm[i], n)]),
        })
    }
}

/// Draws loadings worker by worker, so the first `k` rows of a larger pool
/// drawn from the same stream equal a pool of `k` drawn directly.
pub fn sample_loadings<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<WorkerPool> {
    cfg.validate()?;
    let sds: Vec<f64> = (0..cfg.num_factors).map(|n| cfg.loading_sd(n)).collect();
    let mut c = DMatrix::zeros(cfg.num_workers, cfg.num_factors);
    for k in 0..cfg.num_workers {
        for (n, sd) in sds.iter().enumerate() {
            c[(k, n)] = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    WorkerPool::new(c)
}

/// Loadings of a single fresh worker.
pub fn sample_worker_loadings<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(cfg.num_factors, |n, _| {
        cfg.loading_sd(n) * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Smallest squared Cholesky pivot, relative to the largest variance, for
/// `Σ*` to count as full rank.
const RANK_TOLERANCE: f64 = 1e-12;

/// `Σ* = C Cᵀ`, the noise covariance conditioned on the loadings.
///
/// A pool with more workers than factors is singular by construction; other
/// pools whose Cholesky pivots collapse to roundoff are rejected as well.
pub fn noise_covariance(pool: &WorkerPool) -> Result<PdMatrix> {
    if pool.num_workers() > pool.num_factors() {
        return Err(Error::DegeneratePool);
    }
    let c = pool.loadings();
    let cov = PdMatrix::from_matrix(c * c.transpose()).map_err(|e| match e {
        Error::NotPositiveDefinite => Error::DegeneratePool,
        other => other,
    })?;
    let scale = cov.matrix().diagonal().max();
    let min_pivot = cov.factor().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d * d));
    if min_pivot < RANK_TOLERANCE * scale {
        return Err(Error::DegeneratePool);
    }
    Ok(cov)
}

/// Outcomes and worker estimates for `t` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    outcomes: DVector<f64>,
    estimates: DMatrix<f64>,
}

impl History {
    pub fn new(outcomes: DVector<f64>, estimates: DMatrix<f64>) -> Result<Self> {
        if outcomes.len() != estimates.nrows() {
            return Err(Error::DimensionMismatch {
                expected: estimates.nrows(),
                found: outcomes.len(),
            });
        }
        Ok(Self { outcomes, estimates })
    }

    pub fn rounds(&self) -> usize {
        self.outcomes.len()
    }

    pub fn num_workers(&self) -> usize {
        self.estimates.ncols()
    }

    pub fn outcomes(&self) -> &DVector<f64> {
        &self.outcomes
    }

    /// `t × K` matrix of estimates, one row per round.
    pub fn estimates(&self) -> &DMatrix<f64> {
        &self.estimates
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "round,z")?;
        for k in 1..=self.num_workers() {
            write!(w, ",y_{k}")?;
        }
        writeln!(w)?;
        for (tau, z) in self.outcomes.iter().enumerate() {
            write!(w, "{},{}", tau + 1, z)?;
            for y in self.estimates.row(tau).iter() {
                write!(w, ",{y}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

const HISTORY_CHUNK: usize = 512;

/// Generates `t` rounds from the factor model. Per round the stream yields
/// `Z` first and then the `N` factors.
pub fn sample_history<R: Rng + ?Sized>(
    pool: &WorkerPool,
    t: usize,
    outcome_var: f64,
    rng: &mut R,
) -> Result<History> {
    let z_dist = Normal::new(0.0, outcome_var.sqrt())
        .map_err(|_| Error::InvalidParameter(format!("outcome variance {outcome_var}")))?;
    let k = pool.num_workers();
    let n = pool.num_factors();
    let mut outcomes = DVector::zeros(t);
    let mut estimates = DMatrix::zeros(t, k);
    let mut start = 0;
    while start < t {
        let len = HISTORY_CHUNK.min(t - start);
        let mut factors = DMatrix::<f64>::zeros(n, len);
        for j in 0..len {
            outcomes[start + j] = rng.sample(z_dist);
            for i in 0..n {
                factors[(i, j)] = rng.sample(StandardNormal);
            }
        }
        // K × len block of noise, transposed into rows of the history.
        let noise = pool.loadings() * &factors;
        for j in 0..len {
            let z = outcomes[start + j];
            for w in 0..k {
                estimates[(start + j, w)] = z + noise[(w, j)];
            }
        }
        start += len;
    }
    History::new(outcomes, estimates)
}

/// Generates `t` rounds with noise drawn directly from `N(0, Σ*)`.
pub fn sample_history_from_covariance<R: Rng + ?Sized>(
    noise_cov: &PdMatrix,
    t: usize,
    outcome_var: f64,
    rng: &mut R,
) -> Result<History> {
    let z_dist = Normal::new(0.0, outcome_var.sqrt())
        .map_err(|_| Error::InvalidParameter(format!("outcome variance {outcome_var}")))?;
    let k = noise_cov.dim();
    let mut outcomes = DVector::zeros(t);
    let mut estimates = DMatrix::zeros(t, k);
    for tau in 0..t {
        let z = rng.sample(z_dist);
        outcomes[tau] = z;
        let noise = sample_mvn_zero_mean(noise_cov, rng);
        for w in 0..k {
            estimates[(tau, w)] = z + noise[w];
        }
    }
    History::new(outcomes, estimates)
}

/// Average estimate of the pool in a round with outcome `z` and factors `x`.
pub fn consensus_estimate(pool: &WorkerPool, z: f64, factors: &DVector<f64>) -> Result<f64> {
    if factors.len() != pool.num_factors() {
        return Err(Error::DimensionMismatch {
            expected: pool.num_factors(),
            found: factors.len(),
        });
    }
    let noise = pool.loadings() * factors;
    Ok(z + noise.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn config_validation() {
        assert!(DgpConfig::new(10).validate().is_ok());
        assert!(DgpConfig { num_factors: 0, ..DgpConfig::new(3) }.validate().is_err());
        assert!(DgpConfig { decay: 0.0, ..DgpConfig::new(3) }.validate().is_err());
        assert!(DgpConfig { outcome_var: -1.0, ..DgpConfig::new(3) }.validate().is_err());
        assert!(DgpConfig::new(0).validate().is_err());
    }

    #[test]
    fn expected_noise_var_partial_sum() {
        // Σ_{n=1}^{1000} n^{-1.7} by direct summation.
        let direct: f64 = (1..=1000).map(|n| (n as f64).powf(-1.7)).sum();
        assert!((DgpConfig::new(1).expected_noise_var() - direct).abs() < 1e-12);
        assert!((direct - 2.04).abs() < 0.01, "{direct}");
    }

    #[test]
    fn steep_decay_gives_rank_one_covariance() {
        let cfg = DgpConfig { decay: 50.0, num_factors: 50, ..DgpConfig::new(4) };
        let pool = sample_loadings(&cfg, &mut rng(1)).unwrap();
        assert!(pool.loadings().columns(1, 49).amax() < 1e-6);
        let c1 = pool.loadings().column(0);
        let rank1 = c1 * c1.transpose();
        let full = pool.loadings() * pool.loadings().transpose();
        assert!((full - rank1).amax() < 1e-12);
    }

    #[test]
    fn loadings_are_deterministic_and_nested() {
        let cfg = DgpConfig::new(6);
        let a = sample_loadings(&cfg, &mut rng(2)).unwrap();
        let b = sample_loadings(&cfg, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        let small = sample_loadings(&cfg.with_workers(3), &mut rng(2)).unwrap();
        assert_eq!(small, a.leading(3).unwrap());
    }

    #[test]
    fn noise_covariance_simple_cases() {
        let pool = WorkerPool::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(noise_covariance(&pool).unwrap().matrix(), &DMatrix::identity(3, 3));
        let row = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let s = noise_covariance(&WorkerPool::new(row).unwrap()).unwrap();
        assert_eq!(s.matrix()[(0, 0)], 14.0);
    }

    #[test]
    fn degenerate_pool_is_reported() {
        let cfg = DgpConfig { num_factors: 2, ..DgpConfig::new(4) };
        let pool = sample_loadings(&cfg, &mut rng(3)).unwrap();
        assert_eq!(noise_covariance(&pool).unwrap_err(), Error::DegeneratePool);
    }

    #[test]
    fn empty_and_zero_noise_histories() {
        let pool = WorkerPool::new(DMatrix::zeros(3, 5)).unwrap();
        let h = sample_history(&pool, 0, 1.0, &mut rng(4)).unwrap();
        assert_eq!(h.rounds(), 0);
        let h = sample_history(&pool, 700, 1.0, &mut rng(4)).unwrap();
        for tau in 0..700 {
            for k in 0..3 {
                assert_eq!(h.estimates()[(tau, k)], h.outcomes()[tau]);
            }
        }
    }

    #[test]
    fn history_reconstructs_factor_noise() {
        let cfg = DgpConfig { num_factors: 7, ..DgpConfig::new(3) };
        let pool = sample_loadings(&cfg, &mut rng(5)).unwrap();
        let h = sample_history(&pool, 3, 2.0, &mut rng(6)).unwrap();
        // Replay the stream: Z then the N factors, per round.
        let mut r = rng(6);
        let zd = Normal::new(0.0, 2f64.sqrt()).unwrap();
        for tau in 0..3 {
            let z: f64 = r.sample(zd);
            let x = DVector::from_fn(7, |_, _| r.sample::<f64, _>(StandardNormal));
            let y = pool.loadings() * &x;
            assert_eq!(h.outcomes()[tau], z);
            for k in 0..3 {
                assert!((h.estimates()[(tau, k)] - z - y[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consensus_examples() {
        let zero = WorkerPool::new(DMatrix::zeros(1, 4)).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(consensus_estimate(&zero, 0.7, &x).unwrap(), 0.7);
        let cfg = DgpConfig { num_factors: 4, ..DgpConfig::new(25) };
        let pool = sample_loadings(&cfg, &mut rng(7)).unwrap();
        assert_eq!(consensus_estimate(&pool, -1.25, &DVector::zeros(4)).unwrap(), -1.25);
        assert!(consensus_estimate(&pool, 0.0, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn permuted_pool_permutes_columns() {
        let cfg = DgpConfig { num_factors: 20, ..DgpConfig::new(4) };
        let pool = sample_loadings(&cfg, &mut rng(8)).unwrap();
        let perm = [2, 0, 3, 1];
        let swapped = pool.permuted(&perm).unwrap();
        let h = sample_history(&pool, 50, 1.0, &mut rng(9)).unwrap();
        let hp = sample_history(&swapped, 50, 1.0, &mut rng(9)).unwrap();
        for tau in 0..50 {
            for (i, &p) in perm.iter().enumerate() {
                assert!((hp.estimates()[(tau, i)] - h.estimates()[(tau, p)]).abs() < 1e-12);
            }
        }
        assert!(pool.permuted(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn csv_dump_format() {
        let h = History::new(
            DVector::from_vec(vec![0.5, -1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.25, -2.0, 3.5]),
        )
        .unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,z,y_1,y_2\n1,0.5,1,0.25\n2,-1,-2,3.5\n"
        );
    }
}
