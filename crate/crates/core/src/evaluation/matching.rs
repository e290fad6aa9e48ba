use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;

use super::mean_stderr;
use super::mse::{mse_closed_form, Policy};
use super::replicate::draw_pool;
use crate::datagen::DgpConfig;
use crate::error::{Error, Result};
use crate::linalg::PdMatrix;
use crate::policies::{averaging_weights, SufficientStats};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub baseline_k: usize,
    /// Smallest pool size whose mean MSE is at most the baseline mean.
    pub matching_k: usize,
    /// Match against baseline mean + one standard error.
    pub matching_k_lo: usize,
    /// Match against baseline mean − one standard error.
    pub matching_k_hi: usize,
    pub baseline_mse: f64,
    pub baseline_stderr: f64,
}

/// Number of workers a history-free policy needs to match averaging over
/// `baseline_k` workers.
///
/// Each seed draws one pool of `4 · baseline_k` workers; every candidate size
/// uses a leading sub-pool, so all sizes share common random loadings. The
/// search is a bisection that assumes mean MSE is non-increasing in pool size.
pub fn workers_to_match(
    policy: &Policy,
    baseline_k: usize,
    cfg: &DgpConfig,
    seeds: &[u64],
) -> Result<MatchResult> {
    if baseline_k == 0 {
        return Err(Error::InvalidParameter("baseline_k must be >= 1".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("empty seed list".into()));
    }
    if policy.uses_history() {
        return Err(Error::InvalidParameter(format!(
            "policy {} needs a history; matching supports history-free policies",
            policy.kind()
        )));
    }
    let cap = 4 * baseline_k;
    let pool_cfg = cfg.with_workers(cap);
    let covs = seeds
        .par_iter()
        .map(|&seed| draw_pool(&pool_cfg, seed).map(|(_, cov, _)| cov))
        .collect::<Result<Vec<PdMatrix>>>()?;

    let mean_mse = |k: usize, policy: &Policy| -> Result<(f64, f64)> {
        let totals = covs
            .par_iter()
            .map(|cov| {
                let sub = cov.leading(k)?;
                let w = policy.weights(&sub, &SufficientStats::new(k), cfg.outcome_var)?;
                Ok(mse_closed_form(&sub, &w, cfg.outcome_var)?.total())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(mean_stderr(&totals))
    };

    let (baseline_mse, baseline_stderr) = {
        let totals = covs
            .iter()
            .map(|cov| {
                let sub = cov.leading(baseline_k)?;
                Ok(mse_closed_form(&sub, &averaging_weights(baseline_k), cfg.outcome_var)?.total())
            })
            .collect::<Result<Vec<f64>>>()?;
        mean_stderr(&totals)
    };

    if *policy == Policy::Averaging {
        // Self-match: the baseline itself.
        return Ok(MatchResult {
            baseline_k,
            matching_k: baseline_k,
            matching_k_lo: baseline_k,
            matching_k_hi: baseline_k,
            baseline_mse,
            baseline_stderr,
        });
    }

    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut curve = |k: usize| -> Result<f64> {
        if let Some(v) = cache.get(&k) {
            return Ok(*v);
        }
        let (m, _) = mean_mse(k, policy)?;
        cache.insert(k, m);
        Ok(m)
    };

    let mut search = |target: f64| -> Result<usize> {
        if curve(cap)? > target {
            return Err(Error::SearchCapExceeded { cap });
        }
        let (mut lo, mut hi) = (1usize, cap);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if curve(mid)? <= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Ok(lo)
    };

    let matching_k = search(baseline_mse)?;
    let matching_k_lo = search(baseline_mse + baseline_stderr)?;
    let matching_k_hi = match search(baseline_mse - baseline_stderr) {
        Ok(k) => k,
        Err(Error::SearchCapExceeded { cap }) => {
            warn!("upper matching bound saturated at {cap} workers");
            cap
        }
        Err(e) => return Err(e),
    };
    Ok(MatchResult {
        baseline_k,
        matching_k,
        matching_k_lo,
        matching_k_hi,
        baseline_mse,
        baseline_stderr,
    })
}
