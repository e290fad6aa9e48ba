//! Grid search for PEW and EM hyperparameters.
//!
//! PEW is tuned in two stages. The SSL stage scores each `(λ, ρ, λ_ℓ)` by the
//! KL quality of its leave-one-out models at several history lengths, drops
//! combinations whose score does not improve with more data, and keeps the
//! best at the target length. The aggregation stage then picks the decay `r`
//! by closed-form MSE, with the same monotonicity filter. EM is tuned per
//! `(K, t)` by closed-form MSE.
//!
//! Every combination is scored on the same replicates, so comparisons are
//! paired and the selection is a deterministic function of the seed list.

use log::{info, warn};
use rayon::prelude::*;

use super::mean_stderr;
use super::mse::mse_closed_form;
use super::replicate::Replicate;
use super::ssl_metric::ssl_quality_metric;
use crate::datagen::DgpConfig;
use crate::error::{Error, Result};
use crate::policies::{em_weights, fit_ssl_models, pew_aggregation_weights, EmHyperparams, PewHyperparams};

#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    pub lambdas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub ig_shapes: Vec<f64>,
    pub reg_decays: Vec<f64>,
    pub em_prior_vars: Vec<f64>,
    pub em_prior_corrs: Vec<f64>,
    pub em_concentrations: Vec<f64>,
}

impl TuningGrid {
    /// The reference grid for `K` workers.
    pub fn reference(k: usize) -> Self {
        let kf = k as f64;
        Self {
            lambdas: (0..=5).map(|i| 2.0 * i as f64 * kf / 5.0).collect(),
            rhos: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            ig_shapes: vec![0.0, 2.0, 4.0, 6.0],
            reg_decays: (1..=8).map(|i| 2.5 * i as f64 * kf).collect(),
            em_prior_vars: vec![0.2, 2.0, 20.0],
            em_prior_corrs: vec![0.0, 0.1],
            em_concentrations: vec![0.1, 1.0, 10.0],
        }
    }

    fn ssl_combos(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &rho in &self.rhos {
                for &ig in &self.ig_shapes {
                    out.push((lambda, rho, ig));
                }
            }
        }
        out
    }

    fn em_combos(&self) -> Vec<EmHyperparams> {
        let mut out = Vec::new();
        for &v in &self.em_prior_vars {
            for &r in &self.em_prior_corrs {
                for &c in &self.em_concentrations {
                    out.push(EmHyperparams::new(v, r, c));
                }
            }
        }
        out
    }
}

/// Rounds at which each PEW stage is scored, and the round used to select.
#[derive(Debug, Clone, PartialEq)]
pub struct PewTuningSchedule {
    pub ssl_rounds: Vec<usize>,
    pub ssl_target: usize,
    pub agg_rounds: Vec<usize>,
    pub agg_target: usize,
}

impl PewTuningSchedule {
    pub fn reference(k: usize) -> Self {
        Self {
            ssl_rounds: vec![1, k, 10 * k, 100 * k],
            ssl_target: 100 * k,
            agg_rounds: vec![1, k, 3 * k, 5 * k, 7 * k, 10 * k],
            agg_target: 10 * k,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |ts: &[usize], target: usize| {
            !ts.is_empty() && ts.iter().all(|&t| t >= 1) && ts.windows(2).all(|w| w[0] < w[1]) && ts.contains(&target)
        };
        if ok(&self.ssl_rounds, self.ssl_target) && ok(&self.agg_rounds, self.agg_target) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "tuning rounds must be increasing, >= 1 and contain the target".into(),
            ))
        }
    }

    fn max_rows(&self) -> usize {
        let last = |ts: &[usize]| ts.last().copied().unwrap_or(1);
        last(&self.ssl_rounds).max(last(&self.agg_rounds)) - 1
    }
}

/// One scored `(combination, t)` cell of a search.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    /// `pew_ssl`, `pew_agg` or `em`.
    pub stage: &'static str,
    pub combo_id: usize,
    pub params: Vec<(&'static str, f64)>,
    pub t: usize,
    pub metric_mean: f64,
    pub metric_stderr: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct PewTuning {
    pub hyperparams: PewHyperparams,
    pub audit: Vec<AuditRow>,
}

#[derive(Debug, Clone)]
pub struct EmTuning {
    pub hyperparams: EmHyperparams,
    pub audit: Vec<AuditRow>,
}

/// Mean and standard error where any infinite value (invalid model or
/// failed fit) makes the cell infinite.
fn summarize(values: &[f64]) -> (f64, f64) {
    if values.iter().any(|v| !v.is_finite()) {
        (f64::INFINITY, f64::INFINITY)
    } else {
        mean_stderr(values)
    }
}

/// `scores[seed][combo][t]` → `[combo][t]` of (mean, stderr).
fn summarize_cells(scores: &[Vec<Vec<f64>>], combos: usize, ts: usize) -> Vec<Vec<(f64, f64)>> {
    (0..combos)
        .map(|c| {
            (0..ts)
                .map(|i| summarize(&scores.iter().map(|s| s[c][i]).collect::<Vec<_>>()))
                .collect()
        })
        .collect()
}

/// Index of the smallest finite score among `candidates`; ties go to the
/// earlier combination.
fn argmin(candidates: impl Iterator<Item = usize>, score: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        let s = score(c);
        if !s.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::InvalidParameter("empty seed list".into()))
    } else {
        Ok(())
    }
}

/// Two-stage PEW search on `cfg.num_workers` workers.
pub fn tune_pew(
    cfg: &DgpConfig,
    grid: &TuningGrid,
    schedule: &PewTuningSchedule,
    seeds: &[u64],
) -> Result<PewTuning> {
    check_seeds(seeds)?;
    schedule.validate()?;
    let k = cfg.num_workers;
    let ssl = grid.ssl_combos();
    if ssl.is_empty() || grid.reg_decays.is_empty() {
        return Err(Error::InvalidParameter("empty PEW tuning grid".into()));
    }
    let hp_for = |(lambda, rho, ig): (f64, f64, f64), r: f64| PewHyperparams {
        outcome_var: cfg.outcome_var,
        ..PewHyperparams::with_defaults(k, lambda, rho, ig, r)
    };
    // r does not enter the leave-one-out fits; any valid value will do here.
    let ssl_hps: Vec<PewHyperparams> = ssl.iter().map(|&c| hp_for(c, 1.0)).collect();
    for hp in &ssl_hps {
        hp.validate()?;
    }

    let rows = schedule.max_rows();
    let reps = seeds
        .par_iter()
        .map(|&seed| Replicate::draw(cfg, seed, rows))
        .collect::<Result<Vec<_>>>()?;

    // SSL stage.
    let ssl_scores = reps
        .par_iter()
        .map(|rep| {
            let stats: Vec<_> = schedule
                .ssl_rounds
                .iter()
                .map(|&t| rep.stats(t - 1))
                .collect::<Result<_>>()?;
            Ok(ssl_hps
                .iter()
                .map(|hp| {
                    stats
                        .iter()
                        .map(|s| {
                            fit_ssl_models(s, hp)
                                .and_then(|m| ssl_quality_metric(&m, &rep.noise_cov, cfg.outcome_var))
                                .map_or(f64::INFINITY, |q| q.value())
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
    let ssl_cells = summarize_cells(&ssl_scores, ssl.len(), schedule.ssl_rounds.len());
    let target_idx = schedule.ssl_rounds.iter().position(|&t| t == schedule.ssl_target).unwrap();

    let selectable = |c: usize| ssl[c].0 > 0.0;
    let monotone = |c: usize| ssl_cells[c].windows(2).all(|w| w[1].0 <= w[0].0);
    let at_target = |c: usize| ssl_cells[c][target_idx].0;
    let chosen_ssl = match argmin((0..ssl.len()).filter(|&c| selectable(c) && monotone(c)), at_target) {
        Some(c) => c,
        None => {
            warn!("no PEW combination improves monotonically with t; selecting best at t = {} without the filter", schedule.ssl_target);
            argmin((0..ssl.len()).filter(|&c| selectable(c)), at_target)
                .or_else(|| argmin(0..ssl.len(), at_target))
                .ok_or_else(|| Error::InvalidParameter("every PEW combination produced invalid models".into()))?
        }
    };
    let excluded = (0..ssl.len()).filter(|&c| !monotone(c)).count();
    info!("PEW SSL stage: {excluded} of {} combinations failed the monotonicity filter", ssl.len());

    let mut audit = Vec::new();
    for (c, &(lambda, rho, ig)) in ssl.iter().enumerate() {
        for (i, &t) in schedule.ssl_rounds.iter().enumerate() {
            audit.push(AuditRow {
                stage: "pew_ssl",
                combo_id: c,
                params: vec![("lambda", lambda), ("rho", rho), ("lambda_ell", ig)],
                t,
                metric_mean: ssl_cells[c][i].0,
                metric_stderr: ssl_cells[c][i].1,
                selected: c == chosen_ssl,
            });
        }
    }

    // Aggregation stage.
    let agg_hps: Vec<PewHyperparams> = grid.reg_decays.iter().map(|&r| hp_for(ssl[chosen_ssl], r)).collect();
    for hp in &agg_hps {
        hp.validate()?;
    }
    let agg_scores = reps
        .par_iter()
        .map(|rep| {
            let stats: Vec<_> = schedule
                .agg_rounds
                .iter()
                .map(|&t| rep.stats(t - 1))
                .collect::<Result<_>>()?;
            Ok(agg_hps
                .iter()
                .map(|hp| {
                    stats
                        .iter()
                        .map(|s| {
                            pew_aggregation_weights(s, hp)
                                .and_then(|w| mse_closed_form(&rep.noise_cov, &w, cfg.outcome_var))
                                .map_or(f64::INFINITY, |m| m.total())
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
    let agg_cells = summarize_cells(&agg_scores, agg_hps.len(), schedule.agg_rounds.len());
    let agg_idx = schedule.agg_rounds.iter().position(|&t| t == schedule.agg_target).unwrap();
    let agg_monotone = |c: usize| agg_cells[c].windows(2).all(|w| w[1].0 <= w[0].0);
    let agg_score = |c: usize| agg_cells[c][agg_idx].0;
    let chosen_r = match argmin((0..agg_hps.len()).filter(|&c| agg_monotone(c)), agg_score) {
        Some(c) => c,
        None => {
            warn!("no decay value improves monotonically with t; selecting best at t = {} without the filter", schedule.agg_target);
            argmin(0..agg_hps.len(), agg_score)
                .ok_or_else(|| Error::InvalidParameter("every decay value failed".into()))?
        }
    };
    for (c, &r) in grid.reg_decays.iter().enumerate() {
        for (i, &t) in schedule.agg_rounds.iter().enumerate() {
            audit.push(AuditRow {
                stage: "pew_agg",
                combo_id: c,
                params: vec![("r", r)],
                t,
                metric_mean: agg_cells[c][i].0,
                metric_stderr: agg_cells[c][i].1,
                selected: c == chosen_r,
            });
        }
    }

    Ok(PewTuning {
        hyperparams: agg_hps[chosen_r],
        audit,
    })
}

/// EM search at round `t`: the combination with the lowest mean MSE.
pub fn tune_em(cfg: &DgpConfig, t: usize, grid: &TuningGrid, seeds: &[u64]) -> Result<EmTuning> {
    check_seeds(seeds)?;
    if t == 0 {
        return Err(Error::InvalidParameter("t must be >= 1".into()));
    }
    let combos = grid.em_combos();
    if combos.is_empty() {
        return Err(Error::InvalidParameter("empty EM tuning grid".into()));
    }
    for hp in &combos {
        hp.validate()?;
    }
    let scores = seeds
        .par_iter()
        .map(|&seed| {
            let rep = Replicate::draw(cfg, seed, t - 1)?;
            let stats = rep.stats(t - 1)?;
            Ok(combos
                .iter()
                .map(|hp| {
                    let mse = em_weights(&stats, hp, cfg.outcome_var)
                        .and_then(|w| mse_closed_form(&rep.noise_cov, &w, cfg.outcome_var))
                        .map_or(f64::INFINITY, |m| m.total());
                    vec![mse]
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
    let cells = summarize_cells(&scores, combos.len(), 1);
    let chosen = argmin(0..combos.len(), |c| cells[c][0].0)
        .ok_or_else(|| Error::InvalidParameter("every EM combination failed".into()))?;
    let audit = combos
        .iter()
        .enumerate()
        .map(|(c, hp)| AuditRow {
            stage: "em",
            combo_id: c,
            params: vec![
                ("sigma_bar_sq", hp.prior_var),
                ("rho_bar", hp.prior_corr),
                ("c", hp.concentration),
            ],
            t,
            metric_mean: cells[c][0].0,
            metric_stderr: cells[c][0].1,
            selected: c == chosen,
        })
        .collect();
    Ok(EmTuning {
        hyperparams: combos[chosen],
        audit,
    })
}
