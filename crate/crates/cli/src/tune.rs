//! `crowdfuse tune`: grid search for PEW or EM hyperparameters.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use crowdfuse_core::evaluation::{tune_em, tune_pew, AuditRow, EmTuning, PewTuning};
use crowdfuse_core::seeding::tuning_seeds;
use log::info;

use crate::config::{ExperimentConfig, TuneTarget};
use crate::output::{fmt_bool, fmt_f64, write_csv};

pub const PEW_TUNED_HEADER: [&str; 5] = ["K", "lambda", "rho", "lambda_ell", "r"];
pub const EM_TUNED_HEADER: [&str; 5] = ["K", "t", "sigma_bar_sq", "rho_bar", "c"];
const PEW_PARAMS: [&str; 4] = ["lambda", "rho", "lambda_ell", "r"];
const EM_PARAMS: [&str; 3] = ["sigma_bar_sq", "rho_bar", "c"];

pub fn audit_header(params: &[&'static str]) -> Vec<&'static str> {
    let mut h = vec!["stage", "combo_id"];
    h.extend_from_slice(params);
    h.extend_from_slice(&["t", "metric_mean", "metric_stderr", "selected"]);
    h
}

/// Audit rows with one column per parameter name; parameters a stage does
/// not vary are left empty.
fn audit_rows(rows: &[AuditRow], params: &[&str]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let mut out = vec![r.stage.to_string(), r.combo_id.to_string()];
            for p in params {
                out.push(r.params.iter().find(|(n, _)| n == p).map_or(String::new(), |(_, v)| fmt_f64(*v)));
            }
            out.extend([r.t.to_string(), fmt_f64(r.metric_mean), fmt_f64(r.metric_stderr), fmt_bool(r.selected)]);
            out
        })
        .collect()
}

pub fn tune_pew_at(cfg: &ExperimentConfig, k: usize) -> Result<PewTuning> {
    info!("tuning PEW at K = {k} over {} seeds", cfg.tuning_seeds);
    let seeds = tuning_seeds(cfg.master_seed, k, cfg.tuning_seeds);
    tune_pew(&cfg.dgp_for(k), &cfg.tuning_grid(k), &cfg.tuning_schedule(k), &seeds)
        .with_context(|| format!("PEW tuning at K = {k}"))
}

pub fn tune_em_at(cfg: &ExperimentConfig, k: usize, t: usize) -> Result<EmTuning> {
    info!("tuning EM at K = {k}, t = {t} over {} seeds", cfg.tuning_seeds);
    let seeds = tuning_seeds(cfg.master_seed, k, cfg.tuning_seeds);
    tune_em(&cfg.dgp_for(k), t, &cfg.tuning_grid(k), &seeds).with_context(|| format!("EM tuning at K = {k}, t = {t}"))
}

/// Writes `tuned_pew.csv` and one `audit_pew_K{K}.csv` per worker count.
pub fn write_pew(dir: &Path, results: &[(usize, PewTuning)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(k, r)| {
            let h = &r.hyperparams;
            vec![k.to_string(), fmt_f64(h.lambda), fmt_f64(h.rho), fmt_f64(h.ig_shape), fmt_f64(h.reg_decay)]
        })
        .collect();
    let p = dir.join("tuned_pew.csv");
    write_csv(&p, &[], &PEW_TUNED_HEADER, &rows)?;
    written.push(p);
    for (k, r) in results {
        let p = dir.join(format!("audit_pew_K{k}.csv"));
        write_csv(&p, &[], &audit_header(&PEW_PARAMS), &audit_rows(&r.audit, &PEW_PARAMS))?;
        written.push(p);
    }
    Ok(written)
}

/// Writes `tuned_em.csv` and one `audit_em_K{K}.csv` per worker count.
pub fn write_em(dir: &Path, results: &[(usize, Vec<(usize, EmTuning)>)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut rows = Vec::new();
    for (k, per_t) in results {
        for (t, r) in per_t {
            let h = &r.hyperparams;
            rows.push(vec![
                k.to_string(),
                t.to_string(),
                fmt_f64(h.prior_var),
                fmt_f64(h.prior_corr),
                fmt_f64(h.concentration),
            ]);
        }
    }
    let p = dir.join("tuned_em.csv");
    write_csv(&p, &[], &EM_TUNED_HEADER, &rows)?;
    written.push(p);
    for (k, per_t) in results {
        let audit: Vec<AuditRow> = per_t.iter().flat_map(|(_, r)| r.audit.iter().cloned()).collect();
        let p = dir.join(format!("audit_em_K{k}.csv"));
        write_csv(
            &p,
            &["selection=lowest mean MSE".to_string()],
            &audit_header(&EM_PARAMS),
            &audit_rows(&audit, &EM_PARAMS),
        )?;
        written.push(p);
    }
    Ok(written)
}

pub fn run_tune(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let target = cfg
        .tune
        .policy
        .ok_or_else(|| cfg.error("set `policy = \"pew\"` or `policy = \"em\"` in the [tune] section"))?;
    cfg.require_k_values()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    match target {
        TuneTarget::Pew => {
            let results = cfg
                .k_values
                .iter()
                .map(|&k| Ok((k, tune_pew_at(cfg, k)?)))
                .collect::<Result<Vec<_>>>()?;
            write_pew(&cfg.output_dir, &results)
        }
        TuneTarget::Em => {
            let mut results = Vec::new();
            for &k in &cfg.k_values {
                let ts = cfg.em_tuning_rounds(k);
                if ts.is_empty() {
                    return Err(cfg.error("EM tuning needs `t_values` (top level or in [tune])").into());
                }
                let per_t = ts.iter().map(|&t| Ok((t, tune_em_at(cfg, k, t)?))).collect::<Result<Vec<_>>>()?;
                results.push((k, per_t));
            }
            write_em(&cfg.output_dir, &results)
        }
    }
}
