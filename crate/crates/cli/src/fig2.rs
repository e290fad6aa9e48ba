//! `crowdfuse fig2`: how many workers each history-free policy needs to match
//! plain averaging over a baseline pool.

use std::path::PathBuf;

use anyhow::{Context, Result};
use crowdfuse_core::evaluation::{workers_to_match, Policy};
use crowdfuse_core::seeding::replicate_seeds;
use log::info;

use crate::config::{ExperimentConfig, PolicyKind};
use crate::output::write_csv;

pub const FIG2_HEADER: [&str; 5] = ["baseline_k", "policy", "matching_k_lo", "matching_k", "matching_k_hi"];

fn policy_for(kind: PolicyKind) -> Policy {
    match kind {
        PolicyKind::Averaging => Policy::Averaging,
        PolicyKind::Clairvoyant => Policy::Clairvoyant,
        PolicyKind::OnlySkills => Policy::OnlySkills,
        PolicyKind::Pew | PolicyKind::Em => unreachable!("rejected when the config is loaded"),
    }
}

pub fn run_fig2(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let dgp = cfg.dgp_for(1);
    let mut rows = Vec::new();
    for &baseline in &cfg.fig2.baseline_k {
        let seeds = replicate_seeds(cfg.master_seed, baseline, cfg.seeds);
        for &kind in &cfg.fig2.policies {
            let m = workers_to_match(&policy_for(kind), baseline, &dgp, &seeds)
                .with_context(|| format!("matching {} against averaging at {baseline}", kind.as_str()))?;
            info!("{} matches averaging over {baseline} with {} workers", kind.as_str(), m.matching_k);
            rows.push(vec![
                baseline.to_string(),
                kind.as_str().to_string(),
                m.matching_k_lo.to_string(),
                m.matching_k.to_string(),
                m.matching_k_hi.to_string(),
            ]);
        }
    }
    let p = cfg.output_dir.join("fig2.csv");
    write_csv(&p, &[], &FIG2_HEADER, &rows)?;
    Ok(p)
}
