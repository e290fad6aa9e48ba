//! `crowdfuse sweep`: closed-form MSE of every configured policy over a grid
//! of worker counts, history lengths and replicates.
//!
//! Work is split into `(K, replicate)` units. Each finished unit is written to
//! `partial/K{K}_s{i}.csv` before the final tables are assembled, so a run
//! that dies part-way can be continued with `--resume`. Final tables are
//! assembled in sorted order from the unit files, which makes the output the
//! same whether or not the run was interrupted.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crowdfuse_core::evaluation::{evaluate_replicate, mean_stderr, Policy, PolicyPlan};
use crowdfuse_core::policies::{EmHyperparams, PewHyperparams};
use crowdfuse_core::seeding::replicate_seeds;
use log::info;
use rayon::prelude::*;

use crate::config::{fingerprint, policy_name, ExperimentConfig, HyperparamSpec, PolicyKind, PolicySpec};
use crate::output::{fmt_f64, read_csv, write_atomic, write_csv};
use crate::tune::{tune_em_at, tune_pew_at, write_em, write_pew};

pub const RESULTS_HEADER: [&str; 7] = ["policy", "K", "t", "seed", "clairvoyant_term", "excess_term", "total_mse"];
pub const AGGREGATE_HEADER: [&str; 8] =
    ["policy", "K", "t", "n_seeds", "mean_mse", "stderr_mse", "rmse", "rmse_stderr"];
const PARTIAL_HEADER: [&str; 4] = ["policy", "t", "clairvoyant_term", "excess_term"];
const PARTIAL_DIR: &str = "partial";
const FINGERPRINT_FILE: &str = "fingerprint.txt";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSummary {
    pub files: Vec<PathBuf>,
    pub units_computed: usize,
    pub units_reused: usize,
}

struct KPlan {
    k: usize,
    ts: Vec<usize>,
    plans: Vec<(String, PolicyPlan)>,
}

/// One `(policy, t)` cell of a unit.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    clairvoyant: f64,
    excess: f64,
}

type UnitRecords = HashMap<(String, usize), Cell>;

#[derive(Default)]
struct Tuned {
    pew: BTreeMap<usize, crowdfuse_core::evaluation::PewTuning>,
    em: BTreeMap<usize, Vec<(usize, crowdfuse_core::evaluation::EmTuning)>>,
}

fn resolve_policy(cfg: &ExperimentConfig, spec: &PolicySpec, k: usize, ts: &[usize], tuned: &mut Tuned) -> Result<PolicyPlan> {
    let v = cfg.dgp.outcome_var;
    let named = |n: &str| matches!(&spec.hyperparams, Some(HyperparamSpec::Named(s)) if s == n);
    Ok(match spec.kind {
        PolicyKind::Averaging => PolicyPlan::Fixed(Policy::Averaging),
        PolicyKind::Clairvoyant => PolicyPlan::Fixed(Policy::Clairvoyant),
        PolicyKind::OnlySkills => PolicyPlan::Fixed(Policy::OnlySkills),
        PolicyKind::Pew => {
            let hp = match &spec.hyperparams {
                Some(HyperparamSpec::Pew(p)) => PewHyperparams::with_defaults(k, p.lambda, p.rho, p.lambda_ell, p.r),
                _ if named("tuned") => {
                    if let Entry::Vacant(e) = tuned.pew.entry(k) {
                        e.insert(tune_pew_at(cfg, k)?);
                    }
                    tuned.pew[&k].hyperparams
                }
                _ => PewHyperparams::tuned_reference(k)
                    .ok_or_else(|| cfg.error(format!("no published PEW hyperparameters for K = {k}")))?,
            };
            PolicyPlan::Fixed(Policy::Pew(PewHyperparams { outcome_var: v, ..hp }))
        }
        PolicyKind::Em => match &spec.hyperparams {
            Some(HyperparamSpec::Em(p)) => PolicyPlan::Fixed(Policy::Em(EmHyperparams::new(p.sigma_bar_sq, p.rho_bar, p.c))),
            _ => {
                if let Entry::Vacant(e) = tuned.em.entry(k) {
                    e.insert(ts.iter().map(|&t| Ok((t, tune_em_at(cfg, k, t)?))).collect::<Result<Vec<_>>>()?);
                }
                PolicyPlan::PerRounds(tuned.em[&k].iter().map(|(t, r)| (*t, Policy::Em(r.hyperparams))).collect())
            }
        },
    })
}

fn unit_path(dir: &Path, k: usize, i: usize) -> PathBuf {
    dir.join(format!("K{k}_s{i}.csv"))
}

fn write_unit(path: &Path, records: &[crowdfuse_core::evaluation::GridRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.policy.clone(),
                r.t.to_string(),
                fmt_f64(r.sample.clairvoyant_term),
                fmt_f64(r.sample.excess_term),
            ]
        })
        .collect();
    write_csv(path, &[], &PARTIAL_HEADER, &rows)
}

fn read_unit(path: &Path, plan: &KPlan) -> Result<UnitRecords> {
    let mut out = UnitRecords::new();
    for row in read_csv(path, &PARTIAL_HEADER)? {
        let t: usize = row[1].parse()?;
        let cell = Cell {
            clairvoyant: row[2].parse()?,
            excess: row[3].parse()?,
        };
        out.insert((row[0].clone(), t), cell);
    }
    let complete = plan
        .plans
        .iter()
        .all(|(name, _)| plan.ts.iter().all(|t| out.contains_key(&(name.clone(), *t))));
    if !complete || out.len() != plan.plans.len() * plan.ts.len() {
        bail!("{} does not match the configured grid; delete it and resume", path.display());
    }
    Ok(out)
}

pub fn run_sweep(cfg: &ExperimentConfig, opts: SweepOptions) -> Result<SweepSummary> {
    if cfg.policies.is_empty() {
        return Err(cfg.error("sweep needs at least one [[policies]] entry").into());
    }
    cfg.require_k_values()?;
    if cfg.t_values.is_empty() {
        return Err(cfg.error("sweep needs a non-empty `t_values`").into());
    }
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut tuned = Tuned::default();
    let mut kplans = Vec::new();
    for &k in &cfg.k_values {
        let ts = cfg.rounds_for(k, &cfg.t_values);
        let plans = cfg
            .policies
            .iter()
            .map(|spec| Ok((policy_name(spec), resolve_policy(cfg, spec, k, &ts, &mut tuned)?)))
            .collect::<Result<Vec<_>>>()?;
        kplans.push(KPlan { k, ts, plans });
    }
    let mut files = Vec::new();
    if !tuned.pew.is_empty() {
        files.extend(write_pew(out_dir, &tuned.pew.into_iter().collect::<Vec<_>>())?);
    }
    if !tuned.em.is_empty() {
        files.extend(write_em(out_dir, &tuned.em.into_iter().collect::<Vec<_>>())?);
    }

    let described: Vec<(usize, Vec<(String, String)>)> = kplans
        .iter()
        .map(|kp| (kp.k, kp.plans.iter().map(|(n, p)| (n.clone(), format!("{p:?}"))).collect()))
        .collect();
    let print = fingerprint(cfg, &described);
    let partial = out_dir.join(PARTIAL_DIR);
    let print_path = partial.join(FINGERPRINT_FILE);
    if opts.resume && print_path.exists() {
        let previous = fs::read_to_string(&print_path)?;
        if previous != print {
            return Err(cfg
                .error(format!(
                    "--resume: {} was written by a different configuration or seed; rerun without --resume",
                    partial.display()
                ))
                .into());
        }
    } else if partial.exists() {
        fs::remove_dir_all(&partial).with_context(|| format!("clearing {}", partial.display()))?;
    }
    fs::create_dir_all(&partial)?;
    write_atomic(&print_path, print.as_bytes())?;

    let units: Vec<(usize, usize)> =
        (0..kplans.len()).flat_map(|ki| (0..cfg.seeds).map(move |si| (ki, si))).collect();
    let seeds: Vec<Vec<u64>> = kplans.iter().map(|kp| replicate_seeds(cfg.master_seed, kp.k, cfg.seeds)).collect();
    let outcomes = units
        .par_iter()
        .map(|&(ki, si)| -> Result<(UnitRecords, bool)> {
            let kp = &kplans[ki];
            let path = unit_path(&partial, kp.k, si);
            if opts.resume && path.exists() {
                return Ok((read_unit(&path, kp)?, true));
            }
            let dgp = cfg.dgp_for(kp.k);
            let records = evaluate_replicate(&kp.plans, &dgp, &kp.ts, seeds[ki][si])
                .with_context(|| format!("K = {}, replicate {si}", kp.k))?;
            write_unit(&path, &records)?;
            info!("finished K = {}, replicate {si}", kp.k);
            let map = records
                .into_iter()
                .map(|r| {
                    let cell = Cell {
                        clairvoyant: r.sample.clairvoyant_term,
                        excess: r.sample.excess_term,
                    };
                    ((r.policy, r.t), cell)
                })
                .collect();
            Ok((map, false))
        })
        .collect::<Result<Vec<_>>>()?;
    let units_reused = outcomes.iter().filter(|(_, reused)| *reused).count();
    let units_computed = outcomes.len() - units_reused;

    let mut aggregate = Vec::new();
    for (ki, kp) in kplans.iter().enumerate() {
        let unit = |si: usize| &outcomes[ki * cfg.seeds + si].0;
        for (name, _) in &kp.plans {
            let mut rows = Vec::new();
            for &t in &kp.ts {
                let mut totals = Vec::with_capacity(cfg.seeds);
                for si in 0..cfg.seeds {
                    let c = unit(si)[&(name.clone(), t)];
                    // Same sum as `MseSample::total`.
                    let total = c.clairvoyant + c.excess;
                    totals.push(total);
                    rows.push(vec![
                        name.clone(),
                        kp.k.to_string(),
                        t.to_string(),
                        si.to_string(),
                        fmt_f64(c.clairvoyant),
                        fmt_f64(c.excess),
                        fmt_f64(total),
                    ]);
                }
                let (mean, se) = mean_stderr(&totals);
                let rmse = mean.sqrt();
                // Delta method: se(√m) ≈ se(m) / (2√m).
                let rmse_se = if rmse > 0.0 { se / (2.0 * rmse) } else { 0.0 };
                aggregate.push(vec![
                    name.clone(),
                    kp.k.to_string(),
                    t.to_string(),
                    cfg.seeds.to_string(),
                    fmt_f64(mean),
                    fmt_f64(se),
                    fmt_f64(rmse),
                    fmt_f64(rmse_se),
                ]);
            }
            let p = out_dir.join(format!("results_{name}_K{}.csv", kp.k));
            write_csv(&p, &[], &RESULTS_HEADER, &rows)?;
            files.push(p);
        }
    }
    let p = out_dir.join("aggregate.csv");
    write_csv(&p, &[], &AGGREGATE_HEADER, &aggregate)?;
    files.push(p);
    Ok(SweepSummary {
        files,
        units_computed,
        units_reused,
    })
}
