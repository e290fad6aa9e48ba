//! Experiment configuration files.
//!
//! Configs are TOML. Semantic checks run after parsing and point at the line
//! of the offending key where it is known.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crowdfuse_core::datagen::DgpConfig;
use crowdfuse_core::evaluation::{PewTuningSchedule, TuningGrid};
use crowdfuse_core::policies::{EmHyperparams, PewHyperparams};
use serde::Deserialize;
use toml::Spanned;

/// Environment variable that overrides `master_seed`.
pub const SEED_ENV: &str = "CROWDFUSE_SEED";

/// Seed counts the reference study used for evaluation and tuning.
pub const FULL_SEEDS: usize = 50;
pub const FULL_TUNING_SEEDS: usize = 60;

/// An invalid or unreadable config, with the location of the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
            if let Some(col) = self.column {
                write!(f, ":{col}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// A round count, either absolute (`100`) or a multiple of the worker count
/// (`"K"`, `"10K"`, `"2.5K"`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum TValue {
    Rounds(usize),
    Relative(String),
}

impl TValue {
    pub fn resolve(&self, k: usize) -> Result<usize, String> {
        let t = match self {
            TValue::Rounds(t) => *t,
            TValue::Relative(s) => {
                let s = s.trim();
                match s.strip_suffix('K') {
                    Some(m) => {
                        let m: f64 = if m.is_empty() {
                            1.0
                        } else {
                            m.trim().parse().map_err(|_| format!("bad t multiple {s:?}"))?
                        };
                        let t = m * k as f64;
                        if !(t.is_finite() && t >= 0.0 && (t - t.round()).abs() < 1e-9) {
                            return Err(format!("{s:?} is not a whole number of rounds at K = {k}"));
                        }
                        t.round() as usize
                    }
                    None => s.parse().map_err(|_| format!("bad t value {s:?}; use an integer or a K multiple like \"10K\""))?,
                }
            }
        };
        if t == 0 {
            return Err(format!("t must be >= 1 (got {self:?} at K = {k})"));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Averaging,
    Clairvoyant,
    OnlySkills,
    Pew,
    Em,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Averaging => "averaging",
            PolicyKind::Clairvoyant => "clairvoyant",
            PolicyKind::OnlySkills => "only_skills",
            PolicyKind::Pew => "pew",
            PolicyKind::Em => "em",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PewParams {
    pub lambda: f64,
    pub rho: f64,
    pub lambda_ell: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmParams {
    pub sigma_bar_sq: f64,
    pub rho_bar: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum HyperparamSpec {
    /// `"reference"` (published values) or `"tuned"` (run the search first).
    Named(String),
    Pew(PewParams),
    Em(EmParams),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub name: Option<String>,
    pub hyperparams: Option<HyperparamSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSection {
    pub num_factors: usize,
    pub decay: f64,
    pub outcome_var: f64,
}

impl Default for DgpSection {
    fn default() -> Self {
        let d = DgpConfig::new(1);
        Self {
            num_factors: d.num_factors,
            decay: d.decay,
            outcome_var: d.outcome_var,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneTarget {
    Pew,
    Em,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    pub policy: Option<TuneTarget>,
    /// EM rounds to tune at; defaults to the top-level `t_values`.
    pub t_values: Option<Vec<TValue>>,
    pub lambda: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub lambda_ell: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub sigma_bar_sq: Option<Vec<f64>>,
    pub rho_bar: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
    pub ssl_rounds: Option<Vec<TValue>>,
    pub ssl_target: Option<TValue>,
    pub agg_rounds: Option<Vec<TValue>>,
    pub agg_target: Option<TValue>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig2Section {
    pub baseline_k: Vec<usize>,
    pub policies: Vec<PolicyKind>,
}

impl Default for Fig2Section {
    fn default() -> Self {
        Self {
            baseline_k: vec![20, 40, 60, 80, 100],
            policies: vec![PolicyKind::Clairvoyant, PolicyKind::OnlySkills],
        }
    }
}

fn default_master_seed() -> u64 {
    20_231_115
}

fn unspanned<T: Default>() -> Spanned<T> {
    Spanned::new(0..0, T::default())
}

fn default_seeds() -> Spanned<usize> {
    Spanned::new(0..0, 25)
}

fn default_tuning_seeds() -> Spanned<usize> {
    Spanned::new(0..0, 15)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_master_seed")]
    master_seed: u64,
    output_dir: Option<PathBuf>,
    #[serde(default = "unspanned")]
    dgp: Spanned<DgpSection>,
    #[serde(default = "unspanned")]
    k_values: Spanned<Vec<usize>>,
    #[serde(default = "unspanned")]
    t_values: Spanned<Vec<TValue>>,
    #[serde(default = "default_seeds")]
    seeds: Spanned<usize>,
    #[serde(default = "default_tuning_seeds")]
    tuning_seeds: Spanned<usize>,
    #[serde(default)]
    policies: Vec<Spanned<PolicySpec>>,
    tune: Option<Spanned<TuneSection>>,
    #[serde(default = "unspanned")]
    fig2: Spanned<Fig2Section>,
}

/// A parsed and validated experiment config.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// File the config was read from.
    pub source: PathBuf,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dgp: DgpSection,
    pub k_values: Vec<usize>,
    pub t_values: Vec<TValue>,
    pub seeds: usize,
    pub tuning_seeds: usize,
    pub policies: Vec<PolicySpec>,
    pub tune: TuneSection,
    pub fig2: Fig2Section,
}

/// Maps byte offsets in the source to 1-based line/column.
struct Locator<'a> {
    path: &'a Path,
    src: &'a str,
}

impl Locator<'_> {
    fn err(&self, span: Option<Range<usize>>, message: impl Into<String>) -> ConfigError {
        let (line, column) = match span {
            Some(s) if s.end > 0 || s.start > 0 => {
                let start = s.start.min(self.src.len());
                let before = &self.src[..start];
                let line = before.matches('\n').count() + 1;
                let col = start - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (Some(line), Some(col))
            }
            _ => (None, None),
        };
        ConfigError {
            path: self.path.to_path_buf(),
            line,
            column,
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            column: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&src, path)
    }

    /// Parses `src`; `path` is only used in diagnostics and to resolve a
    /// relative `output_dir`.
    pub fn parse(src: &str, path: &Path) -> Result<Self, ConfigError> {
        let loc = Locator { path, src };
        let raw: RawConfig = toml::from_str(src).map_err(|e| loc.err(e.span(), e.message().to_string()))?;

        let output_dir = match raw.output_dir {
            Some(d) if d.is_relative() => path.parent().map_or(d.clone(), |p| p.join(&d)),
            Some(d) => d,
            None => return Err(loc.err(None, "missing required key `output_dir`")),
        };

        let dgp = *raw.dgp.get_ref();
        let probe = DgpConfig {
            num_factors: dgp.num_factors,
            decay: dgp.decay,
            num_workers: 1,
            outcome_var: dgp.outcome_var,
        };
        probe.validate().map_err(|e| loc.err(Some(raw.dgp.span()), format!("[dgp]: {e}")))?;

        let k_given = raw.k_values.span() != (0..0);
        if k_given && raw.k_values.get_ref().is_empty() {
            return Err(loc.err(Some(raw.k_values.span()), "`k_values` must be a non-empty list"));
        }
        if raw.k_values.get_ref().contains(&0) {
            return Err(loc.err(Some(raw.k_values.span()), "`k_values` entries must be >= 1"));
        }
        let mut seen = BTreeSet::new();
        for k in raw.k_values.get_ref() {
            if !seen.insert(*k) {
                return Err(loc.err(Some(raw.k_values.span()), format!("duplicate K = {k} in `k_values`")));
            }
        }
        for &k in raw.k_values.get_ref() {
            for t in raw.t_values.get_ref() {
                t.resolve(k).map_err(|m| loc.err(Some(raw.t_values.span()), format!("`t_values`: {m}")))?;
            }
        }
        if *raw.seeds.get_ref() == 0 {
            return Err(loc.err(Some(raw.seeds.span()), "`seeds` must be >= 1"));
        }
        if *raw.tuning_seeds.get_ref() == 0 {
            return Err(loc.err(Some(raw.tuning_seeds.span()), "`tuning_seeds` must be >= 1"));
        }

        let mut names = BTreeSet::new();
        let mut policies = Vec::with_capacity(raw.policies.len());
        for p in &raw.policies {
            let spec = p.get_ref().clone();
            let at = |m: String| loc.err(Some(p.span()), m);
            check_policy(&spec, raw.k_values.get_ref()).map_err(at)?;
            let name = policy_name(&spec);
            if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') || name.is_empty() {
                return Err(at(format!("policy name {name:?} may only contain letters, digits, '_' and '-'")));
            }
            if !names.insert(name.clone()) {
                return Err(at(format!("duplicate policy name {name:?}; set `name` to tell them apart")));
            }
            policies.push(spec);
        }

        let tune = match &raw.tune {
            Some(t) => {
                let sec = t.get_ref().clone();
                check_tune(&sec, raw.k_values.get_ref()).map_err(|m| loc.err(Some(t.span()), format!("[tune]: {m}")))?;
                sec
            }
            None => TuneSection::default(),
        };

        let fig2 = raw.fig2.get_ref().clone();
        let fig2_err = |m: &str| loc.err(Some(raw.fig2.span()), format!("[fig2]: {m}"));
        if fig2.baseline_k.is_empty() || fig2.baseline_k.contains(&0) {
            return Err(fig2_err("`baseline_k` must be a non-empty list of positive integers"));
        }
        if fig2.policies.is_empty() {
            return Err(fig2_err("`policies` must be non-empty"));
        }
        if fig2.policies.iter().any(|p| matches!(p, PolicyKind::Pew | PolicyKind::Em)) {
            return Err(fig2_err("matching supports history-free policies only (averaging, clairvoyant, only_skills)"));
        }

        Ok(Self {
            source: path.to_path_buf(),
            master_seed: raw.master_seed,
            output_dir,
            dgp,
            k_values: raw.k_values.into_inner(),
            t_values: raw.t_values.into_inner(),
            seeds: raw.seeds.into_inner(),
            tuning_seeds: raw.tuning_seeds.into_inner(),
            policies,
            tune,
            fig2,
        })
    }

    /// Applies `CROWDFUSE_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.master_seed = v.trim().parse().map_err(|_| ConfigError {
                path: PathBuf::from(format!("${SEED_ENV}")),
                line: None,
                column: None,
                message: format!("expected an unsigned integer seed, got {v:?}"),
            })?;
        }
        Ok(())
    }

    /// A config problem found only once a command knows what it needs.
    pub fn error(&self, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.source.clone(),
            line: None,
            column: None,
            message: message.into(),
        }
    }

    pub fn use_full_seed_counts(&mut self) {
        self.seeds = FULL_SEEDS;
        self.tuning_seeds = FULL_TUNING_SEEDS;
    }

    pub fn dgp_for(&self, k: usize) -> DgpConfig {
        DgpConfig {
            num_factors: self.dgp.num_factors,
            decay: self.dgp.decay,
            num_workers: k,
            outcome_var: self.dgp.outcome_var,
        }
    }

    /// `k_values`, which sweeps and tuning runs require.
    pub fn require_k_values(&self) -> Result<&[usize], ConfigError> {
        if self.k_values.is_empty() {
            Err(self.error("missing required key `k_values`"))
        } else {
            Ok(&self.k_values)
        }
    }

    /// Sorted, de-duplicated round counts at `k`.
    pub fn rounds_for(&self, k: usize, values: &[TValue]) -> Vec<usize> {
        let mut ts: Vec<usize> = values.iter().map(|t| t.resolve(k).expect("validated")).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    pub fn tuning_grid(&self, k: usize) -> TuningGrid {
        let base = TuningGrid::reference(k);
        let t = &self.tune;
        let pick = |o: &Option<Vec<f64>>, d: Vec<f64>| o.clone().unwrap_or(d);
        TuningGrid {
            lambdas: pick(&t.lambda, base.lambdas),
            rhos: pick(&t.rho, base.rhos),
            ig_shapes: pick(&t.lambda_ell, base.ig_shapes),
            reg_decays: pick(&t.r, base.reg_decays),
            em_prior_vars: pick(&t.sigma_bar_sq, base.em_prior_vars),
            em_prior_corrs: pick(&t.rho_bar, base.em_prior_corrs),
            em_concentrations: pick(&t.c, base.em_concentrations),
        }
    }

    pub fn tuning_schedule(&self, k: usize) -> PewTuningSchedule {
        let base = PewTuningSchedule::reference(k);
        let t = &self.tune;
        let list = |o: &Option<Vec<TValue>>, d: Vec<usize>| o.as_ref().map_or(d, |v| self.rounds_for(k, v));
        let one = |o: &Option<TValue>, d: usize| o.as_ref().map_or(d, |v| v.resolve(k).expect("validated"));
        PewTuningSchedule {
            ssl_rounds: list(&t.ssl_rounds, base.ssl_rounds),
            ssl_target: one(&t.ssl_target, base.ssl_target),
            agg_rounds: list(&t.agg_rounds, base.agg_rounds),
            agg_target: one(&t.agg_target, base.agg_target),
        }
    }

    /// EM tuning rounds at `k`.
    pub fn em_tuning_rounds(&self, k: usize) -> Vec<usize> {
        self.rounds_for(k, self.tune.t_values.as_deref().unwrap_or(&self.t_values))
    }
}

pub fn policy_name(spec: &PolicySpec) -> String {
    spec.name.clone().unwrap_or_else(|| spec.kind.as_str().to_string())
}

fn check_policy(spec: &PolicySpec, k_values: &[usize]) -> Result<(), String> {
    let kind = spec.kind.as_str();
    match (spec.kind, &spec.hyperparams) {
        (PolicyKind::Averaging | PolicyKind::Clairvoyant | PolicyKind::OnlySkills, None) => Ok(()),
        (PolicyKind::Averaging | PolicyKind::Clairvoyant | PolicyKind::OnlySkills, Some(_)) => {
            Err(format!("policy `{kind}` takes no hyperparameters"))
        }
        (PolicyKind::Pew, None) => check_policy(
            &PolicySpec {
                hyperparams: Some(HyperparamSpec::Named("reference".into())),
                ..spec.clone()
            },
            k_values,
        ),
        (PolicyKind::Em, None) => Ok(()),
        (_, Some(HyperparamSpec::Named(n))) => match (spec.kind, n.as_str()) {
            (_, "tuned") => Ok(()),
            (PolicyKind::Pew, "reference") => match k_values.iter().find(|&&k| PewHyperparams::tuned_reference(k).is_none()) {
                Some(k) => Err(format!("no published PEW hyperparameters for K = {k}; use \"tuned\" or inline values")),
                None => Ok(()),
            },
            _ => Err(format!(
                "unknown hyperparameters {n:?} for `{kind}`; expected \"tuned\"{}, or an inline table",
                if spec.kind == PolicyKind::Pew { ", \"reference\"" } else { "" }
            )),
        },
        (PolicyKind::Pew, Some(HyperparamSpec::Pew(p))) => {
            let hp = PewHyperparams::with_defaults(1, p.lambda, p.rho, p.lambda_ell, p.r);
            hp.validate().map_err(|e| format!("pew hyperparameters: {e}"))
        }
        (PolicyKind::Em, Some(HyperparamSpec::Em(p))) => EmHyperparams::new(p.sigma_bar_sq, p.rho_bar, p.c)
            .validate()
            .map_err(|e| format!("em hyperparameters: {e}")),
        (_, Some(_)) => Err(format!(
            "hyperparameter keys do not match policy `{kind}` (pew: lambda, rho, lambda_ell, r; em: sigma_bar_sq, rho_bar, c)"
        )),
    }
}

fn check_tune(sec: &TuneSection, k_values: &[usize]) -> Result<(), String> {
    for (name, v) in [
        ("lambda", &sec.lambda),
        ("rho", &sec.rho),
        ("lambda_ell", &sec.lambda_ell),
        ("r", &sec.r),
        ("sigma_bar_sq", &sec.sigma_bar_sq),
        ("rho_bar", &sec.rho_bar),
        ("c", &sec.c),
    ] {
        if let Some(v) = v {
            if v.is_empty() {
                return Err(format!("`{name}` must be non-empty"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format!("`{name}` must be finite"));
            }
        }
    }
    for &k in k_values {
        for list in [&sec.t_values, &sec.ssl_rounds, &sec.agg_rounds].into_iter().flatten() {
            for t in list {
                t.resolve(k)?;
            }
        }
        for t in [&sec.ssl_target, &sec.agg_target].into_iter().flatten() {
            t.resolve(k)?;
        }
    }
    Ok(())
}

/// Canonical text of everything that determines sweep output.
pub fn fingerprint(cfg: &ExperimentConfig, plans: &[(usize, Vec<(String, String)>)]) -> String {
    let mut s = format!(
        "master_seed={}\ndgp={:?}\nseeds={}\ntuning_seeds={}\n",
        cfg.master_seed, cfg.dgp, cfg.seeds, cfg.tuning_seeds
    );
    for (k, ps) in plans {
        s.push_str(&format!("K={k} t={:?}\n", cfg.rounds_for(*k, &cfg.t_values)));
        for (name, plan) in ps {
            s.push_str(&format!("  {name}: {plan}\n"));
        }
    }
    s
}
