use nalgebra::DVector;
use rayon::prelude::*;

use super::mean_stderr;
use super::replicate::Replicate;
use crate::datagen::DgpConfig;
use crate::error::{Error, Result};
use crate::linalg::PdMatrix;
use crate::policies::{
    averaging_weights, clairvoyant_weights, em_weights, only_skills_weights,
    pew_aggregation_weights, AggregationWeights, EmHyperparams, PewHyperparams, SufficientStats,
};

/// Conditional MSE of a linear rule given `Σ*`, split into the irreducible
/// clairvoyant part and the excess due to using `ν̂` instead of `ν*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseSample {
    pub seed: u64,
    /// `1 / (1/v̄ + 1ᵀΣ*⁻¹1)`.
    pub clairvoyant_term: f64,
    /// `(ν* − ν̂)ᵀ(Σ* + v̄11ᵀ)(ν* − ν̂)`.
    pub excess_term: f64,
}

impl MseSample {
    pub fn total(&self) -> f64 {
        self.clairvoyant_term + self.excess_term
    }
}

pub fn mse_closed_form(
    noise_cov: &PdMatrix,
    weights: &AggregationWeights,
    outcome_var: f64,
) -> Result<MseSample> {
    let k = noise_cov.dim();
    if weights.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: weights.len(),
        });
    }
    let ones = DVector::from_element(k, 1.0);
    let clairvoyant_term = 1.0 / (1.0 / outcome_var + noise_cov.inv_quad_form(&ones)?);
    let optimal = clairvoyant_weights(noise_cov, outcome_var)?;
    let d = optimal.as_vector() - weights.as_vector();
    let excess_term = (d.dot(&(noise_cov.matrix() * &d)) + outcome_var * d.sum().powi(2)).max(0.0);
    Ok(MseSample {
        seed: 0,
        clairvoyant_term,
        excess_term,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Averaging,
    Clairvoyant,
    OnlySkills,
    Pew(PewHyperparams),
    Em(EmHyperparams),
}

impl Policy {
    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Averaging => "averaging",
            Policy::Clairvoyant => "clairvoyant",
            Policy::OnlySkills => "only_skills",
            Policy::Pew(_) => "pew",
            Policy::Em(_) => "em",
        }
    }

    pub fn uses_history(&self) -> bool {
        matches!(self, Policy::Pew(_) | Policy::Em(_))
    }

    /// Weights for round `stats.rows() + 1`. `noise_cov` is only read by the
    /// clairvoyant policies.
    pub fn weights(
        &self,
        noise_cov: &PdMatrix,
        stats: &SufficientStats,
        outcome_var: f64,
    ) -> Result<AggregationWeights> {
        let k = noise_cov.dim();
        match self {
            Policy::Averaging => Ok(averaging_weights(k)),
            Policy::Clairvoyant => clairvoyant_weights(noise_cov, outcome_var),
            Policy::OnlySkills => {
                let d: Vec<f64> = noise_cov.matrix().diagonal().iter().copied().collect();
                only_skills_weights(&d, outcome_var)
            }
            Policy::Pew(hp) => pew_aggregation_weights(stats, hp),
            Policy::Em(hp) => em_weights(stats, hp, outcome_var),
        }
    }
}

/// A policy that may use different hyperparameters at different `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyPlan {
    Fixed(Policy),
    PerRounds(Vec<(usize, Policy)>),
}

impl PolicyPlan {
    pub fn at(&self, t: usize) -> Result<&Policy> {
        match self {
            PolicyPlan::Fixed(p) => Ok(p),
            PolicyPlan::PerRounds(list) => list
                .iter()
                .find(|(rounds, _)| *rounds == t)
                .map(|(_, p)| p)
                .ok_or_else(|| Error::InvalidParameter(format!("no policy configured for t = {t}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MseEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: Vec<MseSample>,
}

impl MseEstimate {
    pub fn from_samples(samples: Vec<MseSample>) -> Self {
        let totals: Vec<f64> = samples.iter().map(MseSample::total).collect();
        let (mean, stderr) = mean_stderr(&totals);
        Self { mean, stderr, samples }
    }
}

/// Mean closed-form MSE at round `t` over one replicate per seed. Replicates
/// are evaluated in parallel and returned in seed order.
pub fn estimate_policy_mse(
    policy: &Policy,
    cfg: &DgpConfig,
    t: usize,
    seeds: &[u64],
) -> Result<MseEstimate> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("empty seed list".into()));
    }
    if t == 0 {
        return Err(Error::InvalidParameter("t must be >= 1".into()));
    }
    let rows = if policy.uses_history() { t - 1 } else { 0 };
    let samples = seeds
        .par_iter()
        .map(|&seed| {
            let rep = Replicate::draw(cfg, seed, rows)?;
            let stats = rep.stats(rows)?;
            let w = policy.weights(&rep.noise_cov, &stats, cfg.outcome_var)?;
            Ok(MseSample {
                seed,
                ..mse_closed_form(&rep.noise_cov, &w, cfg.outcome_var)?
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MseEstimate::from_samples(samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRecord {
    pub policy: String,
    pub t: usize,
    pub sample: MseSample,
}

/// Evaluates every plan at every `t` on a single replicate for `seed`,
/// growing the sufficient statistics once across the sorted `t` values.
pub fn evaluate_replicate(
    plans: &[(String, PolicyPlan)],
    cfg: &DgpConfig,
    t_values: &[usize],
    seed: u64,
) -> Result<Vec<GridRecord>> {
    let mut ts: Vec<usize> = t_values.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if ts.first() == Some(&0) {
        return Err(Error::InvalidParameter("t must be >= 1".into()));
    }
    let max_rows = ts.last().map_or(0, |t| t - 1);
    let rep = Replicate::draw(cfg, seed, max_rows)?;
    let mut stats = SufficientStats::new(cfg.num_workers);
    let mut out = Vec::with_capacity(plans.len() * ts.len());
    for &t in &ts {
        let done = stats.rows();
        stats.extend(rep.history.estimates(), done, t - 1)?;
        for (name, plan) in plans {
            let w = plan.at(t)?.weights(&rep.noise_cov, &stats, cfg.outcome_var)?;
            out.push(GridRecord {
                policy: name.clone(),
                t,
                sample: MseSample {
                    seed,
                    ..mse_closed_form(&rep.noise_cov, &w, cfg.outcome_var)?
                },
            });
        }
    }
    Ok(out)
}

/// [`evaluate_replicate`] over all seeds, in parallel, results in seed order.
pub fn evaluate_grid(
    plans: &[(String, PolicyPlan)],
    cfg: &DgpConfig,
    t_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<GridRecord>> {
    let per_seed = seeds
        .par_iter()
        .map(|&seed| evaluate_replicate(plans, cfg, t_values, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_pd;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_i(k: usize) -> PdMatrix {
        PdMatrix::from_matrix(DMatrix::identity(k, k) * 2.0).unwrap()
    }

    #[test]
    fn optimal_weights_have_no_excess() {
        let s = two_i(10);
        let w = clairvoyant_weights(&s, 1.0).unwrap();
        let m = mse_closed_form(&s, &w, 1.0).unwrap();
        assert!(m.excess_term < 1e-15);
        assert!((m.clairvoyant_term - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn averaging_with_isotropic_noise() {
        let s = two_i(10);
        let m = mse_closed_form(&s, &averaging_weights(10), 1.0).unwrap();
        assert!((m.excess_term - 120.0 / 3600.0).abs() < 1e-14);
        assert!((m.total() - 0.2).abs() < 1e-14);
        // Direct route: averaging error is the mean noise, variance 1ᵀΣ*1/K².
        let direct = s.matrix().sum() / 100.0;
        assert!((m.total() - direct).abs() < 1e-14);
    }

    #[test]
    fn total_never_below_clairvoyant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_pd(6, &mut rng);
            let w = AggregationWeights::new(DVector::from_fn(6, |_, _| rng.random::<f64>() * 0.4)).unwrap();
            let m = mse_closed_form(&s, &w, 1.0).unwrap();
            assert!(m.total() >= m.clairvoyant_term);
        }
    }

    /// Every coordinate perturbation of ν* increases the closed-form MSE.
    #[test]
    fn clairvoyant_is_a_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_pd(5, &mut rng);
        let opt = clairvoyant_weights(&s, 1.0).unwrap();
        let base = mse_closed_form(&s, &opt, 1.0).unwrap().total();
        for k in 0..5 {
            for delta in [1e-3, -1e-3] {
                let mut v = opt.as_vector().clone();
                v[k] += delta;
                let m = mse_closed_form(&s, &AggregationWeights::new(v).unwrap(), 1.0).unwrap();
                assert!(m.total() > base);
            }
        }
    }

    #[test]
    fn matches_simulated_squared_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_pd(4, &mut rng);
        let w = AggregationWeights::new(DVector::from_vec(vec![0.1, 0.3, -0.05, 0.2])).unwrap();
        let exact = mse_closed_form(&s, &w, 1.0).unwrap().total();
        let n = 1_000_000;
        let errs: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let noise = crate::linalg::sample_mvn_zero_mean(&s, &mut rng);
                let y: Vec<f64> = noise.iter().map(|e| z + e).collect();
                (z - w.apply(&y).unwrap()).powi(2)
            })
            .collect();
        let (mean, se) = mean_stderr(&errs);
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn only_skills_is_worse_for_correlated_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s = random_pd(10, &mut rng);
            let d: Vec<f64> = s.matrix().diagonal().iter().copied().collect();
            let a = mse_closed_form(&s, &only_skills_weights(&d, 1.0).unwrap(), 1.0).unwrap();
            let b = mse_closed_form(&s, &clairvoyant_weights(&s, 1.0).unwrap(), 1.0).unwrap();
            assert!(a.total() > b.total());
        }
    }

    #[test]
    fn clairvoyant_policy_has_zero_excess() {
        let cfg = DgpConfig { num_factors: 100, ..DgpConfig::new(6) };
        let est = estimate_policy_mse(&Policy::Clairvoyant, &cfg, 5, &[1, 2, 3]).unwrap();
        assert!(est.samples.iter().all(|s| s.excess_term < 1e-14));
        assert_eq!(est.samples.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(estimate_policy_mse(&Policy::Clairvoyant, &cfg, 5, &[]).is_err());
    }

    #[test]
    fn grid_matches_single_policy_estimates() {
        let cfg = DgpConfig { num_factors: 200, ..DgpConfig::new(5) };
        let hp = PewHyperparams::with_defaults(5, 4.0, 0.2, 0.0, 10.0);
        let plans = vec![
            ("avg".to_string(), PolicyPlan::Fixed(Policy::Averaging)),
            ("pew".to_string(), PolicyPlan::Fixed(Policy::Pew(hp))),
        ];
        let seeds = [10, 11];
        let records = evaluate_grid(&plans, &cfg, &[40, 1, 5], &seeds).unwrap();
        assert_eq!(records.len(), 2 * 3 * 2);
        let single = estimate_policy_mse(&Policy::Pew(hp), &cfg, 40, &seeds).unwrap();
        for s in &single.samples {
            let r = records
                .iter()
                .find(|r| r.policy == "pew" && r.t == 40 && r.sample.seed == s.seed)
                .unwrap();
            assert!((r.sample.total() - s.total()).abs() < 1e-12);
        }
    }

    #[test]
    fn per_rounds_plan_lookup() {
        let plan = PolicyPlan::PerRounds(vec![(1, Policy::Averaging), (10, Policy::Clairvoyant)]);
        assert_eq!(plan.at(10).unwrap(), &Policy::Clairvoyant);
        assert!(plan.at(5).is_err());
    }
}
