//! Property tests over randomly generated covariances and histories.

use crowdfuse_core::evaluation::{mse_closed_form, ssl_quality_metric, SslQuality};
use crowdfuse_core::linalg::{precision_from_regression_params, regression_params_from_cov, PdMatrix, SslModelSet};
use crowdfuse_core::policies::{
    blr_fit, blr_loss, clairvoyant_weights, em_fit_traced, fit_ssl_models, pew_weights, AggregationWeights,
    EmHyperparams, PewHyperparams, SufficientStats,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `A Aᵀ + δI` from a flat list of entries.
fn pd_from(k: usize, entries: &[f64], ridge: f64) -> PdMatrix {
    let a = DMatrix::from_iterator(k, k, entries.iter().copied());
    PdMatrix::from_matrix(&a * a.transpose() + DMatrix::identity(k, k) * ridge).unwrap()
}

fn pd_strategy() -> impl Strategy<Value = PdMatrix> {
    (2usize..12).prop_flat_map(|k| {
        (prop::collection::vec(-2.0f64..2.0, k * k), 0.05f64..2.0).prop_map(move |(e, r)| pd_from(k, &e, r))
    })
}

fn prescient(s: &PdMatrix) -> SslModelSet {
    SslModelSet::new((0..s.dim()).map(|k| regression_params_from_cov(s, k).unwrap()).collect()).unwrap()
}

fn with_ones(sigma: &PdMatrix, v: f64) -> PdMatrix {
    let k = sigma.dim();
    PdMatrix::from_matrix(sigma.matrix() + DMatrix::from_element(k, k, v)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regression_params_reconstruct_precision(s in pd_strategy()) {
        let p = precision_from_regression_params(&prescient(&s)).unwrap();
        let inv = s.inverse();
        let scale = inv.amax().max(1.0);
        prop_assert!((p - inv).amax() <= 1e-8 * scale);
    }

    #[test]
    fn prescient_pew_is_clairvoyant(sigma in pd_strategy(), v in 0.1f64..4.0) {
        let a = pew_weights(&prescient(&with_ones(&sigma, v)), v).unwrap();
        let b = clairvoyant_weights(&sigma, v).unwrap();
        prop_assert!((a.as_vector() - b.as_vector()).amax() <= 1e-8);
    }

    #[test]
    fn mse_is_at_least_clairvoyant(sigma in pd_strategy(), v in 0.1f64..4.0, seed in any::<u64>()) {
        let k = sigma.dim();
        let mut x = seed;
        let w = DVector::from_fn(k, |_, _| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let m = mse_closed_form(&sigma, &AggregationWeights::new(w).unwrap(), v).unwrap();
        prop_assert!(m.excess_term >= 0.0);
        let best = mse_closed_form(&sigma, &clairvoyant_weights(&sigma, v).unwrap(), v).unwrap();
        prop_assert!(best.excess_term <= 1e-10);
        prop_assert!((best.clairvoyant_term - m.clairvoyant_term).abs() <= 1e-12 * m.clairvoyant_term.max(1.0));
    }

    #[test]
    fn prescient_models_have_zero_divergence(sigma in pd_strategy(), v in 0.1f64..4.0) {
        let q = ssl_quality_metric(&prescient(&with_ones(&sigma, v)), &sigma, v).unwrap();
        prop_assert!(q.value().abs() <= 1e-7, "{:?}", q);
    }

    #[test]
    fn fitted_models_have_nonnegative_divergence(
        sigma in pd_strategy(),
        lambda in 0.5f64..20.0,
        rho in 0.0f64..0.8,
        rows in 0usize..60,
        fill in prop::collection::vec(-3.0f64..3.0, 60 * 12),
    ) {
        let k = sigma.dim();
        let y = DMatrix::from_iterator(rows, k, fill.into_iter().take(rows * k));
        let hp = PewHyperparams::with_defaults(k, lambda, rho, 2.0, 10.0);
        let models = fit_ssl_models(&SufficientStats::from_rows(&y), &hp).unwrap();
        match ssl_quality_metric(&models, &sigma, 1.0).unwrap() {
            SslQuality::Valid(v) => prop_assert!(v >= -1e-9),
            SslQuality::InvalidModel => {}
        }
    }

    #[test]
    fn blr_closed_form_is_stationary(
        k in 2usize..8,
        rows in 0usize..40,
        fill in prop::collection::vec(-3.0f64..3.0, 40 * 8),
        lambda in 0.5f64..10.0,
        rho in 0.0f64..0.8,
        shape in 0.0f64..6.0,
        w in 0usize..8,
    ) {
        let w = w % k;
        let y = DMatrix::from_iterator(rows, k, fill.into_iter().take(rows * k));
        let hp = PewHyperparams::with_defaults(k, lambda, rho, shape, 10.0);
        let fit = blr_fit(&SufficientStats::from_rows(&y), w, &hp).unwrap();
        let f = |u: &DVector<f64>, l: f64| blr_loss(&y, w, &hp, u, l);
        let base = f(fit.coeffs(), fit.residual_var());
        // The optimum is a minimum along every coordinate direction.
        for j in 0..k - 1 {
            for step in [-1e-3, 1e-3] {
                let mut u = fit.coeffs().clone();
                u[j] += step;
                prop_assert!(f(&u, fit.residual_var()) >= base - 1e-9 * base.abs().max(1.0));
            }
        }
        for factor in [0.99, 1.01] {
            prop_assert!(f(fit.coeffs(), fit.residual_var() * factor) >= base - 1e-9 * base.abs().max(1.0));
        }
    }

    #[test]
    fn em_bound_never_decreases(
        sigma in pd_strategy(),
        rows in 1usize..40,
        fill in prop::collection::vec(-3.0f64..3.0, 40 * 12),
        prior_var in prop::sample::select(vec![0.2, 2.0, 20.0]),
        corr in prop::sample::select(vec![0.0, 0.1]),
        c in prop::sample::select(vec![0.1, 1.0, 10.0]),
    ) {
        let k = sigma.dim();
        let y = DMatrix::from_iterator(rows, k, fill.into_iter().take(rows * k));
        let fit = em_fit_traced(&SufficientStats::from_rows(&y), &EmHyperparams::new(prior_var, corr, c), 1.0).unwrap();
        for pair in fit.elbo_trace.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-6 * pair[0].abs().max(1.0), "{} -> {}", pair[0], pair[1]);
        }
    }
}
