//! Metrics and experiment drivers: closed-form MSE of linear policies, paired
//! Monte Carlo replicates, the worker-matching search, the SSL-quality
//! metric, hyperparameter tuning and the out-of-sample surrogate.

mod matching;
mod mse;
mod replicate;
mod ssl_metric;
mod surrogate;
mod tuning;

pub use matching::{workers_to_match, MatchResult};
pub use mse::{
    estimate_policy_mse, evaluate_grid, evaluate_replicate, mse_closed_form, GridRecord, MseEstimate, MseSample,
    Policy, PolicyPlan,
};
pub use replicate::Replicate;
pub use ssl_metric::{
    covariance_from_models, estimate_outcome_variance, sample_covariance, ssl_quality_metric,
    train_test_ssl_score, SslQuality,
};
pub use surrogate::{surrogate_mse, surrogate_mse_paired, surrogate_squared_error, SurrogateEstimate};
pub use tuning::{
    tune_em, tune_pew, AuditRow, EmTuning, PewTuning, PewTuningSchedule, TuningGrid,
};

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
