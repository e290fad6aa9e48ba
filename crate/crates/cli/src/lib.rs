//! Experiment harness: config loading, sweeps, tuning, worker matching and
//! the self-test, each writing versioned CSV tables.

pub mod config;
pub mod fig2;
pub mod output;
pub mod selftest;
pub mod sweep;
pub mod tune;

use anyhow::Result;

pub use config::{ConfigError, ExperimentConfig};

/// Process exit code for an invalid config or command line.
pub const EXIT_CONFIG: u8 = 2;
/// Process exit code for a failure while running.
pub const EXIT_RUNTIME: u8 = 1;

/// Exit code for an error returned by one of the commands.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Runs `f` on a thread pool with `jobs` workers (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    pool.install(f)
}
