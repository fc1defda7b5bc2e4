//! Stage runner behind the `adnn-energy-lab` binary.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use error::CliError;
pub use stages::{run, Options, Outcome, Stage};

/// Worker count from `AEL_THREADS`; `None` lets rayon choose.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("AEL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("AEL_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Runs a stage inside a pool sized by `AEL_THREADS`.
pub fn run_pooled(stage: Stage, config: &std::path::Path, opts: &Options) -> Result<Outcome, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads_from_env()? {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| run(stage, config, opts))
}
