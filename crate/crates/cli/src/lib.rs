//! Operator surface for the forecasting pipeline: dataset generation,
//! training, evaluation and rendering, driven by one TOML config.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod render;
pub mod train;

pub use config::RunConfig;
pub use error::CliError;

/// Sizes the global thread pool from `DRF_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DRF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Config(format!("DRF_THREADS={v:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}
