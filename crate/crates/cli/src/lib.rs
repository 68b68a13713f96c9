//! Experiment pipeline behind the `phasepos` command.

pub mod commands;
pub mod config;
mod error;
pub mod layout;

pub use error::{CliError, Result};

/// Sizes the global worker pool. Call once, before any parallel work.
pub fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    }
    Ok(())
}
