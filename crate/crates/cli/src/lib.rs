//! Experiment runner for the learned precoder: dataset generation, training,
//! evaluation, PF episodes, structure reports and gradient checks.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

/// Configure the global thread pool. One job keeps every run deterministic
/// and is the default; results do not depend on the job count either way.
pub fn init_jobs(jobs: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    Ok(())
}
