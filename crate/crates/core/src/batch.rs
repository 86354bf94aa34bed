//! Independent simulation runs evaluated together.
//!
//! With the `parallel` feature (on by default) runs are spread over the rayon
//! thread pool; without it they execute one after another. Each run is
//! self-contained, so both paths return identical results in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::simulator::{simulate, Halt, Scenario, SimError, Trajectory};

pub type RunResult = Result<Trajectory, Box<Halt>>;

pub fn simulate_batch_sequential(scenarios: &[Scenario]) -> Vec<RunResult> {
    scenarios.iter().map(simulate).collect()
}

#[cfg(feature = "parallel")]
pub fn simulate_batch(scenarios: &[Scenario]) -> Vec<RunResult> {
    scenarios.par_iter().map(simulate).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn simulate_batch(scenarios: &[Scenario]) -> Vec<RunResult> {
    simulate_batch_sequential(scenarios)
}

/// Runs `simulate_batch` on a dedicated pool of `jobs` threads.
#[cfg(feature = "parallel")]
pub fn simulate_batch_with_jobs(scenarios: &[Scenario], jobs: usize) -> Vec<RunResult> {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(|| simulate_batch(scenarios)),
        Err(_) => simulate_batch_sequential(scenarios),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn simulate_batch_with_jobs(scenarios: &[Scenario], _jobs: usize) -> Vec<RunResult> {
    simulate_batch_sequential(scenarios)
}

/// The same scenario at each step size in `dts`.
pub fn dt_sweep(scenario: &Scenario, dts: &[f64]) -> Result<Vec<RunResult>, SimError> {
    let variants = dts
        .iter()
        .map(|&dt| scenario.with_dt(dt))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(simulate_batch(&variants))
}
