//! Monte Carlo coverage of the ladder's Wald intervals.
//!
//! Replicate `k` simulates a dataset with seed `seed + k`, runs the full
//! ladder and records whether each interval contains the truth. Replicates
//! may run concurrently; results are aggregated in seed order.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::Dataset;
use crate::error::{Error, Result};
use crate::model::OdeSystem;
use crate::profiler::{run_ladder, InitValueMode, ProfileConfig, StoppedReason};
use crate::reference::simulate_dataset;
use crate::spline::KnotGrid;

/// Smallest replicate count accepted by [`mc_coverage`].
pub const MIN_REPLICATES: usize = 30;

/// Environment variable capping replicate concurrency.
pub const THREADS_ENV: &str = "ODEPROFILE_THREADS";

/// How synthetic data are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub params: Vec<f64>,
    pub init: Vec<f64>,
    pub times: Vec<f64>,
    /// One value for all components, or one per component.
    pub noise_sd: Vec<f64>,
    /// Observed state components (0-based).
    pub observed: Vec<usize>,
}

impl SimulationSpec {
    pub fn simulate(&self, system: &OdeSystem, seed: u64) -> Result<Dataset> {
        simulate_dataset(
            system,
            &self.params,
            &self.init,
            &self.times,
            &self.noise_sd,
            seed,
            &self.observed,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateOutcome {
    pub seed: u64,
    pub theta_star_hat: Vec<f64>,
    pub covered: Vec<bool>,
    pub degenerate: bool,
    pub lambda_final: f64,
    pub stopped_reason: StoppedReason,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub spec_version: String,
    pub system: String,
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub ci_level: f64,
    pub replicates: usize,
    pub succeeded: usize,
    pub failures: Vec<ReplicateFailure>,
    /// Fraction of successful replicates whose interval covers the truth.
    pub coverage: Vec<f64>,
    /// Set when any successful replicate produced a zero-width interval.
    pub degenerate: bool,
    pub mean_estimate: Vec<f64>,
    pub bias: Vec<f64>,
    /// Sample covariance of `√n(θ̂ − θ₀)` across replicates.
    pub empirical_covariance: Vec<Vec<f64>>,
    /// Mean sandwich estimate across replicates.
    pub mean_sandwich: Vec<Vec<f64>>,
    /// `|E_ij − S_ij| / √(S_ii S_jj)`.
    pub relative_difference: Vec<Vec<f64>>,
    pub max_relative_difference: f64,
    pub outcomes: Vec<ReplicateOutcome>,
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

struct Success {
    outcome: ReplicateOutcome,
    sandwich: DMatrix<f64>,
    n: usize,
}

fn replicate(
    system: &OdeSystem,
    sim: &SimulationSpec,
    grid: &KnotGrid,
    config: &ProfileConfig,
    truth: &[f64],
    seed: u64,
) -> Result<Success> {
    let data = sim.simulate(system, seed)?;
    let fit = run_ladder(system, &data, grid, config)?;
    let (intervals, cov) = match (&fit.intervals, &fit.covariance) {
        (Some(i), Some(c)) => (i, c),
        _ => {
            let why = fit
                .ladder_trace
                .last()
                .and_then(|r| r.interval_error.clone())
                .unwrap_or_else(|| "final rung carries no intervals".into());
            return Err(Error::Precondition(why));
        }
    };
    Ok(Success {
        outcome: ReplicateOutcome {
            seed,
            covered: intervals.iter().zip(truth).map(|(i, t)| i.contains(*t)).collect(),
            degenerate: intervals.iter().any(|i| i.degenerate),
            theta_star_hat: fit.theta_star_hat.clone(),
            lambda_final: fit.lambda_final,
            stopped_reason: fit.stopped_reason,
        },
        sandwich: cov.sandwich.clone(),
        n: data.n(),
    })
}

/// Run `replicates` seeded simulate-and-ladder replicates.
///
/// The truth for estimated initial values is `sim.init`. Fails with a usage
/// error below [`MIN_REPLICATES`] and with a runtime error when fewer than
/// two replicates succeed.
pub fn mc_coverage(
    system: &OdeSystem,
    sim: &SimulationSpec,
    grid: &KnotGrid,
    config: &ProfileConfig,
    replicates: usize,
    seed: u64,
) -> Result<CoverageReport> {
    if replicates < MIN_REPLICATES {
        return Err(Error::usage(format!(
            "{replicates} replicates requested; at least {MIN_REPLICATES} are required"
        )));
    }
    config.validate(system)?;
    config.check_estimable(system)?;
    if sim.params.len() != system.dim_params() || sim.init.len() != system.dim_state() {
        return Err(Error::usage("simulation parameters do not match the system dimensions"));
    }
    let mut truth = sim.params.clone();
    if let InitValueMode::Estimated(_) = config.init_value_mode {
        truth.extend_from_slice(&sim.init);
    }
    let names = config.layout(system).names();

    let run = || -> Vec<(u64, Result<Success>)> {
        (0..replicates as u64)
            .into_par_iter()
            .map(|k| {
                let s = seed.wrapping_add(k);
                (s, replicate(system, sim, grid, config, &truth, s))
            })
            .collect()
    };
    let results = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::usage(format!("cannot build thread pool: {e}")))?
            .install(run),
        None => run(),
    };

    let p = truth.len();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    let mut sandwiches = Vec::new();
    let mut n_obs = 0usize;
    for (s, r) in results {
        match r {
            Ok(ok) => {
                n_obs = ok.n;
                sandwiches.push(ok.sandwich);
                outcomes.push(ok.outcome);
            }
            Err(e) => failures.push(ReplicateFailure { seed: s, error: e.to_string() }),
        }
    }
    let m = outcomes.len();
    if m < 2 {
        return Err(Error::Precondition(format!(
            "only {m} of {replicates} replicates succeeded"
        )));
    }
    let mf = m as f64;
    let coverage = (0..p)
        .map(|j| outcomes.iter().filter(|o| o.covered[j]).count() as f64 / mf)
        .collect();
    let mean: Vec<f64> = (0..p)
        .map(|j| outcomes.iter().map(|o| o.theta_star_hat[j]).sum::<f64>() / mf)
        .collect();
    let nf = n_obs as f64;
    let emp = DMatrix::from_fn(p, p, |i, j| {
        outcomes
            .iter()
            .map(|o| nf * (o.theta_star_hat[i] - mean[i]) * (o.theta_star_hat[j] - mean[j]))
            .sum::<f64>()
            / (mf - 1.0)
    });
    let sand = sandwiches.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + s) / mf;
    let rel = DMatrix::from_fn(p, p, |i, j| {
        (emp[(i, j)] - sand[(i, j)]).abs() / (sand[(i, i)] * sand[(j, j)]).sqrt()
    });
    Ok(CoverageReport {
        spec_version: crate::FORMAT_VERSION.to_string(),
        system: system.name().to_string(),
        names,
        bias: mean.iter().zip(&truth).map(|(m, t)| m - t).collect(),
        truth,
        ci_level: config.ci_level,
        replicates,
        succeeded: m,
        failures,
        coverage,
        degenerate: outcomes.iter().any(|o| o.degenerate),
        mean_estimate: mean,
        empirical_covariance: rows(&emp),
        mean_sandwich: rows(&sand),
        max_relative_difference: rel.iter().copied().fold(0.0, f64::max),
        relative_difference: rows(&rel),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;

    #[test]
    fn too_few_replicates_is_a_usage_error() {
        let sys = model::linear_rate();
        let sim = SimulationSpec {
            params: vec![1.0],
            init: vec![1.0],
            times: vec![0.0, 0.5, 1.0],
            noise_sd: vec![0.1],
            observed: vec![0],
        };
        let grid = KnotGrid::uniform(1.0, 4).unwrap();
        let cfg = ProfileConfig::new(vec![1.0], InitValueMode::Fixed(vec![1.0]));
        let err = mc_coverage(&sys, &sim, &grid, &cfg, 2, 0).unwrap_err();
        assert!(err.is_usage());
    }
}
