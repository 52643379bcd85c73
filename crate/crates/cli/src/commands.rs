use std::fs::File;
use std::path::{Path, PathBuf};

use odeprofile::coverage::mc_coverage;
use odeprofile::diagnostics::{
    difference_curve, lambda_limit, lemma2_audit, thm31_probe, thm41_bound, Thm41Constants,
};
use odeprofile::inference::{spline_sensitivities, wald_intervals, CovarianceEstimate, WaldInterval};
use odeprofile::profiler::{fit_outer, run_ladder_observed, InitValueMode, LadderRung};
use odeprofile::reference::{rk4_default, Trajectory};
use odeprofile::{io, Dataset, Error, KnotGrid, Result, SplineFunction, FORMAT_VERSION};
use serde::Serialize;

use crate::config::RunConfig;

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

/// Load the dataset, or simulate one (writing it to `data.csv`) when no
/// path is configured.
fn obtain_data(cfg: &RunConfig) -> Result<Dataset> {
    let mut data = match &cfg.data_path {
        Some(p) => io::read_dataset_file(p)?,
        None => {
            let d = cfg.simulation.simulate(&cfg.system, cfg.seed)?;
            io::write_dataset_file(&d, &cfg.output_dir.join("data.csv"))?;
            d
        }
    };
    cfg.apply_criteria(&mut data)?;
    data.check_against(&cfg.system)?;
    Ok(data)
}

#[derive(Serialize)]
struct SplineFile<'a> {
    spec_version: &'a str,
    system: &'a str,
    names: Vec<String>,
    splines: &'a [SplineFunction],
}

fn write_splines(cfg: &RunConfig, splines: &[SplineFunction]) -> Result<()> {
    io::write_json(
        &SplineFile {
            spec_version: FORMAT_VERSION,
            system: cfg.system.name(),
            names: (1..=splines.len()).map(|k| format!("x{k}")).collect(),
            splines,
        },
        &cfg.output_dir.join("spline.json"),
    )
}

#[derive(Serialize)]
struct ErrorFile<'a> {
    spec_version: &'a str,
    command: &'a str,
    kind: &'a str,
    message: String,
    rungs_completed: usize,
}

/// Record a runtime failure in `error.json`.
pub fn write_error(out: &Path, command: &str, err: &Error, rungs_completed: usize) {
    let file = ErrorFile {
        spec_version: FORMAT_VERSION,
        command,
        kind: err.kind(),
        message: err.to_string(),
        rungs_completed,
    };
    let _ = std::fs::create_dir_all(out);
    if let Err(e) = io::write_json(&file, &out.join("error.json")) {
        eprintln!("could not write error.json: {e}");
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    spec_version: &'a str,
    system: &'a str,
    seed: u64,
    params: &'a [f64],
    init: &'a [f64],
    noise_sd: &'a [f64],
    observed: Vec<usize>,
    n_times: usize,
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    prepare_out(&cfg.output_dir)?;
    let sim = &cfg.simulation;
    let data = sim.simulate(&cfg.system, cfg.seed)?;
    let rk4 = rk4_default(&cfg.system, &sim.params, &sim.init)?;
    let values: Vec<Vec<f64>> = sim.times.iter().map(|&t| rk4.eval(t)).collect::<Result<_>>()?;
    let slopes = sim
        .times
        .iter()
        .zip(&values)
        .map(|(&t, x)| cfg.system.eval_field(x, t, &sim.params))
        .collect::<Result<Vec<_>>>()?;
    let truth = Trajectory::new(sim.times.clone(), values, slopes)?;
    io::write_dataset_file(&data, &cfg.output_dir.join("data.csv"))?;
    io::write_trajectory_file(&truth, &cfg.output_dir.join("truth.csv"))?;
    io::write_json(
        &Meta {
            spec_version: FORMAT_VERSION,
            system: cfg.system.name(),
            seed: cfg.seed,
            params: &sim.params,
            init: &sim.init,
            noise_sd: &sim.noise_sd,
            observed: sim.observed.iter().map(|a| a + 1).collect(),
            n_times: sim.times.len(),
        },
        &cfg.output_dir.join("meta.json"),
    )?;
    println!("rows={} out={}", data.n(), cfg.output_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SingleFit<'a> {
    spec_version: &'a str,
    system: &'a str,
    names: Vec<String>,
    lambda: f64,
    theta_star_hat: &'a [f64],
    h_value: f64,
    j_value: f64,
    outer_converged: bool,
    outer_iterations: usize,
    inner_converged: bool,
    ci_level: f64,
    intervals: Option<Vec<WaldInterval>>,
    standard_errors: Option<Vec<f64>>,
    covariance: Option<CovarianceEstimate>,
    interval_error: Option<String>,
}

/// One outer fit at a fixed `λ`.
pub fn fit(cfg: &RunConfig) -> Result<()> {
    prepare_out(&cfg.output_dir)?;
    cfg.profile.check_estimable(&cfg.system)?;
    let data = obtain_data(cfg)?;
    let grid = cfg.grid.build(&cfg.system, &data)?;
    let layout = cfg.profile.layout(&cfg.system);
    let lambda = cfg.lambda.unwrap_or(cfg.profile.lambda_threshold);
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::usage("lambda must be positive"));
    }
    let outer = fit_outer(&cfg.system, &data, &grid, &layout, lambda, &cfg.profile.theta_star_init())?;
    let cov = spline_sensitivities(&cfg.system, &data, &grid, &layout, &outer.theta_star_hat, lambda)
        .and_then(|s| s.covariance(&data));
    let (intervals, covariance, interval_error) = match cov {
        Ok(c) => (
            Some(wald_intervals(&outer.theta_star_hat, &c, cfg.profile.ci_level)?),
            Some(c),
            None,
        ),
        Err(e) => (None, None, Some(e.to_string())),
    };
    io::write_json(
        &SingleFit {
            spec_version: FORMAT_VERSION,
            system: cfg.system.name(),
            names: layout.names(),
            lambda,
            theta_star_hat: &outer.theta_star_hat,
            h_value: outer.solution.h_value,
            j_value: outer.solution.j_value,
            outer_converged: outer.converged,
            outer_iterations: outer.iterations,
            inner_converged: outer.solution.converged,
            ci_level: cfg.profile.ci_level,
            standard_errors: covariance.as_ref().map(|c| c.standard_errors()),
            intervals,
            covariance,
            interval_error,
        },
        &cfg.output_dir.join("fit.json"),
    )?;
    write_splines(cfg, &outer.solution.splines)?;
    println!("theta_hat={} lambda={lambda}", fmt_list(&outer.theta_star_hat));
    Ok(())
}

/// The full ladder. On failure, the rungs completed so far are still written
/// to `ladder.csv` before `error.json`.
pub fn ladder(cfg: &RunConfig) -> Result<()> {
    prepare_out(&cfg.output_dir)?;
    let names = cfg.profile.layout(&cfg.system).names();
    let mut rungs: Vec<LadderRung> = Vec::new();
    let result = obtain_data(cfg).and_then(|data| {
        let grid = cfg.grid.build(&cfg.system, &data)?;
        run_ladder_observed(&cfg.system, &data, &grid, &cfg.profile, |r| rungs.push(r.clone()))
    });
    let ladder_csv = cfg.output_dir.join("ladder.csv");
    match result {
        Ok(fit) => {
            io::write_ladder_csv(&fit.names, &fit.ladder_trace, File::create(&ladder_csv)?)?;
            io::write_json(&fit, &cfg.output_dir.join("fit.json"))?;
            write_splines(cfg, &fit.splines)?;
            println!(
                "theta_hat={} lambda={} stopped={}",
                fmt_list(&fit.theta_star_hat),
                fit.lambda_final,
                fit.stopped_reason
            );
            Ok(())
        }
        Err(e) if e.is_usage() => Err(e),
        Err(e) => {
            if !rungs.is_empty() {
                io::write_ladder_csv(&names, &rungs, File::create(&ladder_csv)?)?;
            }
            write_error(&cfg.output_dir, "ladder", &e, rungs.len());
            Err(e)
        }
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    spec_version: &'a str,
    system: &'a str,
    theta_star: &'a [f64],
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Thm41Body {
    Computed {
        bound: f64,
        measured_error: f64,
        bound_holds: bool,
        limit_converged: bool,
        constants: Thm41Constants,
    },
    Skipped {
        skipped: bool,
        kind: String,
        reason: String,
    },
}

/// Decay probe, large-`λ` limit, difference curve and the scalar error bound.
pub fn diagnose(cfg: &RunConfig) -> Result<()> {
    prepare_out(&cfg.output_dir)?;
    let data = obtain_data(cfg)?;
    let grid: KnotGrid = cfg.grid.build(&cfg.system, &data)?;
    let layout = cfg.profile.layout(&cfg.system);
    let theta_star = if cfg.theta_explicit || layout.dim() == 0 {
        let mut t = cfg.simulation.params.clone();
        if let InitValueMode::Estimated(v) = &cfg.profile.init_value_mode {
            t.extend_from_slice(v);
        }
        t
    } else {
        run_ladder_observed(&cfg.system, &data, &grid, &cfg.profile, |_| {})?.theta_star_hat
    };
    let (params, init) = layout.split(&theta_star)?;
    fn stamp<'a, T: Serialize>(cfg: &'a RunConfig, theta_star: &'a [f64], body: T) -> Stamped<'a, T> {
        Stamped {
            spec_version: FORMAT_VERSION,
            system: cfg.system.name(),
            theta_star,
            body,
        }
    }
    let out = |f: &str| -> PathBuf { cfg.output_dir.join(f) };

    let thm31 = thm31_probe(&cfg.system, &data, &grid, &layout, &theta_star, &cfg.lambda_grid)?;
    io::write_json(&stamp(cfg, &theta_star, &thm31), &out("thm31.json"))?;

    let limit = lambda_limit(&cfg.system, &data, &grid, &layout, &theta_star, cfg.limit_lambda, 10.0, None)?;
    io::write_limit_csv(&limit, File::create(out("lambda_limit.csv"))?)?;
    io::write_json(&stamp(cfg, &theta_star, lemma2_audit(&limit)), &out("lemma2.json"))?;
    let last = limit.lambdas.len() - 1;
    let splines = limit
        .limit_splines(&grid)
        .or_else(|| limit.rung_splines(&grid, last))
        .expect("limit ladder has at least one rung");

    let truth = rk4_default(&cfg.system, &params, &init)?;
    let curve = difference_curve(&splines, &truth, cfg.diff_points)?;
    io::write_difference_csv(&curve, File::create(out("diff_vs_rk4.csv"))?)?;
    let sup = curve.iter().flat_map(|(_, d)| d.iter()).fold(0.0f64, |m, v| m.max(v.abs()));

    let thm41 = if cfg.system.dim_state() != 1 {
        Thm41Body::Skipped {
            skipped: true,
            kind: "unsupported".into(),
            reason: format!(
                "the error bound covers scalar systems only; {} has {} states",
                cfg.system.name(),
                cfg.system.dim_state()
            ),
        }
    } else {
        match thm41_bound(&cfg.system, &params, &init, &splines[0], &grid) {
            Ok((bound, constants)) => Thm41Body::Computed {
                bound,
                measured_error: sup,
                bound_holds: bound >= sup,
                limit_converged: limit.converged,
                constants,
            },
            Err(e @ (Error::Unsupported(_) | Error::Precondition(_))) => Thm41Body::Skipped {
                skipped: true,
                kind: e.kind().into(),
                reason: e.to_string(),
            },
            Err(e) => return Err(e),
        }
    };
    let bound_text = match &thm41 {
        Thm41Body::Computed { bound, .. } => format!("{bound}"),
        Thm41Body::Skipped { .. } => "skipped".into(),
    };
    io::write_json(&stamp(cfg, &theta_star, thm41), &out("thm41.json"))?;
    println!(
        "thm31_slope={} thm41_bound={bound_text} limit_sup_diff={sup}",
        thm31.slope.map_or("undefined".to_string(), |s| format!("{s}")),
    );
    Ok(())
}

pub fn mc(cfg: &RunConfig) -> Result<()> {
    prepare_out(&cfg.output_dir)?;
    let grid = match &cfg.data_path {
        Some(_) => return Err(Error::usage("mc-coverage simulates its own data; drop --data")),
        None => {
            let probe = cfg.simulation.simulate(&cfg.system, cfg.seed)?;
            cfg.grid.build(&cfg.system, &probe)?
        }
    };
    let report = mc_coverage(&cfg.system, &cfg.simulation, &grid, &cfg.profile, cfg.replicates, cfg.seed)?;
    io::write_json(&report, &cfg.output_dir.join("coverage.json"))?;
    for f in &report.failures {
        eprintln!("replicate seed {} failed: {}", f.seed, f.error);
    }
    println!(
        "coverage={} succeeded={}/{} max_rel_cov_diff={}{}",
        fmt_list(&report.coverage),
        report.succeeded,
        report.replicates,
        report.max_relative_difference,
        if report.degenerate { " degenerate" } else { "" }
    );
    Ok(())
}
