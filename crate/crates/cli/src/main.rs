//! `odeprofile` command-line front end.
//!
//! Exit codes: 0 on success, 1 when the numerics fail, 2 for usage errors.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{RunConfig, RunFlags};

#[derive(Parser)]
#[command(name = "odeprofile", version, about = "Generalized-profiling estimation of ODE parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy observations; writes data.csv, truth.csv, meta.json.
    Simulate(RunFlags),
    /// Fit at a single smoothing parameter; writes fit.json, spline.json.
    Fit(RunFlags),
    /// Run the smoothing-parameter ladder; writes fit.json, ladder.csv, spline.json.
    Ladder(RunFlags),
    /// Decay probe, large-λ limit and error bound reports.
    Diagnose(RunFlags),
    /// Monte Carlo coverage of the ladder's intervals; writes coverage.json.
    McCoverage(RunFlags),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags, run): (&str, &RunFlags, fn(&RunConfig) -> odeprofile::Result<()>) = match &cli.command {
        Command::Simulate(f) => ("simulate", f, commands::simulate),
        Command::Fit(f) => ("fit", f, commands::fit),
        Command::Ladder(f) => ("ladder", f, commands::ladder),
        Command::Diagnose(f) => ("diagnose", f, commands::diagnose),
        Command::McCoverage(f) => ("mc-coverage", f, commands::mc),
    };
    let cfg = match RunConfig::resolve(name, flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_usage() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            if name != "ladder" {
                commands::write_error(&cfg.output_dir, name, &e, 0);
            }
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
