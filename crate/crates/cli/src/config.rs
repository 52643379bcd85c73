//! Run configuration: JSON file values overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use odeprofile::coverage::SimulationSpec;
use odeprofile::model::{self, OdeSystem};
use odeprofile::profiler::{InitValueMode, ProfileConfig};
use odeprofile::{Dataset, Error, FitCriterion, KnotGrid, Result};
use serde::Deserialize;
use serde_json::{Map, Value};

/// A list given either as a JSON array or as the flag string syntax.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ListOrSpec {
    List(Vec<f64>),
    Spec(String),
}

/// Values accepted from `--config`; every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    pub system: Option<String>,
    pub data_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub grid: Option<ListOrSpec>,
    pub seed: Option<u64>,
    pub theta: Option<Vec<f64>>,
    pub init: Option<Vec<f64>>,
    pub times: Option<ListOrSpec>,
    pub noise_sd: Option<Vec<f64>>,
    /// 1-based state components.
    pub observed: Option<Vec<usize>>,
    pub estimate_init: Option<bool>,
    pub criteria: Option<Vec<String>>,
    pub profile: Option<Map<String, Value>>,
    pub replicates: Option<usize>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<ListOrSpec>,
    pub limit_lambda: Option<f64>,
    pub diff_points: Option<usize>,
}

fn merge_json(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(t)) => merge_json(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::NotFound(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))
    }

    /// Fields of `top` win over fields of `self`.
    pub fn overlay(self, top: RawConfig) -> RawConfig {
        let profile = match (self.profile, top.profile) {
            (Some(mut b), Some(t)) => {
                merge_json(&mut b, t);
                Some(b)
            }
            (b, t) => t.or(b),
        };
        RawConfig {
            command: top.command.or(self.command),
            system: top.system.or(self.system),
            data_path: top.data_path.or(self.data_path),
            output_dir: top.output_dir.or(self.output_dir),
            grid: top.grid.or(self.grid),
            seed: top.seed.or(self.seed),
            theta: top.theta.or(self.theta),
            init: top.init.or(self.init),
            times: top.times.or(self.times),
            noise_sd: top.noise_sd.or(self.noise_sd),
            observed: top.observed.or(self.observed),
            estimate_init: top.estimate_init.or(self.estimate_init),
            criteria: top.criteria.or(self.criteria),
            profile,
            replicates: top.replicates.or(self.replicates),
            lambda: top.lambda.or(self.lambda),
            lambda_grid: top.lambda_grid.or(self.lambda_grid),
            limit_lambda: top.limit_lambda.or(self.limit_lambda),
            diff_points: top.diff_points.or(self.diff_points),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin system name.
    #[arg(long)]
    pub system: Option<String>,
    /// Dataset CSV (`t,y1,...,yd`). Without it, data are simulated.
    #[arg(long = "data")]
    pub data_path: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out", short = 'o')]
    pub output_dir: Option<PathBuf>,
    /// Breakpoints: `at-sample-times`, `uniform(N)` or a comma list.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Structural parameters: simulation truth, or the point diagnosed.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    /// Initial state: simulation truth and fixed (or starting) values.
    #[arg(long, allow_hyphen_values = true)]
    pub init: Option<String>,
    /// Sample times: `start:step:end` or a comma list.
    #[arg(long)]
    pub times: Option<String>,
    /// Noise standard deviation, one value or one per component.
    #[arg(long)]
    pub noise_sd: Option<String>,
    /// Observed components, 1-based comma list.
    #[arg(long)]
    pub observed: Option<String>,
    /// Estimate the initial values instead of holding them fixed.
    #[arg(long)]
    pub estimate_init: bool,
    /// Fit criterion per observed column (`gaussian`, `logistic`), or one for all.
    #[arg(long)]
    pub criteria: Option<String>,
    /// Starting structural parameters for the outer search.
    #[arg(long, allow_hyphen_values = true)]
    pub theta_init: Option<String>,
    /// First ladder rung.
    #[arg(long)]
    pub lambda_init: Option<f64>,
    /// Rung from which intervals are computed and compared.
    #[arg(long = "lambda0")]
    pub lambda_threshold: Option<f64>,
    #[arg(long)]
    pub lambda_factor: Option<f64>,
    /// Overlap threshold of the stopping rule.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    /// Maximum number of ladder rungs.
    #[arg(long = "max-steps")]
    pub max_ladder_steps: Option<usize>,
    /// `simplex` or `implicit-gradient`.
    #[arg(long)]
    pub outer_method: Option<String>,
    #[arg(long)]
    pub outer_tol: Option<f64>,
    #[arg(long)]
    pub outer_max_iter: Option<usize>,
    /// Monte Carlo replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Smoothing parameter of a single fit.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Smoothing parameters of the decay probe: comma list.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// First rung of the large-λ limit ladder.
    #[arg(long)]
    pub limit_lambda: Option<f64>,
    /// Probe points of the difference curve.
    #[arg(long)]
    pub diff_points: Option<usize>,
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| Error::usage(format!("{what}: '{p}' is not a valid value")))
        })
        .collect()
}

/// `start:step:end`, inclusive of `end` when the step count is integral to
/// within 1e-9.
pub fn parse_time_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("times: '{p}' is not a number")))
        })
        .collect::<Result<_>>()?;
    let [start, step, end] = parts[..] else {
        return Err(Error::usage(format!("times: expected start:step:end, got '{s}'")));
    };
    if !(step > 0.0 && step.is_finite() && start.is_finite() && end >= start && end.is_finite()) {
        return Err(Error::usage(format!("times: invalid range '{s}'")));
    }
    let q = (end - start) / step;
    let integral = (q - q.round()).abs() <= 1e-9;
    let count = if integral { q.round() as usize } else { q.floor() as usize };
    if count > 10_000_000 {
        return Err(Error::usage("times: too many points"));
    }
    let mut t: Vec<f64> = (0..=count).map(|i| start + i as f64 * step).collect();
    if integral {
        *t.last_mut().expect("nonempty") = end;
    }
    Ok(t)
}

fn resolve_times(v: &ListOrSpec) -> Result<Vec<f64>> {
    match v {
        ListOrSpec::List(l) => Ok(l.clone()),
        ListOrSpec::Spec(s) if s.contains(':') => parse_time_range(s),
        ListOrSpec::Spec(s) => parse_list(s, "times"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    AtSampleTimes,
    Uniform(usize),
    Explicit(Vec<f64>),
}

impl GridSpec {
    fn parse(v: &ListOrSpec) -> Result<Self> {
        let s = match v {
            ListOrSpec::List(l) => return Ok(GridSpec::Explicit(l.clone())),
            ListOrSpec::Spec(s) => s.trim(),
        };
        if s == "at-sample-times" {
            return Ok(GridSpec::AtSampleTimes);
        }
        if let Some(inner) = s.strip_prefix("uniform(").and_then(|r| r.strip_suffix(')')) {
            let n: usize = inner
                .trim()
                .parse()
                .map_err(|_| Error::usage(format!("grid: bad cell count in '{s}'")))?;
            return Ok(GridSpec::Uniform(n));
        }
        Ok(GridSpec::Explicit(parse_list(s, "grid")?))
    }

    pub fn build(&self, system: &OdeSystem, data: &Dataset) -> Result<KnotGrid> {
        match self {
            GridSpec::AtSampleTimes => {
                let mut t = data.times().to_vec();
                t.sort_by(f64::total_cmp);
                t.dedup();
                KnotGrid::new(t)
            }
            GridSpec::Uniform(n) => KnotGrid::uniform(system.time_horizon(), *n),
            GridSpec::Explicit(b) => KnotGrid::new(b.clone()),
        }
    }
}

/// Per-system simulation defaults and ladder starting point.
struct SystemDefaults {
    theta: Vec<f64>,
    init: Vec<f64>,
    times: &'static str,
    noise_sd: f64,
    theta_init: Vec<f64>,
}

fn defaults_for(name: &str) -> SystemDefaults {
    let d = |theta: Vec<f64>, init: Vec<f64>, times, noise_sd| SystemDefaults {
        theta_init: theta.clone(),
        theta,
        init,
        times,
        noise_sd,
    };
    match name {
        "fitzhugh_nagumo" => SystemDefaults {
            theta: vec![0.2, 0.2, 3.0],
            init: vec![1.0, -1.0],
            times: "0:0.05:20",
            noise_sd: 0.5,
            theta_init: vec![0.8, -0.5, 3.5],
        },
        "exp_growth" => d(vec![], vec![1.0], "0:0.01:1", 0.1),
        "tan_blowup" => d(vec![1.0], vec![0.0], "0:0.02:2", 0.1),
        "decay_forced" => d(vec![], vec![0.0], "0:0.05:10", 0.1),
        "linear_rate" => d(vec![1.0], vec![1.0], "0:0.01:1", 0.1),
        _ => d(vec![1.0], vec![0.0], "0:0.01:1", 0.1),
    }
}

impl RunFlags {
    fn list(v: &Option<String>, what: &str) -> Result<Option<Vec<f64>>> {
        v.as_deref().map(|s| parse_list(s, what)).transpose()
    }

    fn to_raw(&self) -> Result<RawConfig> {
        let mut profile = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                profile.insert(k.to_string(), v);
            }
        };
        put("theta_init", Self::list(&self.theta_init, "theta-init")?.map(Value::from));
        put("lambda_init", self.lambda_init.map(Value::from));
        put("lambda_threshold", self.lambda_threshold.map(Value::from));
        put("lambda_factor", self.lambda_factor.map(Value::from));
        put("alpha", self.alpha.map(Value::from));
        put("ci_level", self.ci_level.map(Value::from));
        put("max_ladder_steps", self.max_ladder_steps.map(Value::from));
        let mut outer = Map::new();
        if let Some(m) = &self.outer_method {
            outer.insert("method".into(), Value::from(m.as_str()));
        }
        if let Some(t) = self.outer_tol {
            outer.insert("tol".into(), Value::from(t));
        }
        if let Some(n) = self.outer_max_iter {
            outer.insert("max_iter".into(), Value::from(n));
        }
        if !outer.is_empty() {
            put("outer", Some(Value::Object(outer)));
        }
        Ok(RawConfig {
            command: None,
            system: self.system.clone(),
            data_path: self.data_path.clone(),
            output_dir: self.output_dir.clone(),
            grid: self.grid.clone().map(ListOrSpec::Spec),
            seed: self.seed,
            theta: Self::list(&self.theta, "theta")?,
            init: Self::list(&self.init, "init")?,
            times: self.times.clone().map(ListOrSpec::Spec),
            noise_sd: Self::list(&self.noise_sd, "noise-sd")?,
            observed: self.observed.as_deref().map(|s| parse_list(s, "observed")).transpose()?,
            estimate_init: self.estimate_init.then_some(true),
            criteria: self
                .criteria
                .as_deref()
                .map(|s| s.split(',').map(|c| c.trim().to_string()).collect()),
            profile: (!profile.is_empty()).then_some(profile),
            replicates: self.replicates,
            lambda: self.lambda,
            lambda_grid: self.lambda_grid.clone().map(ListOrSpec::Spec),
            limit_lambda: self.limit_lambda,
            diff_points: self.diff_points,
        })
    }
}

/// Fully resolved run settings.
pub struct RunConfig {
    pub system: OdeSystem,
    pub data_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub grid: GridSpec,
    pub seed: u64,
    pub simulation: SimulationSpec,
    /// Set when `theta` was given explicitly rather than defaulted.
    pub theta_explicit: bool,
    pub criteria: Option<Vec<FitCriterion>>,
    pub profile: ProfileConfig,
    pub replicates: usize,
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub limit_lambda: f64,
    pub diff_points: usize,
}

impl RunConfig {
    pub fn resolve(command: &str, flags: &RunFlags) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        if let Some(c) = &file.command {
            if c != command {
                return Err(Error::usage(format!(
                    "config is for command '{c}' but '{command}' was invoked"
                )));
            }
        }
        let raw = file.overlay(flags.to_raw()?);
        let name = raw.system.clone().unwrap_or_else(|| "fitzhugh_nagumo".to_string());
        let system = model::builtin(&name)?;
        let defaults = defaults_for(&name);
        let d = system.dim_state();

        let theta_explicit = raw.theta.is_some();
        let theta = raw.theta.clone().unwrap_or(defaults.theta);
        let init = raw.init.clone().unwrap_or(defaults.init);
        if theta.len() != system.dim_params() {
            return Err(Error::usage(format!(
                "theta has {} values; {name} takes {}",
                theta.len(),
                system.dim_params()
            )));
        }
        if init.len() != d {
            return Err(Error::usage(format!("init has {} values; {name} has {d} states", init.len())));
        }
        let times = resolve_times(raw.times.as_ref().unwrap_or(&ListOrSpec::Spec(defaults.times.into())))?;
        let observed = match &raw.observed {
            Some(o) => {
                if o.is_empty() || o.iter().any(|&k| k == 0 || k > d) {
                    return Err(Error::usage(format!("observed components must lie in 1..={d}")));
                }
                let mut v: Vec<usize> = o.iter().map(|k| k - 1).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (0..d).collect(),
        };
        let simulation = SimulationSpec {
            params: theta,
            init: init.clone(),
            times,
            noise_sd: raw.noise_sd.clone().unwrap_or(vec![defaults.noise_sd]),
            observed,
        };

        let mode = if raw.estimate_init.unwrap_or(false) {
            InitValueMode::Estimated(init)
        } else {
            InitValueMode::Fixed(init)
        };
        let base = ProfileConfig::new(defaults.theta_init, mode);
        let profile = match raw.profile {
            Some(patch) => {
                let Value::Object(mut obj) = serde_json::to_value(&base)? else {
                    unreachable!("config serializes to an object")
                };
                merge_json(&mut obj, patch);
                serde_json::from_value(Value::Object(obj))
                    .map_err(|e| Error::usage(format!("profile settings: {e}")))?
            }
            None => base,
        };
        profile.validate(&system)?;

        let criteria = raw
            .criteria
            .map(|names| names.iter().map(|n| FitCriterion::by_name(n)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let lambda_grid = match &raw.lambda_grid {
            Some(ListOrSpec::List(l)) => l.clone(),
            Some(ListOrSpec::Spec(s)) => parse_list(s, "lambda-grid")?,
            None => (0..=6).map(|k| 10f64.powi(k)).collect(),
        };
        let grid = GridSpec::parse(raw.grid.as_ref().unwrap_or(&ListOrSpec::Spec("at-sample-times".into())))?;
        Ok(RunConfig {
            system,
            data_path: raw.data_path,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from(".")),
            grid,
            seed: raw.seed.unwrap_or(0),
            simulation,
            theta_explicit,
            criteria,
            profile,
            replicates: raw.replicates.unwrap_or(50),
            lambda: raw.lambda,
            lambda_grid,
            limit_lambda: raw.limit_lambda.unwrap_or(1e4),
            diff_points: raw.diff_points.unwrap_or(2000),
        })
    }

    /// Apply the configured fit criteria to a dataset.
    pub fn apply_criteria(&self, data: &mut Dataset) -> Result<()> {
        let Some(c) = &self.criteria else { return Ok(()) };
        let cols = data.observed_components().len();
        match c.len() {
            1 => (0..cols).try_for_each(|k| data.set_criterion(k, c[0].clone())),
            n if n == cols => (0..cols).try_for_each(|k| data.set_criterion(k, c[k].clone())),
            n => Err(Error::usage(format!("{n} criteria given for {cols} observed columns"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_range_matches_enumeration() {
        let t = parse_time_range("0:0.05:20").unwrap();
        assert_eq!(t.len(), 401);
        assert_eq!(t[400], 20.0);
        assert_eq!(t[1], 0.05);
        let t = parse_time_range("0:0.3:1").unwrap();
        assert_eq!(t.len(), 4);
        assert!(t[3] < 1.0);
        assert!(parse_time_range("0:0:1").is_err());
        assert!(parse_time_range("1:0.1").is_err());
    }

    #[test]
    fn grid_specs() {
        let s = |x: &str| GridSpec::parse(&ListOrSpec::Spec(x.into())).unwrap();
        assert_eq!(s("at-sample-times"), GridSpec::AtSampleTimes);
        assert_eq!(s("uniform(40)"), GridSpec::Uniform(40));
        assert_eq!(s("0,0.5,1"), GridSpec::Explicit(vec![0.0, 0.5, 1.0]));
        assert!(GridSpec::parse(&ListOrSpec::Spec("uniform(x)".into())).is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let file: RawConfig = serde_json::from_str(
            r#"{"seed": 3, "theta": [1, 2, 3], "profile": {"lambda_init": 5, "outer": {"tol": 1e-3}}}"#,
        )
        .unwrap();
        let flags = RunFlags {
            seed: Some(9),
            outer_max_iter: Some(7),
            ..Default::default()
        };
        let merged = file.overlay(flags.to_raw().unwrap());
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.theta, Some(vec![1.0, 2.0, 3.0]));
        let outer = &merged.profile.unwrap()["outer"];
        assert_eq!(outer["tol"], 1e-3);
        assert_eq!(outer["max_iter"], 7);
    }

    #[test]
    fn resolves_defaults_and_rejects_bad_dims() {
        let cfg = RunConfig::resolve("ladder", &RunFlags::default()).unwrap();
        assert_eq!(cfg.simulation.times.len(), 401);
        assert_eq!(cfg.profile.theta_init, vec![0.8, -0.5, 3.5]);
        let flags = RunFlags {
            theta: Some("1,2".into()),
            ..Default::default()
        };
        assert!(RunConfig::resolve("ladder", &flags).is_err_and(|e| e.is_usage()));
    }
}
