//! The outer problem and the smoothing-parameter ladder.
//!
//! For each `λ` on a geometric ladder the profiled data fit `H_n(x̂(θ*, λ))`
//! is maximized over `θ*`, warm-starting from the previous rung. Once `λ`
//! reaches the threshold `λ₀`, Wald intervals are computed at every rung
//! and the ladder stops when consecutive intervals overlap by more than
//! `1 − α` relative to both of them, for every coordinate of `θ*`.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::criteria::Dataset;
use crate::error::{Error, Result};
use crate::inference::{sensitivities_with, wald_intervals, CovarianceEstimate, WaldInterval};
use crate::model::OdeSystem;
use crate::nelder_mead;
use crate::smoother::{InnerSolution, InnerTolerances, Smoother, ThetaLayout};
use crate::spline::{KnotGrid, SplineFunction, DEFAULT_SUBDIVISIONS};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "values")]
pub enum InitValueMode {
    /// Initial values are known and pinned.
    Fixed(Vec<f64>),
    /// Initial values are estimated, starting from the given guess.
    Estimated(Vec<f64>),
}

impl InitValueMode {
    pub fn values(&self) -> &[f64] {
        match self {
            InitValueMode::Fixed(v) | InitValueMode::Estimated(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterMethod {
    Simplex,
    /// Levenberg–Marquardt on the data residuals with `∂x̂/∂θ*` from the
    /// implicit function theorem. Gaussian criteria only.
    ImplicitGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterOptions {
    pub method: OuterMethod,
    pub tol: f64,
    pub max_iter: usize,
    /// Half-width of the search box around the starting `θ*`.
    pub box_radius: f64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            method: OuterMethod::Simplex,
            tol: 1e-6,
            max_iter: 500,
            box_radius: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub lambda_init: f64,
    pub lambda_threshold: f64,
    pub lambda_factor: f64,
    pub alpha: f64,
    /// Level of the reported Wald intervals.
    pub ci_level: f64,
    pub theta_init: Vec<f64>,
    pub init_value_mode: InitValueMode,
    pub outer: OuterOptions,
    pub max_ladder_steps: usize,
    pub inner: InnerTolerances,
    pub component_weights: Option<Vec<f64>>,
}

impl ProfileConfig {
    pub fn new(theta_init: Vec<f64>, init_value_mode: InitValueMode) -> Self {
        Self {
            lambda_init: 1e-2,
            lambda_threshold: 1e2,
            lambda_factor: 10.0,
            alpha: 0.05,
            ci_level: 0.95,
            theta_init,
            init_value_mode,
            outer: OuterOptions::default(),
            max_ladder_steps: 12,
            inner: InnerTolerances {
                grad_tol: 1e-10,
                max_iter: 200,
            },
            component_weights: None,
        }
    }

    pub fn validate(&self, system: &OdeSystem) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return bad(format!("lambda_init must be positive, got {}", self.lambda_init));
        }
        if !(self.lambda_threshold > 0.0 && self.lambda_threshold.is_finite()) {
            return bad(format!("lambda0 must be positive, got {}", self.lambda_threshold));
        }
        if self.lambda_init > self.lambda_threshold {
            return bad(format!(
                "lambda_init ({}) exceeds lambda0 ({})",
                self.lambda_init, self.lambda_threshold
            ));
        }
        if !(self.lambda_factor > 1.0 && self.lambda_factor.is_finite()) {
            return bad(format!("lambda factor must exceed 1, got {}", self.lambda_factor));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci level must lie in (0, 1), got {}", self.ci_level));
        }
        if self.max_ladder_steps == 0 {
            return bad("max ladder steps must be at least 1".into());
        }
        if !(self.outer.tol > 0.0 && self.outer.box_radius > 0.0) {
            return bad("outer tolerance and box radius must be positive".into());
        }
        if self.theta_init.len() != system.dim_params() {
            return bad(format!(
                "theta_init has {} entries, {} expects {}",
                self.theta_init.len(),
                system.name(),
                system.dim_params()
            ));
        }
        if self.init_value_mode.values().len() != system.dim_state() {
            return bad(format!(
                "{} initial values given, {} expects {}",
                self.init_value_mode.values().len(),
                system.name(),
                system.dim_state()
            ));
        }
        if self.theta_init.iter().chain(self.init_value_mode.values()).any(|v| !v.is_finite()) {
            return bad("starting values must be finite".into());
        }
        Ok(())
    }

    /// Usage error when `θ*` is empty.
    pub fn check_estimable(&self, system: &OdeSystem) -> Result<()> {
        if self.layout(system).dim() == 0 {
            return Err(Error::usage(format!(
                "{} has nothing to estimate: no parameters and fixed initial values",
                system.name()
            )));
        }
        Ok(())
    }

    pub fn layout(&self, system: &OdeSystem) -> ThetaLayout {
        match &self.init_value_mode {
            InitValueMode::Fixed(v) => ThetaLayout::fixed(system.dim_params(), v.clone()),
            InitValueMode::Estimated(_) => ThetaLayout::estimated(system.dim_params(), system.dim_state()),
        }
    }

    /// Starting `θ*`.
    pub fn theta_star_init(&self) -> Vec<f64> {
        let mut v = self.theta_init.clone();
        if let InitValueMode::Estimated(g) = &self.init_value_mode {
            v.extend_from_slice(g);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoppedReason {
    Overlap,
    LadderExhausted,
}

impl std::fmt::Display for StoppedReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StoppedReason::Overlap => "overlap",
            StoppedReason::LadderExhausted => "ladder-exhausted",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderRung {
    pub lambda: f64,
    pub theta_star: Vec<f64>,
    pub h_value: f64,
    pub j_value: f64,
    pub inner_converged: bool,
    pub outer_converged: bool,
    pub outer_iterations: usize,
    pub intervals: Option<Vec<WaldInterval>>,
    pub standard_errors: Option<Vec<f64>>,
    /// Why intervals are missing at a rung at or above `λ₀`.
    pub interval_error: Option<String>,
    #[serde(skip)]
    pub covariance: Option<CovarianceEstimate>,
    #[serde(skip)]
    pub solution: Option<InnerSolution>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileFit {
    pub spec_version: String,
    pub system: String,
    pub names: Vec<String>,
    pub theta_star_hat: Vec<f64>,
    pub lambda_final: f64,
    pub h_value: f64,
    pub j_value: f64,
    pub stopped_reason: StoppedReason,
    pub intervals: Option<Vec<WaldInterval>>,
    pub standard_errors: Option<Vec<f64>>,
    pub covariance: Option<CovarianceEstimate>,
    pub ci_level: f64,
    pub ladder_trace: Vec<LadderRung>,
    #[serde(skip)]
    pub splines: Vec<SplineFunction>,
}

/// Result of one outer optimization.
#[derive(Debug, Clone)]
pub struct OuterFit {
    pub theta_star_hat: Vec<f64>,
    pub solution: InnerSolution,
    pub converged: bool,
    pub iterations: usize,
}

/// Overlap length divided by the length of each interval.
pub fn ci_overlap_ratios(a: (f64, f64), b: (f64, f64)) -> Result<(f64, f64)> {
    for (lo, hi) in [a, b] {
        if !(lo <= hi) {
            return Err(Error::usage(format!("interval [{lo}, {hi}] has lo > hi")));
        }
    }
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let touches = lo <= hi;
    let overlap = (hi - lo).max(0.0);
    let ratio = |(l, h): (f64, f64)| {
        let w = h - l;
        if w > 0.0 {
            overlap / w
        } else if touches {
            1.0
        } else {
            0.0
        }
    };
    Ok((ratio(a), ratio(b)))
}

/// Overlap ratios where an interval narrower than `resolution` is a point,
/// and two points closer than `resolution` coincide.
pub fn resolved_overlap_ratios(a: (f64, f64), b: (f64, f64), resolution: f64) -> Result<(f64, f64)> {
    let wa = a.1 - a.0;
    let wb = b.1 - b.0;
    if wa < resolution && wb < resolution && wa >= 0.0 && wb >= 0.0 {
        let gap = (0.5 * (a.0 + a.1) - 0.5 * (b.0 + b.1)).abs();
        let r = if gap <= resolution { 1.0 } else { 0.0 };
        return Ok((r, r));
    }
    ci_overlap_ratios(a, b)
}

fn search_box(center: &[f64], radius: f64) -> (Vec<f64>, Vec<f64>) {
    (
        center.iter().map(|c| c - radius).collect(),
        center.iter().map(|c| c + radius).collect(),
    )
}

/// Maximize the profiled data fit at fixed `λ` from `theta_star_init`,
/// searching a box of half-width `outer.box_radius` around `box_center`.
#[allow(clippy::too_many_arguments)]
pub fn fit_outer_on(
    sm: &Smoother<'_>,
    layout: &ThetaLayout,
    lambda: f64,
    theta_star_init: &[f64],
    box_center: &[f64],
    outer: &OuterOptions,
    inner: InnerTolerances,
    warm: Option<&[f64]>,
) -> Result<OuterFit> {
    match outer.method {
        OuterMethod::Simplex => simplex_outer(sm, layout, lambda, theta_star_init, box_center, outer, inner, warm),
        OuterMethod::ImplicitGradient => {
            implicit_outer(sm, layout, lambda, theta_star_init, box_center, outer, inner, warm)
        }
    }
}

/// [`fit_outer_on`] with default options, a box around the starting point
/// and a cold inner start.
pub fn fit_outer(
    system: &OdeSystem,
    data: &Dataset,
    grid: &KnotGrid,
    layout: &ThetaLayout,
    lambda: f64,
    theta_star_init: &[f64],
) -> Result<OuterFit> {
    let sm = Smoother::new(system, data, grid, DEFAULT_SUBDIVISIONS, None)?;
    let cfg = ProfileConfig::new(vec![], InitValueMode::Estimated(vec![]));
    fit_outer_on(&sm, layout, lambda, theta_star_init, theta_star_init, &cfg.outer, cfg.inner, None)
}

#[allow(clippy::too_many_arguments)]
fn simplex_outer(
    sm: &Smoother<'_>,
    layout: &ThetaLayout,
    lambda: f64,
    start: &[f64],
    box_center: &[f64],
    outer: &OuterOptions,
    inner: InnerTolerances,
    warm: Option<&[f64]>,
) -> Result<OuterFit> {
    let (lo, hi) = search_box(box_center, outer.box_radius);
    let last = RefCell::new(warm.map(|w| w.to_vec()));
    let best: RefCell<Option<(f64, Vec<f64>, InnerSolution)>> = RefCell::new(None);
    let mut first_error: Option<Error> = None;
    let objective = |th: &[f64]| -> f64 {
        let Ok((params, init)) = layout.split(th) else {
            return f64::INFINITY;
        };
        let w = last.borrow().clone();
        match sm.solve(&params, &init, lambda, w.as_deref(), inner) {
            Ok(sol) => {
                let f = -sol.h_value;
                if !f.is_finite() {
                    return f64::INFINITY;
                }
                *last.borrow_mut() = Some(sol.coefficients().to_vec());
                let mut b = best.borrow_mut();
                if b.as_ref().map_or(true, |(bf, _, _)| f < *bf) {
                    *b = Some((f, th.to_vec(), sol));
                }
                f
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
                f64::INFINITY
            }
        }
    };
    let out = nelder_mead::minimize(
        objective,
        start,
        &lo,
        &hi,
        nelder_mead::Options {
            tol: outer.tol,
            max_iter: outer.max_iter,
        },
    );
    let Some((_, theta, solution)) = best.into_inner() else {
        return Err(first_error.unwrap_or_else(|| Error::Divergence {
            reason: "no evaluable point found by the outer search".into(),
            iterations: out.iterations,
            last_iterate: out.x,
        }));
    };
    Ok(OuterFit {
        theta_star_hat: theta,
        solution,
        converged: out.converged,
        iterations: out.iterations,
    })
}

#[allow(clippy::too_many_arguments)]
fn implicit_outer(
    sm: &Smoother<'_>,
    layout: &ThetaLayout,
    lambda: f64,
    start: &[f64],
    box_center: &[f64],
    outer: &OuterOptions,
    inner: InnerTolerances,
    warm: Option<&[f64]>,
) -> Result<OuterFit> {
    if sm.data().criteria().iter().any(|c| !c.is_gaussian()) {
        return Err(Error::Unsupported(
            "the implicit-gradient outer method needs squared-error criteria".into(),
        ));
    }
    let (lo, hi) = search_box(box_center, outer.box_radius);
    let p = layout.dim();
    let est = layout.estimated_components();
    let nobs = sm.observation_count();
    let scale = 1.0 / (sm.data().n() as f64).sqrt();
    let solve = |th: &[f64], w: Option<&[f64]>| -> Result<InnerSolution> {
        let (params, init) = layout.split(th)?;
        sm.solve(&params, &init, lambda, w, inner)
    };

    let mut theta: Vec<f64> = start.iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect();
    let mut sol = solve(&theta, warm)?;
    let mut f = -sol.h_value;
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < outer.max_iter {
        iterations += 1;
        let (params, _) = layout.split(&theta)?;
        let jac = sm.implicit_jacobian(sol.coefficients(), &params, lambda, &est)?;
        // Residuals (x̂ − y)/√n and their Jacobian.
        let mut jtj = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut jtr = nalgebra::DVector::<f64>::zeros(p);
        for e in 0..nobs {
            let (_, y) = sm.observation_value(e);
            let r = (sm.fitted(sol.coefficients(), e) - y) * scale;
            let row: Vec<f64> = jac.columns.iter().map(|col| sm.project_observation(col, e) * scale).collect();
            for a in 0..p {
                jtr[a] += row[a] * r;
                for b in 0..p {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        let gnorm = jtr.amax();
        if gnorm <= outer.tol * (1.0 + f.abs()) * 1e-2 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while !accepted && mu < 1e12 {
            let mut a = jtj.clone();
            for i in 0..p {
                a[(i, i)] += mu * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = (0..p).map(|i| (theta[i] + step[i]).clamp(lo[i], hi[i])).collect();
            let moved = (0..p).fold(0.0f64, |m, i| m.max((trial[i] - theta[i]).abs()));
            let scale_x = 1.0 + theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            match solve(&trial, Some(sol.coefficients())) {
                Ok(s) if -s.h_value < f => {
                    f = -s.h_value;
                    sol = s;
                    theta = trial;
                    mu = (mu / 3.0).max(1e-12);
                    accepted = true;
                    if moved <= outer.tol * scale_x {
                        converged = true;
                    }
                }
                _ => {
                    if moved <= outer.tol * scale_x * 1e-3 {
                        converged = true;
                        break;
                    }
                    mu *= 4.0;
                }
            }
        }
        if converged || !accepted {
            converged = converged || mu >= 1e12;
            break;
        }
    }
    Ok(OuterFit {
        theta_star_hat: theta,
        solution: sol,
        converged,
        iterations,
    })
}

/// Run the full ladder.
pub fn run_ladder(system: &OdeSystem, data: &Dataset, grid: &KnotGrid, config: &ProfileConfig) -> Result<ProfileFit> {
    run_ladder_observed(system, data, grid, config, |_| {})
}

/// [`run_ladder`] calling `on_rung` after every completed rung, so callers
/// can keep partial progress when a later rung fails.
pub fn run_ladder_observed<F>(
    system: &OdeSystem,
    data: &Dataset,
    grid: &KnotGrid,
    config: &ProfileConfig,
    mut on_rung: F,
) -> Result<ProfileFit>
where
    F: FnMut(&LadderRung),
{
    config.validate(system)?;
    config.check_estimable(system)?;
    let sm = Smoother::new(
        system,
        data,
        grid,
        DEFAULT_SUBDIVISIONS,
        config.component_weights.clone(),
    )?;
    let layout = config.layout(system);
    let box_center = config.theta_star_init();
    let mut theta = box_center.clone();
    let mut warm: Option<Vec<f64>> = None;
    let mut lambda = config.lambda_init;
    let mut rungs: Vec<LadderRung> = Vec::new();
    let mut stopped = StoppedReason::LadderExhausted;

    for _ in 0..config.max_ladder_steps {
        let fit = fit_outer_on(
            &sm,
            &layout,
            lambda,
            &theta,
            &box_center,
            &config.outer,
            config.inner,
            warm.as_deref(),
        )?;
        theta = fit.theta_star_hat.clone();
        warm = Some(fit.solution.coefficients().to_vec());
        let mut rung = LadderRung {
            lambda,
            theta_star: theta.clone(),
            h_value: fit.solution.h_value,
            j_value: fit.solution.j_value,
            inner_converged: fit.solution.converged,
            outer_converged: fit.converged,
            outer_iterations: fit.iterations,
            intervals: None,
            standard_errors: None,
            interval_error: None,
            covariance: None,
            solution: Some(fit.solution),
        };
        if lambda >= config.lambda_threshold * (1.0 - 1e-12) {
            let ci = sensitivities_with(&sm, &layout, &theta, lambda, warm.as_deref())
                .and_then(|s| s.covariance(data))
                .and_then(|cov| Ok((wald_intervals(&theta, &cov, config.ci_level)?, cov)));
            match ci {
                Ok((iv, cov)) => {
                    rung.standard_errors = Some(cov.standard_errors());
                    rung.intervals = Some(iv);
                    rung.covariance = Some(cov);
                }
                Err(e) => rung.interval_error = Some(e.to_string()),
            }
        }
        on_rung(&rung);
        let overlap = match (rungs.last().and_then(|r| r.intervals.as_ref()), rung.intervals.as_ref()) {
            (Some(prev), Some(cur)) => intervals_agree(prev, cur, &theta, config)?,
            _ => false,
        };
        rungs.push(rung);
        if overlap {
            stopped = StoppedReason::Overlap;
            break;
        }
        lambda *= config.lambda_factor;
    }

    let last = rungs.last_mut().expect("at least one rung");
    let solution = last.solution.take().expect("solution kept on the final rung");
    let covariance = last.covariance.clone();
    Ok(ProfileFit {
        spec_version: FORMAT_VERSION.to_string(),
        system: system.name().to_string(),
        names: layout.names(),
        theta_star_hat: last.theta_star.clone(),
        lambda_final: last.lambda,
        h_value: last.h_value,
        j_value: last.j_value,
        stopped_reason: stopped,
        intervals: last.intervals.clone(),
        standard_errors: last.standard_errors.clone(),
        covariance,
        ci_level: config.ci_level,
        ladder_trace: rungs,
        splines: solution.splines,
    })
}

/// Overlap rule for every coordinate of `θ*`.
fn intervals_agree(prev: &[WaldInterval], cur: &[WaldInterval], theta: &[f64], config: &ProfileConfig) -> Result<bool> {
    for (k, (a, b)) in prev.iter().zip(cur).enumerate() {
        let resolution = 2.0 * config.outer.tol * (1.0 + theta[k].abs());
        let (ra, rb) = resolved_overlap_ratios((a.lo, a.hi), (b.lo, b.hi), resolution)?;
        if !(ra > 1.0 - config.alpha && rb > 1.0 - config.alpha) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::Dataset;
    use crate::model::cubic_drift;

    #[test]
    fn overlap_examples() {
        assert_eq!(ci_overlap_ratios((0.0, 2.0), (0.0, 2.0)).unwrap(), (1.0, 1.0));
        assert_eq!(ci_overlap_ratios((0.0, 2.0), (1.0, 3.0)).unwrap(), (0.5, 0.5));
        assert_eq!(ci_overlap_ratios((0.0, 1.0), (2.0, 3.0)).unwrap(), (0.0, 0.0));
        assert_eq!(ci_overlap_ratios((1.0, 1.0), (0.0, 2.0)).unwrap(), (1.0, 0.0));
        assert!(ci_overlap_ratios((1.0, 0.0), (0.0, 2.0)).unwrap_err().is_usage());
        assert_eq!(resolved_overlap_ratios((1.0, 1.0), (1.0 + 1e-9, 1.0 + 1e-9), 1e-6).unwrap(), (1.0, 1.0));
    }

    fn cubic_data() -> (OdeSystem, Dataset, KnotGrid) {
        let sys = cubic_drift();
        let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let rows = times.iter().map(|t| vec![Some(t * t * t)]).collect();
        let data = Dataset::new(times, 1, vec![0], rows).unwrap();
        (sys, data, KnotGrid::uniform(1.0, 10).unwrap())
    }

    #[test]
    fn representable_problem_recovers_theta() {
        let (sys, data, grid) = cubic_data();
        let layout = ThetaLayout::fixed(1, vec![0.0]);
        for lambda in [1e-2, 1.0, 1e3] {
            let fit = fit_outer(&sys, &data, &grid, &layout, lambda, &[0.3]).unwrap();
            assert!((fit.theta_star_hat[0] - 1.0).abs() < 1e-6, "{lambda}: {:?}", fit.theta_star_hat);
        }
    }

    #[test]
    fn implicit_gradient_agrees() {
        let (sys, data, grid) = cubic_data();
        let sm = Smoother::new(&sys, &data, &grid, DEFAULT_SUBDIVISIONS, None).unwrap();
        let layout = ThetaLayout::fixed(1, vec![0.0]);
        let outer = OuterOptions {
            method: OuterMethod::ImplicitGradient,
            ..OuterOptions::default()
        };
        let inner = InnerTolerances { grad_tol: 1e-10, max_iter: 200 };
        let fit = fit_outer_on(&sm, &layout, 1.0, &[0.3], &[0.3], &outer, inner, None).unwrap();
        assert!((fit.theta_star_hat[0] - 1.0).abs() < 1e-6, "{:?}", fit.theta_star_hat);
    }

    #[test]
    fn degenerate_schedules() {
        let (sys, data, grid) = cubic_data();
        let mut cfg = ProfileConfig::new(vec![0.3], InitValueMode::Fixed(vec![0.0]));
        cfg.lambda_init = 100.0;
        cfg.lambda_threshold = 100.0;
        cfg.max_ladder_steps = 1;
        let fit = run_ladder(&sys, &data, &grid, &cfg).unwrap();
        assert_eq!(fit.ladder_trace.len(), 1);
        assert_eq!(fit.stopped_reason, StoppedReason::LadderExhausted);

        let cfg = ProfileConfig::new(vec![0.3], InitValueMode::Fixed(vec![0.0]));
        let fit = run_ladder(&sys, &data, &grid, &cfg).unwrap();
        assert_eq!(fit.stopped_reason, StoppedReason::Overlap);
        // First interval comparison happens at the rung after λ₀.
        assert_eq!(fit.ladder_trace.len(), 6);
        assert!((fit.theta_star_hat[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let sys = cubic_drift();
        let mut cfg = ProfileConfig::new(vec![0.3], InitValueMode::Fixed(vec![0.0]));
        cfg.lambda_factor = 1.0;
        assert!(cfg.validate(&sys).unwrap_err().is_usage());
        let cfg = ProfileConfig::new(vec![0.3, 1.0], InitValueMode::Fixed(vec![0.0]));
        assert!(cfg.validate(&sys).is_err());
    }
}
