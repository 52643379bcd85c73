//! Fit criteria, observation data, the data functional `H_n` and the ODE
//! penalty `J` with its gradient.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::OdeSystem;
use crate::spline::{QuadraturePartition, SplineFunction};

type ScalarFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

#[derive(Clone)]
enum Kind {
    Gaussian,
    Logistic,
    Custom {
        g: Arc<ScalarFn>,
        dg: Arc<ScalarFn>,
        d2g: Arc<ScalarFn>,
    },
}

/// Per-observation loss `g(y, x)` with its first two `x`-derivatives.
#[derive(Clone)]
pub struct FitCriterion {
    name: String,
    kind: Kind,
}

impl fmt::Debug for FitCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FitCriterion").field("name", &self.name).finish()
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squared error `(y − x)²`.
pub fn gaussian_criterion() -> FitCriterion {
    FitCriterion {
        name: "gaussian".into(),
        kind: Kind::Gaussian,
    }
}

/// Bernoulli deviance `log(1 + e^x) − xy` for `y ∈ {0, 1}`.
pub fn logistic_criterion() -> FitCriterion {
    FitCriterion {
        name: "logistic".into(),
        kind: Kind::Logistic,
    }
}

impl FitCriterion {
    /// User-supplied criterion. `g` must be nonnegative.
    pub fn custom<G, D, D2>(name: impl Into<String>, g: G, dg: D, d2g: D2) -> Self
    where
        G: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            kind: Kind::Custom {
                g: Arc::new(g),
                dg: Arc::new(dg),
                d2g: Arc::new(d2g),
            },
        }
    }

    /// Look up a named criterion.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(gaussian_criterion()),
            "logistic" => Ok(logistic_criterion()),
            other => Err(Error::NotFound(format!("no criterion named '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, Kind::Gaussian)
    }

    /// Reject observations outside the criterion's support.
    pub fn check_observation(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::usage(format!("observation {y} is not finite")));
        }
        if matches!(self.kind, Kind::Logistic) && y != 0.0 && y != 1.0 {
            return Err(Error::usage(format!(
                "logistic criterion needs observations in {{0, 1}}, got {y}"
            )));
        }
        Ok(())
    }

    pub fn g(&self, y: f64, x: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian => (y - x) * (y - x),
            Kind::Logistic => softplus(x) - x * y,
            Kind::Custom { g, .. } => g(y, x),
        }
    }

    pub fn dg_dx(&self, y: f64, x: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian => -2.0 * (y - x),
            Kind::Logistic => {
                // σ(x) − y, written to keep full relative precision near 1.
                if y == 1.0 {
                    -sigmoid(-x)
                } else {
                    sigmoid(x) - y
                }
            }
            Kind::Custom { dg, .. } => dg(y, x),
        }
    }

    pub fn d2g_dx2(&self, y: f64, x: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian => 2.0,
            Kind::Logistic => {
                let e = (-x.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Kind::Custom { d2g, .. } => d2g(y, x),
        }
    }
}

/// Observation times, observed values and the observed-component mask.
///
/// Values are stored row-major, one row per time and one column per
/// observed component; `None` marks a missing entry.
#[derive(Debug, Clone)]
pub struct Dataset {
    times: Vec<f64>,
    dim_state: usize,
    observed: Vec<usize>,
    values: Vec<Option<f64>>,
    criteria: Vec<FitCriterion>,
}

/// One present observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub row: usize,
    pub column: usize,
    pub component: usize,
    pub time: f64,
    pub value: f64,
}

impl Dataset {
    /// Gaussian criterion on every column.
    pub fn new(
        times: Vec<f64>,
        dim_state: usize,
        observed: Vec<usize>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let criteria = vec![gaussian_criterion(); observed.len()];
        Self::with_criteria(times, dim_state, observed, rows, criteria)
    }

    pub fn with_criteria(
        times: Vec<f64>,
        dim_state: usize,
        observed: Vec<usize>,
        rows: Vec<Vec<Option<f64>>>,
        criteria: Vec<FitCriterion>,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::usage("a dataset needs at least one observation time"));
        }
        if rows.len() != times.len() {
            return Err(Error::usage(format!(
                "{} value rows for {} times",
                rows.len(),
                times.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::usage(format!("observation time {t} is not in [0, ∞)")));
        }
        for (k, &c) in observed.iter().enumerate() {
            if c >= dim_state {
                return Err(Error::usage(format!(
                    "observed component {c} is not a state index (dim_state = {dim_state})"
                )));
            }
            if observed[..k].contains(&c) {
                return Err(Error::usage(format!("observed component {c} listed twice")));
            }
        }
        if criteria.len() != observed.len() {
            return Err(Error::usage("one criterion per observed column is required"));
        }
        let width = observed.len();
        let mut values = Vec::with_capacity(times.len() * width);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(Error::usage(format!(
                    "row {i} has {} values, expected {width}",
                    row.len()
                )));
            }
            for (k, v) in row.into_iter().enumerate() {
                if let Some(y) = v {
                    criteria[k].check_observation(y)?;
                }
                values.push(v);
            }
        }
        Ok(Self {
            times,
            dim_state,
            observed,
            values,
            criteria,
        })
    }

    /// Replace the criterion of one column.
    pub fn set_criterion(&mut self, column: usize, criterion: FitCriterion) -> Result<()> {
        if column >= self.observed.len() {
            return Err(Error::usage(format!("no observed column {column}")));
        }
        for i in 0..self.n() {
            if let Some(y) = self.value(i, column) {
                criterion.check_observation(y)?;
            }
        }
        self.criteria[column] = criterion;
        Ok(())
    }

    /// Number of observation times.
    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn observed_components(&self) -> &[usize] {
        &self.observed
    }

    pub fn criteria(&self) -> &[FitCriterion] {
        &self.criteria
    }

    pub fn value(&self, row: usize, column: usize) -> Option<f64> {
        self.values[row * self.observed.len() + column]
    }

    /// Observed value of state `component` at `row`, if any.
    pub fn value_of_component(&self, row: usize, component: usize) -> Option<f64> {
        let col = self.observed.iter().position(|&c| c == component)?;
        self.value(row, col)
    }

    /// Present observations in row-major order.
    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        let width = self.observed.len();
        self.values.iter().enumerate().filter_map(move |(k, v)| {
            v.map(|value| {
                let row = k / width;
                let column = k % width;
                Observation {
                    row,
                    column,
                    component: self.observed[column],
                    time: self.times[row],
                    value,
                }
            })
        })
    }

    /// Check the dataset against a system's dimension and horizon.
    pub fn check_against(&self, system: &OdeSystem) -> Result<()> {
        if self.dim_state != system.dim_state() {
            return Err(Error::usage(format!(
                "dataset has {} state columns but {} has dimension {}",
                self.dim_state,
                system.name(),
                system.dim_state()
            )));
        }
        let hi = system.time_horizon();
        if let Some(&t) = self.times.iter().find(|&&t| t > hi * (1.0 + 1e-12)) {
            return Err(Error::usage(format!(
                "observation time {t} lies beyond the horizon {hi} of {}",
                system.name()
            )));
        }
        Ok(())
    }
}

/// `H_n = −(1/n) Σ_i Σ_observed g(Y_i, x(T_i))` for a trajectory given as
/// `traj(component, t)`.
pub fn eval_hn<F>(data: &Dataset, mut traj: F) -> Result<f64>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let mut sum = 0.0;
    for obs in data.observations() {
        let x = traj(obs.component, obs.time)?;
        let g = data.criteria[obs.column].g(obs.value, x);
        if !g.is_finite() {
            return Err(Error::Evaluation {
                t: obs.time,
                state: vec![x],
                what: format!("criterion value {g} at observation row {}, column {}", obs.row, obs.column),
            });
        }
        sum += g;
    }
    Ok(-sum / data.n() as f64)
}

/// Gradient of `J` with respect to every spline coefficient and the
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGradient {
    /// One vector per state component, aligned with that spline's coefficients.
    pub coeffs: Vec<Vec<f64>>,
    pub params: Vec<f64>,
}

fn check_splines(system: &OdeSystem, splines: &[SplineFunction]) -> Result<()> {
    if splines.len() != system.dim_state() {
        return Err(Error::usage(format!(
            "{} splines for a {}-dimensional system",
            splines.len(),
            system.dim_state()
        )));
    }
    if splines.iter().any(|s| s.grid() != splines[0].grid()) {
        return Err(Error::usage("all splines must share one knot grid"));
    }
    Ok(())
}

/// `J = Σ_c ∫ (x̂_c' − F_c(x̂, t, θ))² dt` by composite Simpson.
pub fn eval_penalty(
    system: &OdeSystem,
    splines: &[SplineFunction],
    params: &[f64],
    partition: &QuadraturePartition,
) -> Result<f64> {
    check_splines(system, splines)?;
    let d = system.dim_state();
    let mut x = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut sum = 0.0;
    for (&t, &w) in partition.nodes().iter().zip(partition.weights()) {
        spline_state(splines, t, &mut x, &mut dx)?;
        system.field_into(&x, t, params, &mut f)?;
        let r2: f64 = dx.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += w * r2;
    }
    Ok(sum)
}

/// Chain-rule gradient of [`eval_penalty`].
pub fn penalty_gradient(
    system: &OdeSystem,
    splines: &[SplineFunction],
    params: &[f64],
    partition: &QuadraturePartition,
) -> Result<PenaltyGradient> {
    check_splines(system, splines)?;
    let d = system.dim_state();
    let p = system.dim_params();
    let grid = splines[0].grid();
    let ord = grid.order();
    let mut out = PenaltyGradient {
        coeffs: vec![vec![0.0; grid.dim()]; d],
        params: vec![0.0; p],
    };
    let mut x = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut r = vec![0.0; d];
    let mut jx = vec![0.0; d * d];
    let mut jp = vec![0.0; d * p];
    for (&t, &w) in partition.nodes().iter().zip(partition.weights()) {
        let (first, ders) = grid.basis_derivs(t, 1)?;
        for a in 0..d {
            let c = &splines[a].coeffs()[first..first + ord];
            x[a] = (0..ord).map(|k| ders[k] * c[k]).sum();
            r[a] = (0..ord).map(|k| ders[ord + k] * c[k]).sum();
        }
        system.field_into(&x, t, params, &mut f)?;
        system.partials_into(&x, t, params, &mut jx, &mut jp)?;
        for a in 0..d {
            r[a] -= f[a];
        }
        for a in 0..d {
            // Σ_b r_b ∂r_b/∂x_a
            let s: f64 = (0..d).map(|b| r[b] * jx[b * d + a]).sum();
            let g = &mut out.coeffs[a];
            for k in 0..ord {
                g[first + k] += 2.0 * w * (r[a] * ders[ord + k] - s * ders[k]);
            }
        }
        for k in 0..p {
            let s: f64 = (0..d).map(|b| r[b] * jp[b * p + k]).sum();
            out.params[k] -= 2.0 * w * s;
        }
    }
    Ok(out)
}

fn spline_state(splines: &[SplineFunction], t: f64, x: &mut [f64], dx: &mut [f64]) -> Result<()> {
    let grid = splines[0].grid();
    let ord = grid.order();
    let (first, ders) = grid.basis_derivs(t, 1)?;
    for (a, s) in splines.iter().enumerate() {
        let c = &s.coeffs()[first..first + ord];
        x[a] = (0..ord).map(|k| ders[k] * c[k]).sum();
        dx[a] = (0..ord).map(|k| ders[ord + k] * c[k]).sum();
    }
    Ok(())
}
