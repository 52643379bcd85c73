//! Checks of the estimator against its theory: the `λ → ∞` limit of the
//! inner solution, the decay of `J` in `λ`, the a-posteriori deviation bound
//! for scalar systems with a contracting field, and the monotonicity of the
//! `(H, J)` traces along a ladder.
//!
//! These routines may call the RK4 oracle; the estimator never does.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::criteria::Dataset;
use crate::error::{Error, Result};
use crate::model::OdeSystem;
use crate::reference::{rk4_default, Trajectory};
use crate::smoother::{InnerTolerances, Smoother, ThetaLayout};
use crate::spline::{c1, KnotGrid, SplineFunction, DEFAULT_SUBDIVISIONS};

/// Rung limit of [`lambda_limit`].
pub const MAX_LIMIT_RUNGS: usize = 20;

/// Inflation applied to sampled suprema.
pub const SUP_INFLATION: f64 = 1.1;

/// Number of sample points used for each supremum over a tube.
pub const TUBE_SAMPLES: usize = 10_000;

fn limit_tolerances() -> InnerTolerances {
    InnerTolerances {
        grad_tol: 1e-10,
        max_iter: 2000,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaLadderTrace {
    pub lambdas: Vec<f64>,
    pub j_values: Vec<f64>,
    pub h_values: Vec<f64>,
    /// Interleaved coefficients per rung.
    pub coeff_snapshots: Vec<Vec<f64>>,
    /// Largest coefficient change from the previous rung; an upper bound on
    /// the sup-norm change of the splines.
    pub sup_changes: Vec<f64>,
    /// Whether each rung's inner solve met its gradient tolerance.
    pub inner_converged: Vec<bool>,
    pub limit_coeffs: Option<Vec<f64>>,
    pub converged: bool,
    /// Every rung's `J` is at most the previous one plus `1e-8`.
    pub j_nonincreasing: bool,
    #[serde(skip)]
    pub dim_state: usize,
}

impl LambdaLadderTrace {
    /// Builds a trace from given values, e.g. for auditing external runs.
    pub fn from_values(lambdas: Vec<f64>, h_values: Vec<f64>, j_values: Vec<f64>) -> Result<Self> {
        if lambdas.len() != h_values.len() || lambdas.len() != j_values.len() {
            return Err(Error::usage("trace arrays must have equal length"));
        }
        if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::usage("trace lambdas must be strictly increasing"));
        }
        let j_nonincreasing = j_values.windows(2).all(|w| w[1] <= w[0] + 1e-8);
        Ok(Self {
            lambdas,
            j_values,
            h_values,
            coeff_snapshots: Vec::new(),
            sup_changes: Vec::new(),
            inner_converged: Vec::new(),
            limit_coeffs: None,
            converged: false,
            j_nonincreasing,
            dim_state: 0,
        })
    }

    /// Per-component splines of the limit, if the ladder stalled.
    pub fn limit_splines(&self, grid: &KnotGrid) -> Option<Vec<SplineFunction>> {
        self.limit_coeffs.as_ref().map(|c| split_splines(grid, c, self.dim_state))
    }

    /// Per-component splines at rung `k`.
    pub fn rung_splines(&self, grid: &KnotGrid, k: usize) -> Option<Vec<SplineFunction>> {
        self.coeff_snapshots.get(k).map(|c| split_splines(grid, c, self.dim_state))
    }
}

fn split_splines(grid: &KnotGrid, c: &[f64], d: usize) -> Vec<SplineFunction> {
    (0..d)
        .map(|a| {
            let coeffs = c.iter().skip(a).step_by(d).copied().collect();
            SplineFunction::new(grid.clone(), coeffs).expect("coefficient count matches grid")
        })
        .collect()
}

/// Escalate `λ` at fixed `θ*` until the spline stops moving.
///
/// `stall_tol` defaults to `1e-6·(1 + ‖x̂‖∞)`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_limit(
    system: &OdeSystem,
    data: &Dataset,
    grid: &KnotGrid,
    layout: &ThetaLayout,
    theta_star: &[f64],
    lambda_start: f64,
    factor: f64,
    stall_tol: Option<f64>,
) -> Result<LambdaLadderTrace> {
    if !(factor > 1.0) || !(lambda_start > 0.0) {
        return Err(Error::usage("lambda_start must be positive and factor above 1"));
    }
    let sm = Smoother::new(system, data, grid, DEFAULT_SUBDIVISIONS, None)?;
    let (params, init) = layout.split(theta_star)?;
    let mut trace = LambdaLadderTrace {
        lambdas: Vec::new(),
        j_values: Vec::new(),
        h_values: Vec::new(),
        coeff_snapshots: Vec::new(),
        sup_changes: Vec::new(),
        inner_converged: Vec::new(),
        limit_coeffs: None,
        converged: false,
        j_nonincreasing: true,
        dim_state: system.dim_state(),
    };
    let mut lambda = lambda_start;
    let mut warm: Option<Vec<f64>> = None;
    for _ in 0..MAX_LIMIT_RUNGS {
        let sol = sm.solve(&params, &init, lambda, warm.as_deref(), limit_tolerances())?;
        let c = sol.coefficients().to_vec();
        let change = match &warm {
            Some(prev) => prev.iter().zip(&c).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
            None => f64::INFINITY,
        };
        if let Some(&jp) = trace.j_values.last() {
            if sol.j_value > jp + 1e-8 {
                trace.j_nonincreasing = false;
            }
        }
        trace.lambdas.push(lambda);
        trace.j_values.push(sol.j_value);
        trace.h_values.push(sol.h_value);
        trace.sup_changes.push(change);
        trace.inner_converged.push(sol.converged);
        let tol = stall_tol.unwrap_or(1e-6 * (1.0 + Smoother::coeff_sup(&c)));
        trace.coeff_snapshots.push(c.clone());
        if change < tol {
            trace.limit_coeffs = Some(c);
            trace.converged = true;
            break;
        }
        warm = Some(c);
        lambda *= factor;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Serialize)]
pub struct Thm31Report {
    pub lambdas: Vec<f64>,
    pub j_values: Vec<f64>,
    /// Rungs used for the slope fit.
    pub unsaturated: usize,
    pub slope: Option<f64>,
    /// Reason the slope is missing.
    pub slope_undefined: Option<String>,
    pub floor_estimate: f64,
    pub theoretical_floor: f64,
    pub lipschitz_k: f64,
    pub k4: f64,
    pub tau: f64,
    pub r_hat: f64,
}

/// Fit the decay of `J(λ)` at fixed `θ*` and compare its floor with
/// `8T(8K² + 2) r̂²`, `r̂ = C₁ K₄ |τ|³`.
pub fn thm31_probe(
    system: &OdeSystem,
    data: &Dataset,
    grid: &KnotGrid,
    layout: &ThetaLayout,
    theta_star: &[f64],
    lambda_grid: &[f64],
) -> Result<Thm31Report> {
    if lambda_grid.is_empty() || lambda_grid.windows(2).any(|w| !(w[1] > w[0])) || lambda_grid[0] <= 0.0 {
        return Err(Error::usage("lambda grid must be positive and strictly increasing"));
    }
    let sm = Smoother::new(system, data, grid, DEFAULT_SUBDIVISIONS, None)?;
    let (params, init) = layout.split(theta_star)?;
    let mut j_values = Vec::with_capacity(lambda_grid.len());
    let mut warm: Option<Vec<f64>> = None;
    for &lambda in lambda_grid {
        let sol = sm.solve(&params, &init, lambda, warm.as_deref(), limit_tolerances())?;
        j_values.push(sol.j_value);
        warm = Some(sol.coefficients().to_vec());
    }
    let floor = j_values.iter().copied().fold(f64::INFINITY, f64::min);
    let unsaturated = j_values.iter().take_while(|&&j| j > 1.1 * floor).count();
    let decades = (lambda_grid[lambda_grid.len() - 1] / lambda_grid[0]).log10();
    let (slope, slope_undefined) = if decades < 4.0 - 1e-9 {
        (None, Some(format!("lambda grid spans {decades:.2} decades, at least 4 needed")))
    } else if unsaturated < 2 {
        (None, Some("fewer than two rungs above the floor".to_string()))
    } else {
        let xs: Vec<f64> = lambda_grid[..unsaturated].iter().map(|l| l.ln()).collect();
        let ys: Vec<f64> = j_values[..unsaturated].iter().map(|j| j.ln()).collect();
        (Some(least_squares_slope(&xs, &ys)), None)
    };

    let truth = rk4_default(system, &params, &init)?;
    let lipschitz_k = tube_lipschitz(system, &params, &truth, 1.0)?;
    let k4 = fd_derivative_sup(&truth, 4);
    let tau = grid.mesh_width();
    let r_hat = c1() * k4 * tau.powi(3);
    let horizon = system.time_horizon();
    Ok(Thm31Report {
        lambdas: lambda_grid.to_vec(),
        j_values,
        unsaturated,
        slope,
        slope_undefined,
        floor_estimate: floor,
        theoretical_floor: 8.0 * horizon * (8.0 * lipschitz_k * lipschitz_k + 2.0) * r_hat * r_hat,
        lipschitz_k,
        k4,
        tau,
        r_hat,
    })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Sampled `sup ‖F_x‖∞` (max absolute row sum) over `|x − x(t)|∞ ≤ radius`,
/// inflated by [`SUP_INFLATION`].
fn tube_lipschitz(system: &OdeSystem, params: &[f64], truth: &Trajectory, radius: f64) -> Result<f64> {
    let d = system.dim_state();
    let p = system.dim_params();
    let horizon = system.time_horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7475_6265);
    let mut jx = vec![0.0; d * d];
    let mut jp = vec![0.0; d * p];
    let mut sup = 0.0f64;
    for s in 0..TUBE_SAMPLES {
        let t = horizon * s as f64 / (TUBE_SAMPLES - 1) as f64;
        let mut x = truth.eval(t)?;
        if s % 2 == 1 {
            for v in x.iter_mut() {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                *v += radius * (2.0 * u - 1.0);
            }
        }
        system.partials_into(&x, t, params, &mut jx, &mut jp)?;
        for a in 0..d {
            sup = sup.max((0..d).map(|b| jx[a * d + b].abs()).sum());
        }
    }
    Ok(SUP_INFLATION * sup)
}

/// `max_a sup_t |x_a^{(k)}(t)|` for `k ∈ {1, 2, 4}` by centered
/// differences of the trajectory values on a stride of about `T/400`.
fn fd_derivative_sup(truth: &Trajectory, k: usize) -> f64 {
    let times = truth.times();
    let values = truth.values();
    let n = times.len();
    let step = (times[n - 1] - times[0]) / (n - 1) as f64;
    let stride = (((times[n - 1] - times[0]) / 400.0) / step).round().max(1.0) as usize;
    let h = stride as f64 * step;
    let mut sup = 0.0f64;
    for a in 0..truth.dim() {
        let v = |i: usize| values[i][a];
        for i in 2 * stride..n.saturating_sub(2 * stride) {
            let est = match k {
                1 => (v(i - 2 * stride) - 8.0 * v(i - stride) + 8.0 * v(i + stride) - v(i + 2 * stride)) / (12.0 * h),
                2 => (-v(i - 2 * stride) + 16.0 * v(i - stride) - 30.0 * v(i) + 16.0 * v(i + stride)
                    - v(i + 2 * stride))
                    / (12.0 * h * h),
                4 => (v(i - 2 * stride) - 4.0 * v(i - stride) + 6.0 * v(i) - 4.0 * v(i + stride) + v(i + 2 * stride))
                    / h.powi(4),
                _ => unreachable!("unsupported derivative order"),
            };
            sup = sup.max(est.abs());
        }
    }
    sup
}

#[derive(Debug, Clone, Serialize)]
pub struct Thm41Constants {
    #[serde(rename = "K0")]
    pub k0: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    #[serde(rename = "K4")]
    pub k4: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    pub gamma: f64,
    pub delta2: f64,
    pub kappa: f64,
    pub tau_width: f64,
    pub horizon: f64,
    pub second_derivative_l2: f64,
    pub betas: [f64; 6],
    /// The five terms of the bound, in order.
    pub terms: [f64; 5],
}

/// Deviation bound `‖x − x̂₀‖∞ < β₁κ‖x̂₀''‖_{L²}|τ|^{1/2} + β₂κ|τ|
/// + κ(4√(6κ) + β₃)β₄√T|τ|^{3/2} + β₅√T|τ|³ + β₆√T|τ|^{7/2}` for a scalar
/// system with `F_x < 0` along its solution from `init`.
pub fn thm41_bound(
    system: &OdeSystem,
    params: &[f64],
    init: &[f64],
    spline_candidate: &SplineFunction,
    grid: &KnotGrid,
) -> Result<(f64, Thm41Constants)> {
    if system.dim_state() != 1 {
        return Err(Error::Unsupported(format!(
            "the deviation bound is one-dimensional; {} has {} states",
            system.name(),
            system.dim_state()
        )));
    }
    let tau = grid.mesh_width();
    if tau > 1.0 {
        return Err(Error::Precondition(format!("mesh width {tau} exceeds 1")));
    }
    let horizon = system.time_horizon();
    let truth = rk4_default(system, params, init)?;
    let p = system.dim_params();
    let fx = |x: f64, t: f64| -> Result<f64> {
        let mut jx = [0.0];
        let mut jp = vec![0.0; p];
        system.partials_into(&[x], t, params, &mut jx, &mut jp)?;
        Ok(jx[0])
    };
    let f = |x: f64, t: f64| -> Result<f64> { Ok(system.eval_field(&[x], t, params)?[0]) };
    let ft = |x: f64, t: f64| -> Result<f64> {
        let h = 1e-6 * t.abs().max(1.0);
        let (lo, hi) = ((t - h).max(0.0), (t + h).min(horizon));
        Ok((f(x, hi)? - f(x, lo)?) / (hi - lo))
    };

    let r = truth.values().iter().fold(0.0f64, |m, v| m.max(v[0].abs()));
    let r1 = truth.slopes().iter().fold(0.0f64, |m, v| m.max(v[0].abs()));
    let k2 = fd_derivative_sup(&truth, 2);
    let k4 = fd_derivative_sup(&truth, 4);

    // Sups over [−R−1, R+1] × [0, T].
    let side = (TUBE_SAMPLES as f64).sqrt() as usize;
    let (mut k0, mut k, mut kt) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..side {
        let t = horizon * i as f64 / (side - 1) as f64;
        for j in 0..side {
            let x = -(r + 1.0) + 2.0 * (r + 1.0) * j as f64 / (side - 1) as f64;
            k0 = k0.max(f(x, t)?.abs());
            k = k.max(fx(x, t)?.abs());
            kt = kt.max(ft(x, t)?.abs());
        }
    }
    let (k0, k) = (SUP_INFLATION * k0, SUP_INFLATION * k);
    let k1 = k.max(SUP_INFLATION * kt);

    // γ: shrink the tube around the solution until F_x < 0 on it.
    let mut delta = 0.5;
    let gamma = loop {
        let mut sup = f64::NEG_INFINITY;
        for i in 0..side {
            let t = horizon * i as f64 / (side - 1) as f64;
            let xt = truth.eval_component(0, t)?;
            for j in 0..side {
                let x = xt - delta + 2.0 * delta * j as f64 / (side - 1) as f64;
                sup = sup.max(fx(x, t)?);
            }
        }
        if sup < 0.0 {
            break -sup;
        }
        delta *= 0.5;
        if delta < 1e-8 {
            return Err(Error::Precondition(format!(
                "F_x is not negative along the solution of {} (sup {sup})",
                system.name()
            )));
        }
    };

    let kappa = grid.mesh_ratio();
    let c1 = c1();
    let s3 = 3f64.sqrt();
    let g2 = gamma * gamma;
    let root = (4.0 * k * k + 2.0).sqrt();
    let betas = [
        8.0 * k1 / (s3 * g2),
        (8.0 * k1 * k2 + 8.0 * k1 * k1 * (r1 + 1.0) + 8.0 * k1 * k1 * (k0 + 1.0)) / g2,
        16.0 * k1 * k1 / s3,
        root * c1 * k4 / g2,
        root * c1 * k4,
        8.0 * k1 * k1 / s3 * root * c1 * k4,
    ];
    let l2 = second_derivative_l2(spline_candidate)?;
    let st = horizon.sqrt();
    let terms = [
        betas[0] * kappa * l2 * tau.sqrt(),
        betas[1] * kappa * tau,
        kappa * (4.0 * (6.0 * kappa).sqrt() + betas[2]) * betas[3] * st * tau.powf(1.5),
        betas[4] * st * tau.powi(3),
        betas[5] * st * tau.powf(3.5),
    ];
    let bound = terms.iter().sum();
    Ok((
        bound,
        Thm41Constants {
            k0,
            k,
            k1,
            k2,
            k4,
            r,
            r1,
            gamma,
            delta2: delta,
            kappa,
            tau_width: tau,
            horizon,
            second_derivative_l2: l2,
            betas,
            terms,
        },
    ))
}

/// `‖s''‖_{L²}` by Simpson's rule on each knot cell, using the one-sided
/// values of the piecewise-linear second derivative.
pub fn second_derivative_l2(s: &SplineFunction) -> Result<f64> {
    let bp = s.grid().breakpoints();
    let mut sum = 0.0;
    for w in bp.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let f0 = s.eval(a, 2)?;
        let fm = s.eval(mid, 2)?;
        let f1 = 2.0 * fm - f0;
        sum += (b - a) / 6.0 * (f0 * f0 + 4.0 * fm * fm + f1 * f1);
    }
    Ok(sum.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    JIncreased,
    HIncreased,
    LowerSandwich,
    UpperSandwich,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    /// Index of the later rung of the offending pair.
    pub rung: usize,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Lemma2Tolerances {
    /// Absolute slack on the monotone decrease of `J` and `H`.
    pub monotone: f64,
    /// Slack on the sandwich inequalities, relative to `1 + |H|`.
    pub sandwich: f64,
}

impl Default for Lemma2Tolerances {
    fn default() -> Self {
        Self {
            monotone: 1e-8,
            sandwich: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma2Audit {
    pub pairs_checked: usize,
    pub violations: Vec<Violation>,
}

impl Lemma2Audit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check `J` and `H` decrease rung to rung and
/// `λ_m(J_m − J_{m+1}) ≤ H_m − H_{m+1} ≤ λ_{m+1}(J_m − J_{m+1})`.
pub fn lemma2_audit(trace: &LambdaLadderTrace) -> Lemma2Audit {
    lemma2_audit_with(trace, Lemma2Tolerances::default())
}

pub fn lemma2_audit_with(trace: &LambdaLadderTrace, tol: Lemma2Tolerances) -> Lemma2Audit {
    let mut violations = Vec::new();
    let n = trace.lambdas.len();
    for m in 0..n.saturating_sub(1) {
        let (l0, l1) = (trace.lambdas[m], trace.lambdas[m + 1]);
        let (h0, h1) = (trace.h_values[m], trace.h_values[m + 1]);
        let (j0, j1) = (trace.j_values[m], trace.j_values[m + 1]);
        let rung = m + 1;
        if j1 - j0 > tol.monotone {
            violations.push(Violation {
                rung,
                kind: ViolationKind::JIncreased,
                magnitude: j1 - j0,
            });
        }
        if h1 - h0 > tol.monotone {
            violations.push(Violation {
                rung,
                kind: ViolationKind::HIncreased,
                magnitude: h1 - h0,
            });
        }
        let slack = tol.sandwich * (1.0 + h0.abs());
        let dh = h0 - h1;
        let dj = j0 - j1;
        if l0 * dj - dh > slack {
            violations.push(Violation {
                rung,
                kind: ViolationKind::LowerSandwich,
                magnitude: l0 * dj - dh,
            });
        }
        if dh - l1 * dj > slack {
            violations.push(Violation {
                rung,
                kind: ViolationKind::UpperSandwich,
                magnitude: dh - l1 * dj,
            });
        }
    }
    Lemma2Audit {
        pairs_checked: n.saturating_sub(1),
        violations,
    }
}

/// `(t, x̂_a(t) − x_a(t))` on `points` equally spaced times.
pub fn difference_curve(splines: &[SplineFunction], truth: &Trajectory, points: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let horizon = truth.end_time();
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let t = horizon * i as f64 / (points - 1) as f64;
            let x = truth.eval(t)?;
            let diffs = splines
                .iter()
                .zip(&x)
                .map(|(s, xv)| Ok(s.eval(t, 0)? - xv))
                .collect::<Result<Vec<_>>>()?;
            Ok((t, diffs))
        })
        .collect()
}
