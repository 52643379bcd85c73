//! Verification oracles: fixed-step RK4, variational sensitivities and the
//! noisy-data simulator. Nothing in the estimator depends on this module.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::criteria::Dataset;
use crate::error::{Error, Result};
use crate::model::OdeSystem;

/// Number of RK4 steps used when no step is given.
pub const DEFAULT_STEPS: usize = 4000;

/// A solution sampled on a uniform grid, with cubic Hermite interpolation
/// between grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, slopes: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || values.len() != times.len() || slopes.len() != times.len() {
            return Err(Error::usage("trajectory arrays must be nonempty and of equal length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::usage("trajectory times must be strictly increasing"));
        }
        Ok(Self {
            times,
            values,
            slopes,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// One row per time.
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn slopes(&self) -> &[Vec<f64>] {
        &self.slopes
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = (self.times[0], self.end_time());
        let slack = 1e-12 * hi.abs().max(1.0);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::Domain { t, lo, hi });
        }
        let t = t.clamp(lo, hi);
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        let i = i.min(self.times.len().saturating_sub(2));
        Ok((i, t))
    }

    /// State at `t`. Grid times return the stored values exactly.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        (0..self.dim()).map(|a| self.eval_component(a, t)).collect()
    }

    pub fn eval_component(&self, a: usize, t: f64) -> Result<f64> {
        self.hermite(a, t, 0)
    }

    /// Derivative of the interpolant at `t`.
    pub fn eval_slope(&self, a: usize, t: f64) -> Result<f64> {
        self.hermite(a, t, 1)
    }

    fn hermite(&self, a: usize, t: f64, deriv: usize) -> Result<f64> {
        if self.times.len() == 1 {
            return Ok(if deriv == 0 { self.values[0][a] } else { self.slopes[0][a] });
        }
        let (i, t) = self.locate(t)?;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let snap = 1e-12 * t1.abs().max(1.0);
        if deriv == 0 {
            if (t - t0).abs() <= snap {
                return Ok(self.values[i][a]);
            }
            if (t - t1).abs() <= snap {
                return Ok(self.values[i + 1][a]);
            }
        }
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (y0, y1) = (self.values[i][a], self.values[i + 1][a]);
        let (m0, m1) = (self.slopes[i][a] * h, self.slopes[i + 1][a] * h);
        if deriv == 0 {
            let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
            let h10 = s * (1.0 - s) * (1.0 - s);
            let h01 = s * s * (3.0 - 2.0 * s);
            let h11 = s * s * (s - 1.0);
            Ok(h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1)
        } else {
            let d00 = 6.0 * s * s - 6.0 * s;
            let d10 = 3.0 * s * s - 4.0 * s + 1.0;
            let d01 = -d00;
            let d11 = 3.0 * s * s - 2.0 * s;
            Ok((d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1) / h)
        }
    }
}

struct Rk4Output {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

fn step_count(horizon: f64, step: f64) -> Result<usize> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::usage(format!("RK4 step must be positive, got {step}")));
    }
    Ok(((horizon / step) - 1e-9).ceil().max(1.0) as usize)
}

/// Classical RK4 on `n` uniform steps over `[0, horizon]`.
fn rk4_core<F>(mut rhs: F, y0: &[f64], horizon: f64, n: usize) -> Result<Rk4Output>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let dim = y0.len();
    let h = horizon / n as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut values = Vec::with_capacity(n + 1);
    let mut slopes = Vec::with_capacity(n + 1);
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let blow_up = |t: f64, state: &[f64]| Error::BlowUp {
        last_time: t,
        last_state: state.to_vec(),
    };
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("initial state must be finite"));
    }
    for i in 0..=n {
        let t = if i == n { horizon } else { i as f64 * h };
        if rhs(t, &y, &mut k1).is_err() || k1.iter().any(|v| !v.is_finite()) {
            return Err(blow_up(t, &y));
        }
        times.push(t);
        values.push(y.clone());
        slopes.push(k1.clone());
        if i == n {
            break;
        }
        let stage = |y: &[f64], k: &[f64], c: f64, out: &mut [f64]| {
            for j in 0..dim {
                out[j] = y[j] + c * k[j];
            }
        };
        stage(&y, &k1, 0.5 * h, &mut tmp);
        let ok = rhs(t + 0.5 * h, &tmp, &mut k2).is_ok();
        stage(&y, &k2, 0.5 * h, &mut tmp);
        let ok = ok && rhs(t + 0.5 * h, &tmp, &mut k3).is_ok();
        stage(&y, &k3, h, &mut tmp);
        let t_next = if i + 1 == n { horizon } else { (i + 1) as f64 * h };
        let ok = ok && rhs(t_next, &tmp, &mut k4).is_ok();
        if !ok {
            return Err(blow_up(t, &y));
        }
        for j in 0..dim {
            tmp[j] = y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if tmp.iter().any(|v| !v.is_finite()) {
            return Err(blow_up(t, &y));
        }
        y.copy_from_slice(&tmp);
    }
    Ok(Rk4Output {
        times,
        values,
        slopes,
    })
}

/// Fixed-step RK4 solution over the system's horizon. The step is adjusted
/// down so that it divides the horizon.
pub fn rk4_solve(system: &OdeSystem, params: &[f64], init: &[f64], step: f64) -> Result<Trajectory> {
    if init.len() != system.dim_state() || params.len() != system.dim_params() {
        return Err(Error::usage("initial state or parameter length does not match the system"));
    }
    let horizon = system.time_horizon();
    let n = step_count(horizon, step)?;
    let out = rk4_core(|t, y, out| system.field_into(y, t, params, out), init, horizon, n)?;
    Trajectory::new(out.times, out.values, out.slopes)
}

/// RK4 with the default step `T / 4000`.
pub fn rk4_default(system: &OdeSystem, params: &[f64], init: &[f64]) -> Result<Trajectory> {
    rk4_solve(system, params, init, system.time_horizon() / DEFAULT_STEPS as f64)
}

/// State trajectory together with `∂x/∂θ*` trajectories.
#[derive(Debug, Clone)]
pub struct SensitivityTrajectory {
    pub state: Trajectory,
    /// One trajectory per `θ*` coordinate: parameters first, then the
    /// estimated initial values in the order requested.
    pub columns: Vec<Trajectory>,
}

/// Integrate the variational system `S' = F_x S + F_θ` alongside the state.
/// Parameter columns start at zero; the column for initial value `a` starts
/// at the unit vector `e_a`.
pub fn solve_sensitivities(
    system: &OdeSystem,
    params: &[f64],
    init: &[f64],
    step: f64,
    estimated_init: &[usize],
) -> Result<SensitivityTrajectory> {
    let d = system.dim_state();
    let p = system.dim_params();
    if init.len() != d || params.len() != p {
        return Err(Error::usage("initial state or parameter length does not match the system"));
    }
    if let Some(&a) = estimated_init.iter().find(|&&a| a >= d) {
        return Err(Error::usage(format!("initial-value index {a} is not a state index")));
    }
    let cols = p + estimated_init.len();
    let mut y0 = vec![0.0; d * (1 + cols)];
    y0[..d].copy_from_slice(init);
    for (k, &a) in estimated_init.iter().enumerate() {
        y0[d * (1 + p + k) + a] = 1.0;
    }
    let mut jx = vec![0.0; d * d];
    let mut jp = vec![0.0; d * p];
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let x = &y[..d];
        system.field_into(x, t, params, &mut out[..d])?;
        system.partials_into(x, t, params, &mut jx, &mut jp)?;
        for k in 0..cols {
            let s = &y[d * (1 + k)..d * (2 + k)];
            for i in 0..d {
                let mut v: f64 = (0..d).map(|j| jx[i * d + j] * s[j]).sum();
                if k < p {
                    v += jp[i * p + k];
                }
                out[d * (1 + k) + i] = v;
            }
        }
        Ok(())
    };
    let horizon = system.time_horizon();
    let out = rk4_core(rhs, &y0, horizon, step_count(horizon, step)?)?;
    let split = |lo: usize, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r[lo..lo + d].to_vec()).collect()
    };
    let state = Trajectory::new(out.times.clone(), split(0, &out.values), split(0, &out.slopes))?;
    let columns = (0..cols)
        .map(|k| {
            Trajectory::new(
                out.times.clone(),
                split(d * (1 + k), &out.values),
                split(d * (1 + k), &out.slopes),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityTrajectory { state, columns })
}

/// Seeded standard normal draws: ChaCha8 stream, Box–Muller pairs.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform_open0();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }
}

/// Noisy observations of the RK4 solution.
///
/// `noise_sd` holds one standard deviation per state component (or a single
/// value for all). Draws are made row by row over the observed components.
pub fn simulate_dataset(
    system: &OdeSystem,
    params: &[f64],
    init: &[f64],
    times: &[f64],
    noise_sd: &[f64],
    seed: u64,
    observed: &[usize],
) -> Result<Dataset> {
    let d = system.dim_state();
    let sd: Vec<f64> = match noise_sd.len() {
        1 => vec![noise_sd[0]; d],
        n if n == d => noise_sd.to_vec(),
        n => {
            return Err(Error::usage(format!(
                "{n} noise levels given for a {d}-dimensional system"
            )))
        }
    };
    if sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::usage("noise standard deviations must be nonnegative"));
    }
    let horizon = system.time_horizon();
    if let Some(&t) = times.iter().find(|&&t| !(t >= 0.0 && t <= horizon * (1.0 + 1e-12))) {
        return Err(Error::usage(format!(
            "simulation time {t} is outside [0, {horizon}]"
        )));
    }
    let truth = rk4_default(system, params, init)?;
    let mut noise = NormalStream::new(seed);
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let state = truth.eval(t.min(horizon))?;
        rows.push(
            observed
                .iter()
                .map(|&a| Some(state[a] + sd[a] * noise.next_normal()))
                .collect(),
        );
    }
    Dataset::new(times.to_vec(), d, observed.to_vec(), rows)
}

/// One row of the exponential-growth sensitivity table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Remark5Row {
    pub t: f64,
    /// `|ŷ(t) − y(t)|` with `ŷ` built explicitly.
    pub deviation: f64,
    /// `|ε| (e^t − 1)`.
    pub closed_form: f64,
}

/// For `dy/dt = y`, `y(0) = 1`, the approximation `ŷ` with constant residual
/// `dŷ/dt − ŷ = ε` is `ŷ(t) = e^t + ε(e^t − 1)`. Tabulates its deviation on
/// `points` equally spaced times in `[0, horizon]`.
pub fn remark5_demo(epsilon: f64, horizon: f64, points: usize) -> Vec<Remark5Row> {
    let y0 = 1.0;
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let t = horizon * i as f64 / (points - 1) as f64;
            let y = y0 * t.exp();
            let y_hat = y0 * t.exp() + epsilon * t.exp_m1();
            Remark5Row {
                t,
                deviation: (y_hat - y).abs(),
                closed_form: epsilon.abs() * t.exp_m1(),
            }
        })
        .collect()
}
