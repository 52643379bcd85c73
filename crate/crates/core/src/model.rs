//! Parameterized ODE systems `dx/dt = F(x, t, θ)` on a finite horizon `[0, T]`.
//!
//! A system is a value: an evaluator for the vector field plus optional
//! analytic Jacobians with respect to the state and the parameters. When a
//! Jacobian is missing, central finite differences stand in for it. Which
//! state components are observed is a property of the data, not of the
//! system.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Vector field evaluator: `(state, t, params, out)`.
pub type FieldFn = dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync;

/// Jacobian evaluator writing a row-major matrix into `out`.
pub type JacobianFn = dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync;

/// Slack allowed when checking that `t` lies in `[0, T]`.
const HORIZON_SLACK: f64 = 1e-9;

#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    dim_state: usize,
    dim_params: usize,
    time_horizon: f64,
    field: Arc<FieldFn>,
    partial_state: Option<Arc<JacobianFn>>,
    partial_params: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_params", &self.dim_params)
            .field("time_horizon", &self.time_horizon)
            .field("analytic_state_jacobian", &self.partial_state.is_some())
            .field("analytic_param_jacobian", &self.partial_params.is_some())
            .finish()
    }
}

impl OdeSystem {
    pub fn new<F>(
        name: impl Into<String>,
        dim_state: usize,
        dim_params: usize,
        time_horizon: f64,
        field: F,
    ) -> Result<Self>
    where
        F: Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if dim_state == 0 {
            return Err(Error::usage("dim_state must be positive"));
        }
        if !(time_horizon.is_finite() && time_horizon > 0.0) {
            return Err(Error::usage(format!(
                "time horizon must be positive and finite, got {time_horizon}"
            )));
        }
        Ok(Self {
            name: name.into(),
            dim_state,
            dim_params,
            time_horizon,
            field: Arc::new(field),
            partial_state: None,
            partial_params: None,
        })
    }

    /// Attach an analytic `dim_state × dim_state` Jacobian `∂F/∂x`.
    pub fn with_state_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.partial_state = Some(Arc::new(jac));
        self
    }

    /// Attach an analytic `dim_state × dim_params` Jacobian `∂F/∂θ`.
    pub fn with_param_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.partial_params = Some(Arc::new(jac));
        self
    }

    /// Same dynamics on a different horizon.
    pub fn with_horizon(mut self, time_horizon: f64) -> Result<Self> {
        if !(time_horizon.is_finite() && time_horizon > 0.0) {
            return Err(Error::usage(format!(
                "time horizon must be positive and finite, got {time_horizon}"
            )));
        }
        self.time_horizon = time_horizon;
        Ok(self)
    }

    /// Drop the analytic Jacobians so the finite-difference path is used.
    pub fn without_analytic_partials(mut self) -> Self {
        self.partial_state = None;
        self.partial_params = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_params(&self) -> usize {
        self.dim_params
    }

    pub fn time_horizon(&self) -> f64 {
        self.time_horizon
    }

    pub fn has_analytic_state_jacobian(&self) -> bool {
        self.partial_state.is_some()
    }

    pub fn has_analytic_param_jacobian(&self) -> bool {
        self.partial_params.is_some()
    }

    fn check_dims(&self, state: &[f64], params: &[f64]) -> Result<()> {
        if state.len() != self.dim_state {
            return Err(Error::usage(format!(
                "{}: state has length {}, expected {}",
                self.name,
                state.len(),
                self.dim_state
            )));
        }
        if params.len() != self.dim_params {
            return Err(Error::usage(format!(
                "{}: params have length {}, expected {}",
                self.name,
                params.len(),
                self.dim_params
            )));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let slack = HORIZON_SLACK * self.time_horizon.max(1.0);
        if !(t >= -slack && t <= self.time_horizon + slack) {
            return Err(Error::Domain {
                t,
                lo: 0.0,
                hi: self.time_horizon,
            });
        }
        Ok(())
    }

    /// Evaluate `F(state, t, params)`.
    pub fn eval_field(&self, state: &[f64], t: f64, params: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_state];
        self.field_into(state, t, params, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`eval_field`](Self::eval_field).
    pub fn field_into(&self, state: &[f64], t: f64, params: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dims(state, params)?;
        self.check_time(t)?;
        if out.len() != self.dim_state {
            return Err(Error::usage("output buffer length must equal dim_state"));
        }
        (self.field)(state, t, params, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation {
                t,
                state: state.to_vec(),
                what: format!("{} field returned {:?}", self.name, out),
            });
        }
        Ok(())
    }

    /// `(∂F/∂x, ∂F/∂θ)` at the given point; analytic when available, else
    /// central differences.
    pub fn eval_partials(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let d = self.dim_state;
        let p = self.dim_params;
        let mut jx = vec![0.0; d * d];
        let mut jp = vec![0.0; d * p];
        self.partials_into(state, t, params, &mut jx, &mut jp)?;
        Ok((
            DMatrix::from_row_slice(d, d, &jx),
            DMatrix::from_row_slice(d, p, &jp),
        ))
    }

    /// Row-major Jacobians written into caller buffers.
    pub fn partials_into(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
        jac_state: &mut [f64],
        jac_params: &mut [f64],
    ) -> Result<()> {
        self.check_dims(state, params)?;
        self.check_time(t)?;
        let d = self.dim_state;
        let p = self.dim_params;
        match &self.partial_state {
            Some(jac) => jac(state, t, params, jac_state),
            None => self.fd_state_jacobian(state, t, params, jac_state)?,
        }
        match &self.partial_params {
            Some(jac) => jac(state, t, params, jac_params),
            None => self.fd_param_jacobian(state, t, params, jac_params)?,
        }
        let bad = jac_state[..d * d]
            .iter()
            .chain(jac_params[..d * p].iter())
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::Evaluation {
                t,
                state: state.to_vec(),
                what: format!("{} Jacobian is not finite", self.name),
            });
        }
        Ok(())
    }

    /// Central-difference `∂F/∂x`, step `max(1e-6, 1e-6·|x_j|)`.
    pub fn fd_state_jacobian(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.dim_state;
        let mut x = state.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(state[j]);
            x[j] = state[j] + h;
            self.field_into(&x, t, params, &mut fp)?;
            x[j] = state[j] - h;
            self.field_into(&x, t, params, &mut fm)?;
            x[j] = state[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(())
    }

    /// Central-difference `∂F/∂θ`, step `max(1e-6, 1e-6·|θ_j|)`.
    pub fn fd_param_jacobian(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.dim_state;
        let p = self.dim_params;
        let mut th = params.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..p {
            let h = fd_step(params[j]);
            th[j] = params[j] + h;
            self.field_into(state, t, &th, &mut fp)?;
            th[j] = params[j] - h;
            self.field_into(state, t, &th, &mut fm)?;
            th[j] = params[j];
            for i in 0..d {
                out[i * p + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(())
    }
}

fn fd_step(value: f64) -> f64 {
    (1e-6 * value.abs()).max(1e-6)
}

/// Names of the built-in systems, in catalog order.
pub const BUILTIN_NAMES: &[&str] = &[
    "fitzhugh_nagumo",
    "exp_growth",
    "tan_blowup",
    "decay_forced",
    "linear_rate",
    "cubic_drift",
];

/// Every built-in system.
pub fn builtin_systems() -> Vec<OdeSystem> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin(n).expect("catalog names resolve"))
        .collect()
}

/// Look up a built-in system by name.
pub fn builtin(name: &str) -> Result<OdeSystem> {
    let sys = match name {
        "fitzhugh_nagumo" => fitzhugh_nagumo(),
        "exp_growth" => exp_growth(),
        "tan_blowup" => tan_blowup(),
        "decay_forced" => decay_forced(),
        "linear_rate" => linear_rate(),
        "cubic_drift" => cubic_drift(),
        other => {
            return Err(Error::NotFound(format!(
                "no builtin system named '{other}' (known: {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    Ok(sys)
}

/// FitzHugh–Nagumo spike dynamics, state `(V, R)`, parameters `(a, b, c)`,
/// horizon 20.
pub fn fitzhugh_nagumo() -> OdeSystem {
    OdeSystem::new("fitzhugh_nagumo", 2, 3, 20.0, |x, _t, th, out| {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (th[0], th[1], th[2]);
        out[0] = c * (v - v * v * v / 3.0 + r);
        out[1] = -(v - a + b * r) / c;
    })
    .expect("valid builtin")
    .with_state_jacobian(|x, _t, th, out| {
        let v = x[0];
        let (b, c) = (th[1], th[2]);
        out[0] = c * (1.0 - v * v);
        out[1] = c;
        out[2] = -1.0 / c;
        out[3] = -b / c;
    })
    .with_param_jacobian(|x, _t, th, out| {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (th[0], th[1], th[2]);
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = v - v * v * v / 3.0 + r;
        out[3] = 1.0 / c;
        out[4] = -r / c;
        out[5] = (v - a + b * r) / (c * c);
    })
}

/// `dy/dt = y` on `[0, 1]`.
pub fn exp_growth() -> OdeSystem {
    OdeSystem::new("exp_growth", 1, 0, 1.0, |x, _t, _th, out| out[0] = x[0])
        .expect("valid builtin")
        .with_state_jacobian(|_x, _t, _th, out| out[0] = 1.0)
        .with_param_jacobian(|_x, _t, _th, _out| {})
}

/// `dx/dt = 1 + θx²` on `[0, 2]`; the solution through 0 is `tan(√θ t)` and
/// ceases to exist at `π/(2√θ)`.
pub fn tan_blowup() -> OdeSystem {
    OdeSystem::new("tan_blowup", 1, 1, 2.0, |x, _t, th, out| {
        out[0] = 1.0 + th[0] * x[0] * x[0]
    })
    .expect("valid builtin")
    .with_state_jacobian(|x, _t, th, out| out[0] = 2.0 * th[0] * x[0])
    .with_param_jacobian(|x, _t, _th, out| out[0] = x[0] * x[0])
}

/// `dx/dt = −x + sin t` on `[0, 10]`; `F_x ≡ −1`.
pub fn decay_forced() -> OdeSystem {
    OdeSystem::new("decay_forced", 1, 0, 10.0, |x, t, _th, out| {
        out[0] = -x[0] + t.sin()
    })
    .expect("valid builtin")
    .with_state_jacobian(|_x, _t, _th, out| out[0] = -1.0)
    .with_param_jacobian(|_x, _t, _th, _out| {})
}

/// `dy/dt = θy` on `[0, 1]`.
pub fn linear_rate() -> OdeSystem {
    OdeSystem::new("linear_rate", 1, 1, 1.0, |x, _t, th, out| out[0] = th[0] * x[0])
        .expect("valid builtin")
        .with_state_jacobian(|_x, _t, th, out| out[0] = th[0])
        .with_param_jacobian(|x, _t, _th, out| out[0] = x[0])
}

/// `dx/dt = 3θt²` on `[0, 1]`; solutions `x0 + θt³` are cubic and therefore
/// exactly representable by cubic splines.
pub fn cubic_drift() -> OdeSystem {
    OdeSystem::new("cubic_drift", 1, 1, 1.0, |_x, t, th, out| {
        out[0] = 3.0 * th[0] * t * t
    })
    .expect("valid builtin")
    .with_state_jacobian(|_x, _t, _th, out| out[0] = 0.0)
    .with_param_jacobian(|_x, t, _th, out| out[0] = 3.0 * t * t)
}
