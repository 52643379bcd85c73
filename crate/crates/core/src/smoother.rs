//! The inner problem: for fixed parameters, initial values and `λ`, find
//! spline coefficients maximizing `H_n(x̂) − λ J(x̂)` with `x̂(0)` pinned.
//!
//! Coefficients of all components are interleaved (`index = j·d + a` for
//! basis `j` and component `a`), which keeps the Gauss–Newton matrix banded
//! with half-bandwidth `order·d − 1`. Minimization of
//! `Φ = (1/n) Σ g + λ Σ_a w_a ∫ r_a²` uses Levenberg–Marquardt steps on that
//! matrix; the curvature of `g` enters through its second derivative
//! (clamped at zero), which reduces to Gauss–Newton for squared error.

use crate::banded::{BandedCholesky, BandedSpd};
use crate::criteria::Dataset;
use crate::error::{Error, Result};
use crate::model::OdeSystem;
use crate::spline::{KnotGrid, QuadraturePartition, SplineFunction, DEFAULT_SUBDIVISIONS};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InnerTolerances {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for InnerTolerances {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Maps the outer vector `θ*` to parameters and initial values.
///
/// `θ*` holds the structural parameters followed by the initial values of
/// every state component, unless the initial values are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLayout {
    dim_params: usize,
    dim_state: usize,
    fixed_init: Option<Vec<f64>>,
}

impl ThetaLayout {
    pub fn fixed(dim_params: usize, init: Vec<f64>) -> Self {
        Self {
            dim_params,
            dim_state: init.len(),
            fixed_init: Some(init),
        }
    }

    pub fn estimated(dim_params: usize, dim_state: usize) -> Self {
        Self {
            dim_params,
            dim_state,
            fixed_init: None,
        }
    }

    pub fn dim(&self) -> usize {
        match self.fixed_init {
            Some(_) => self.dim_params,
            None => self.dim_params + self.dim_state,
        }
    }

    pub fn dim_params(&self) -> usize {
        self.dim_params
    }

    pub fn estimates_init(&self) -> bool {
        self.fixed_init.is_none()
    }

    /// State components whose initial values are part of `θ*`.
    pub fn estimated_components(&self) -> Vec<usize> {
        match self.fixed_init {
            Some(_) => Vec::new(),
            None => (0..self.dim_state).collect(),
        }
    }

    /// `(params, init)` for a given `θ*`.
    pub fn split(&self, theta_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if theta_star.len() != self.dim() {
            return Err(Error::usage(format!(
                "theta* has length {}, expected {}",
                theta_star.len(),
                self.dim()
            )));
        }
        let params = theta_star[..self.dim_params].to_vec();
        let init = match &self.fixed_init {
            Some(v) => v.clone(),
            None => theta_star[self.dim_params..].to_vec(),
        };
        Ok((params, init))
    }

    /// Coordinate names: `theta1..`, then `x0_1..` for initial values.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..=self.dim_params).map(|k| format!("theta{k}")).collect();
        if self.fixed_init.is_none() {
            v.extend((1..=self.dim_state).map(|k| format!("x0_{k}")));
        }
        v
    }
}

/// One instance of the penalized smoothing problem.
#[derive(Debug, Clone)]
pub struct InnerProblem<'a> {
    pub system: &'a OdeSystem,
    pub data: &'a Dataset,
    pub grid: &'a KnotGrid,
    pub params: Vec<f64>,
    pub init_values: Vec<f64>,
    pub lambda: f64,
    /// Per-component penalty weights; `None` means all ones.
    pub component_weights: Option<Vec<f64>>,
    pub tolerances: InnerTolerances,
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub splines: Vec<SplineFunction>,
    /// `H − λ J`.
    pub objective: f64,
    pub h_value: f64,
    pub j_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final `‖∇(H − λJ)‖∞` over the free coefficients.
    pub grad_norm: f64,
    coeffs: Vec<f64>,
}

impl InnerSolution {
    /// Interleaved coefficient vector, usable as a warm start.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// Value of component `a` at `t`.
    pub fn eval(&self, a: usize, t: f64, deriv: usize) -> Result<f64> {
        self.splines[a].eval(t, deriv)
    }
}

/// Solve the inner problem, optionally warm-started from per-component
/// coefficient vectors. Pinned coefficients are overwritten with the
/// requested initial values.
pub fn solve_inner(problem: &InnerProblem<'_>, warm_start: Option<&[Vec<f64>]>) -> Result<InnerSolution> {
    let sm = Smoother::new(
        problem.system,
        problem.data,
        problem.grid,
        DEFAULT_SUBDIVISIONS,
        problem.component_weights.clone(),
    )?;
    let warm = warm_start.map(|w| sm.interleave(w)).transpose()?;
    sm.solve(
        &problem.params,
        &problem.init_values,
        problem.lambda,
        warm.as_deref(),
        problem.tolerances,
    )
}

/// `(H, J)` at the given per-component coefficients.
pub fn inner_objective_parts(problem: &InnerProblem<'_>, coeffs: &[Vec<f64>]) -> Result<(f64, f64)> {
    let sm = Smoother::new(
        problem.system,
        problem.data,
        problem.grid,
        DEFAULT_SUBDIVISIONS,
        problem.component_weights.clone(),
    )?;
    let c = sm.interleave(coeffs)?;
    sm.parts(&c, &problem.params)
}

/// Precomputed basis tables for one (system, data, grid) triple; solves any
/// number of inner problems on it.
#[derive(Debug, Clone)]
pub struct Smoother<'a> {
    system: &'a OdeSystem,
    data: &'a Dataset,
    grid: KnotGrid,
    partition: QuadraturePartition,
    weights: Vec<f64>,
    d: usize,
    m: usize,
    ord: usize,
    node_first: Vec<usize>,
    node_phi: Vec<f64>,
    node_dphi: Vec<f64>,
    obs_first: Vec<usize>,
    obs_phi: Vec<f64>,
    obs_comp: Vec<usize>,
    obs_col: Vec<usize>,
    obs_y: Vec<f64>,
}

struct Assembly {
    phi: f64,
    /// Roundoff scale of `phi`.
    phi_noise: f64,
    h: f64,
    j: f64,
    grad: Vec<f64>,
    grad_abs: Vec<f64>,
    hess: BandedSpd,
}

/// Implicit first-order response of the inner solution to `θ*`.
#[derive(Debug, Clone)]
pub struct InnerJacobian {
    /// `∂c/∂θ*_k` (interleaved) for each column `k`.
    pub columns: Vec<Vec<f64>>,
}

impl<'a> Smoother<'a> {
    pub fn new(
        system: &'a OdeSystem,
        data: &'a Dataset,
        grid: &KnotGrid,
        subdivisions: usize,
        component_weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        data.check_against(system)?;
        let horizon = system.time_horizon();
        if (grid.horizon() - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::usage(format!(
                "knot grid ends at {} but the system horizon is {horizon}",
                grid.horizon()
            )));
        }
        let d = system.dim_state();
        let weights = component_weights.unwrap_or_else(|| vec![1.0; d]);
        if weights.len() != d || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::usage("component weights must be d nonnegative numbers"));
        }
        let partition = QuadraturePartition::from_grid(grid, subdivisions)?;
        let ord = grid.order();
        let nq = partition.len();
        let mut node_first = Vec::with_capacity(nq);
        let mut node_phi = Vec::with_capacity(nq * ord);
        let mut node_dphi = Vec::with_capacity(nq * ord);
        for &t in partition.nodes() {
            let (first, ders) = grid.basis_derivs(t, 1)?;
            node_first.push(first);
            node_phi.extend_from_slice(&ders[..ord]);
            node_dphi.extend_from_slice(&ders[ord..2 * ord]);
        }
        let mut obs_first = Vec::new();
        let mut obs_phi = Vec::new();
        let mut obs_comp = Vec::new();
        let mut obs_col = Vec::new();
        let mut obs_y = Vec::new();
        for obs in data.observations() {
            let t = obs.time.min(grid.horizon());
            let (first, ders) = grid.basis_derivs(t, 0)?;
            obs_first.push(first);
            obs_phi.extend_from_slice(&ders[..ord]);
            obs_comp.push(obs.component);
            obs_col.push(obs.column);
            obs_y.push(obs.value);
        }
        Ok(Self {
            system,
            data,
            grid: grid.clone(),
            partition,
            weights,
            d,
            m: grid.dim(),
            ord,
            node_first,
            node_phi,
            node_dphi,
            obs_first,
            obs_phi,
            obs_comp,
            obs_col,
            obs_y,
        })
    }

    pub fn system(&self) -> &OdeSystem {
        self.system
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    /// Length of the interleaved coefficient vector.
    pub fn len(&self) -> usize {
        self.m * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bandwidth(&self) -> usize {
        self.ord * self.d - 1
    }

    /// Interleave per-component coefficient vectors.
    pub fn interleave(&self, per_component: &[Vec<f64>]) -> Result<Vec<f64>> {
        if per_component.len() != self.d || per_component.iter().any(|c| c.len() != self.m) {
            return Err(Error::usage(format!(
                "expected {} coefficient vectors of length {}",
                self.d, self.m
            )));
        }
        let mut c = vec![0.0; self.len()];
        for (a, v) in per_component.iter().enumerate() {
            for (j, &x) in v.iter().enumerate() {
                c[j * self.d + a] = x;
            }
        }
        Ok(c)
    }

    /// Split an interleaved vector into per-component splines.
    pub fn splines(&self, c: &[f64]) -> Vec<SplineFunction> {
        (0..self.d)
            .map(|a| {
                let coeffs = (0..self.m).map(|j| c[j * self.d + a]).collect();
                SplineFunction::new(self.grid.clone(), coeffs).expect("dimension checked")
            })
            .collect()
    }

    /// Value of component `a` at `t` for interleaved coefficients `c`.
    pub fn eval_component(&self, c: &[f64], a: usize, t: f64, deriv: usize) -> Result<f64> {
        let (first, ders) = self.grid.basis_derivs(t, deriv)?;
        let row = &ders[deriv * self.ord..(deriv + 1) * self.ord];
        Ok((0..self.ord).map(|k| row[k] * c[(first + k) * self.d + a]).sum())
    }

    /// `‖x̂‖∞` bound from the coefficients (convex-hull property).
    pub fn coeff_sup(c: &[f64]) -> f64 {
        c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Starting coefficients: a lightly smoothed least-squares fit of the
    /// data for Gaussian columns, the constant initial value otherwise.
    pub fn cold_start(&self, init: &[f64]) -> Result<Vec<f64>> {
        let (d, m, ord) = (self.d, self.m, self.ord);
        let mut c = vec![0.0; self.len()];
        for a in 0..d {
            let rows: Vec<usize> = (0..self.obs_y.len())
                .filter(|&e| {
                    self.obs_comp[e] == a && self.data.criteria()[self.obs_col[e]].is_gaussian()
                })
                .collect();
            if rows.is_empty() {
                for j in 0..m {
                    c[j * d + a] = init[a];
                }
                continue;
            }
            let bw = ord.max(3) - 1;
            let mut gram = BandedSpd::zeros(m, bw);
            let mut rhs = vec![0.0; m];
            for &e in &rows {
                let f = self.obs_first[e];
                let phi = &self.obs_phi[e * ord..(e + 1) * ord];
                for k in 0..ord {
                    rhs[f + k] += phi[k] * self.obs_y[e];
                    for l in 0..=k {
                        gram.add(f + k, f + l, phi[k] * phi[l]);
                    }
                }
            }
            let mean_diag = (0..m).map(|i| gram.diag(i)).sum::<f64>() / m as f64;
            let rho = 1e-6 * mean_diag.max(1e-300);
            for j in 1..m.saturating_sub(1) {
                let stencil = [(j - 1, 1.0), (j, -2.0), (j + 1, 1.0)];
                for &(i1, v1) in &stencil {
                    for &(i2, v2) in &stencil {
                        if i1 >= i2 {
                            gram.add(i1, i2, rho * v1 * v2);
                        }
                    }
                }
            }
            for i in 0..m {
                let v = gram.diag(i);
                gram.set_diag(i, v + 1e-12 * mean_diag);
            }
            // Pin the first coefficient by eliminating it.
            for i in 1..=bw.min(m - 1) {
                rhs[i] -= gram.get(i, 0) * init[a];
            }
            gram.pin(0);
            rhs[0] = init[a];
            let x = gram.cholesky()?.solve(&rhs);
            for j in 0..m {
                c[j * d + a] = x[j];
            }
        }
        Ok(c)
    }

    fn check_inputs(&self, params: &[f64], init: &[f64], lambda: f64) -> Result<()> {
        if params.len() != self.system.dim_params() {
            return Err(Error::usage(format!(
                "{} parameters given, {} expected",
                params.len(),
                self.system.dim_params()
            )));
        }
        if init.len() != self.d {
            return Err(Error::usage(format!(
                "{} initial values given, {} expected",
                init.len(),
                self.d
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::usage(format!("lambda must be positive, got {lambda}")));
        }
        Ok(())
    }

    /// `(H, J)` with `J` the weighted penalty.
    pub fn parts(&self, c: &[f64], params: &[f64]) -> Result<(f64, f64)> {
        let d = self.d;
        let data_sum = self.data_term(c)?;
        let mut x = vec![0.0; d];
        let mut dx = vec![0.0; d];
        let mut f = vec![0.0; d];
        let mut j_sum = 0.0;
        let nodes = self.partition.nodes();
        let wq = self.partition.weights();
        for q in 0..nodes.len() {
            self.node_state(c, q, &mut x, &mut dx);
            self.system.field_into(&x, nodes[q], params, &mut f)?;
            let mut s = 0.0;
            for a in 0..d {
                let r = dx[a] - f[a];
                s += self.weights[a] * r * r;
            }
            j_sum += wq[q] * s;
        }
        Ok((-data_sum / self.data.n() as f64, j_sum))
    }

    fn data_term(&self, c: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for e in 0..self.obs_y.len() {
            let x = self.obs_value(c, e);
            let g = self.data.criteria()[self.obs_col[e]].g(self.obs_y[e], x);
            if !g.is_finite() {
                return Err(Error::Evaluation {
                    t: self.data.times()[0],
                    state: vec![x],
                    what: format!("criterion is not finite at observation {e}"),
                });
            }
            sum += g;
        }
        Ok(sum)
    }

    #[inline]
    fn obs_value(&self, c: &[f64], e: usize) -> f64 {
        let f = self.obs_first[e];
        let phi = &self.obs_phi[e * self.ord..(e + 1) * self.ord];
        let a = self.obs_comp[e];
        (0..self.ord).map(|k| phi[k] * c[(f + k) * self.d + a]).sum()
    }

    #[inline]
    fn node_state(&self, c: &[f64], q: usize, x: &mut [f64], dx: &mut [f64]) {
        let (d, ord) = (self.d, self.ord);
        let f = self.node_first[q];
        let phi = &self.node_phi[q * ord..(q + 1) * ord];
        let dphi = &self.node_dphi[q * ord..(q + 1) * ord];
        for a in 0..d {
            let mut v = 0.0;
            let mut dv = 0.0;
            for k in 0..ord {
                let ck = c[(f + k) * d + a];
                v += phi[k] * ck;
                dv += dphi[k] * ck;
            }
            x[a] = v;
            dx[a] = dv;
        }
    }

    /// Value, gradient and Gauss–Newton matrix of `Φ` (no pins applied).
    fn assemble(&self, c: &[f64], params: &[f64], lambda: f64) -> Result<Assembly> {
        let (d, ord) = (self.d, self.ord);
        let p = self.system.dim_params();
        let nvar = self.len();
        let inv_n = 1.0 / self.data.n() as f64;
        let mut grad = vec![0.0; nvar];
        let mut grad_abs = vec![0.0; nvar];
        let mut hess = BandedSpd::zeros(nvar, self.bandwidth());

        let mut data_sum = 0.0;
        let mut noise_sum = 0.0;
        for e in 0..self.obs_y.len() {
            let x = self.obs_value(c, e);
            let crit = &self.data.criteria()[self.obs_col[e]];
            let y = self.obs_y[e];
            let g = crit.g(y, x);
            let dg = crit.dg_dx(y, x);
            let d2g = crit.d2g_dx2(y, x).max(0.0);
            if !(g.is_finite() && dg.is_finite() && d2g.is_finite()) {
                return Err(Error::Evaluation {
                    t: self.data.times()[0],
                    state: vec![x],
                    what: format!("criterion is not finite at observation {e}"),
                });
            }
            data_sum += g;
            noise_sum += inv_n * (g.abs() + dg.abs() * (x.abs() + y.abs()));
            let f = self.obs_first[e];
            let a = self.obs_comp[e];
            let phi = &self.obs_phi[e * ord..(e + 1) * ord];
            for k in 0..ord {
                let i = (f + k) * d + a;
                let t = inv_n * dg * phi[k];
                grad[i] += t;
                grad_abs[i] += inv_n * (dg.abs() + d2g * (x.abs() + y.abs())) * phi[k].abs();
                for l in 0..=k {
                    hess.add(i, (f + l) * d + a, inv_n * d2g * phi[k] * phi[l]);
                }
            }
        }

        let nodes = self.partition.nodes();
        let wq = self.partition.weights();
        let local = ord * d;
        let mut x = vec![0.0; d];
        let mut dx = vec![0.0; d];
        let mut fv = vec![0.0; d];
        let mut jx = vec![0.0; d * d];
        let mut jp = vec![0.0; d * p];
        let mut dr = vec![0.0; local];
        let mut j_sum = 0.0;
        for q in 0..nodes.len() {
            let t = nodes[q];
            self.node_state(c, q, &mut x, &mut dx);
            self.system.field_into(&x, t, params, &mut fv)?;
            self.system.partials_into(&x, t, params, &mut jx, &mut jp)?;
            let f = self.node_first[q];
            let base = f * d;
            let phi = &self.node_phi[q * ord..(q + 1) * ord];
            let dphi = &self.node_dphi[q * ord..(q + 1) * ord];
            for a in 0..d {
                let wa = self.weights[a] * wq[q];
                if wa == 0.0 {
                    continue;
                }
                let r = dx[a] - fv[a];
                j_sum += wa * r * r;
                // Magnitude of the terms cancelling in r, for the roundoff floors.
                let r_scale = r.abs()
                    + fv[a].abs()
                    + (0..ord).map(|k| (dphi[k] * c[(f + k) * d + a]).abs()).sum::<f64>();
                noise_sum += 2.0 * lambda * wa * r.abs() * r_scale;
                for k in 0..ord {
                    for b in 0..d {
                        let mut v = -jx[a * d + b] * phi[k];
                        if a == b {
                            v += dphi[k];
                        }
                        dr[k * d + b] = v;
                    }
                }
                let s = 2.0 * lambda * wa;
                for l1 in 0..local {
                    let t1 = s * r * dr[l1];
                    grad[base + l1] += t1;
                    grad_abs[base + l1] += (s * r_scale * dr[l1]).abs();
                    let sl = s * dr[l1];
                    if sl == 0.0 {
                        continue;
                    }
                    for l2 in 0..=l1 {
                        hess.add(base + l1, base + l2, sl * dr[l2]);
                    }
                }
            }
        }
        let h = -data_sum * inv_n;
        Ok(Assembly {
            phi: -h + lambda * j_sum,
            phi_noise: f64::EPSILON * noise_sum,
            h,
            j: j_sum,
            grad,
            grad_abs,
            hess,
        })
    }

    fn free_grad_norm(&self, a: &Assembly) -> (f64, f64) {
        let mut g = 0.0f64;
        let mut gabs = 0.0f64;
        for i in self.d..a.grad.len() {
            g = g.max(a.grad[i].abs());
            gabs = gabs.max(a.grad_abs[i]);
        }
        (g, gabs)
    }

    /// Levenberg–Marquardt minimization of `Φ`.
    pub fn solve(
        &self,
        params: &[f64],
        init: &[f64],
        lambda: f64,
        warm_start: Option<&[f64]>,
        tol: InnerTolerances,
    ) -> Result<InnerSolution> {
        self.check_inputs(params, init, lambda)?;
        let d = self.d;
        let mut c = match warm_start {
            Some(w) if w.len() == self.len() => w.to_vec(),
            Some(_) => return Err(Error::usage("warm start has the wrong length")),
            None => self.cold_start(init)?,
        };
        c[..d].copy_from_slice(init);

        let mut asm = self.assemble(&c, params, lambda).map_err(|e| Error::Divergence {
            reason: format!("starting point is not evaluable: {e}"),
            iterations: 0,
            last_iterate: c.clone(),
        })?;
        let mut mu = 1e-8;
        let mut nu = 2.0;
        let mut iterations = 0;
        let mut converged = false;
        let eps = f64::EPSILON;

        loop {
            let (gn, gabs) = self.free_grad_norm(&asm);
            if gn <= tol.grad_tol * (1.0 + asm.phi.abs()) + 64.0 * eps * gabs {
                converged = true;
                break;
            }
            if iterations >= tol.max_iter {
                break;
            }
            iterations += 1;

            let mut accepted = false;
            let mut stalled = false;
            let mut failures = 0usize;
            let mut finite_trials = 0usize;
            while !accepted {
                let step = match self.damped_step(&asm, mu) {
                    Some(s) => s,
                    None => {
                        mu = (mu * 10.0).max(1e-12);
                        if mu > 1e20 {
                            stalled = true;
                            break;
                        }
                        continue;
                    }
                };
                // Predicted decrease of the quadratic model.
                let hd = asm.hess.mul_vec(&step);
                let mut pred = 0.0;
                for i in d..step.len() {
                    pred -= asm.grad[i] * step[i] + 0.5 * step[i] * hd[i];
                }
                if !(pred > 0.0) {
                    stalled = true;
                    break;
                }
                let trial: Vec<f64> = c.iter().zip(&step).map(|(a, b)| a + b).collect();
                let noise = asm.phi_noise.max(eps * asm.phi.abs());
                if !(pred > 10.0 * noise) {
                    // Φ no longer resolves the predicted decrease; accept on a
                    // smaller gradient with Φ unchanged up to roundoff.
                    if let Ok(next) = self.assemble(&trial, params, lambda) {
                        finite_trials += 1;
                        let slack = 4.0 * (noise + next.phi_noise.max(eps * next.phi.abs()));
                        if next.phi <= asm.phi + slack
                            && self.free_grad_norm(&next).0 < gn
                        {
                            c = trial;
                            asm = next;
                            accepted = true;
                            continue;
                        }
                    }
                    stalled = true;
                    break;
                }
                let outcome = self
                    .parts(&trial, params)
                    .map(|(h, j)| -h + lambda * j)
                    .ok()
                    .filter(|v| v.is_finite());
                if outcome.is_some() {
                    finite_trials += 1;
                }
                match outcome {
                    Some(phi_trial) if phi_trial < asm.phi => {
                        let rho = (asm.phi - phi_trial) / pred;
                        match self.assemble(&trial, params, lambda) {
                            Ok(next) => {
                                c = trial;
                                asm = next;
                                accepted = true;
                                mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                                mu = mu.max(1e-15);
                                nu = 2.0;
                            }
                            Err(_) => failures += 1,
                        }
                    }
                    Some(_) => {}
                    None => failures += 1,
                }
                if !accepted {
                    mu *= nu;
                    nu *= 2.0;
                    if mu > 1e20 {
                        stalled = true;
                        break;
                    }
                }
            }
            if stalled {
                if failures > 0 && finite_trials == 0 {
                    return Err(Error::Divergence {
                        reason: "every trial step left the region where the field is finite".into(),
                        iterations,
                        last_iterate: c,
                    });
                }
                let (gn, gabs) = self.free_grad_norm(&asm);
                converged = gn <= tol.grad_tol * (1.0 + asm.phi.abs()) + 64.0 * eps * gabs;
                break;
            }
        }

        let (gn, _) = self.free_grad_norm(&asm);
        Ok(InnerSolution {
            splines: self.splines(&c),
            objective: asm.h - lambda * asm.j,
            h_value: asm.h,
            j_value: asm.j,
            converged,
            iterations,
            grad_norm: gn,
            coeffs: c,
        })
    }

    /// Solve `(A + μ diag A) δ = −g` over the free coefficients.
    fn damped_step(&self, asm: &Assembly, mu: f64) -> Option<Vec<f64>> {
        let d = self.d;
        let mut a = asm.hess.clone();
        let n = a.n();
        let maxdiag = (0..n).map(|i| a.diag(i)).fold(0.0, f64::max);
        for i in 0..n {
            let v = a.diag(i);
            a.set_diag(i, v + mu * (v + 1e-12 * maxdiag));
        }
        for i in 0..d {
            a.pin(i);
        }
        let chol = a.cholesky().ok()?;
        let mut rhs: Vec<f64> = asm.grad.iter().map(|g| -g).collect();
        rhs[..d].iter_mut().for_each(|v| *v = 0.0);
        chol.solve_in_place(&mut rhs);
        if rhs.iter().all(|v| v.is_finite()) {
            Some(rhs)
        } else {
            None
        }
    }

    /// Factor the pinned Gauss–Newton matrix at `c`.
    fn pinned_factor(&self, asm: &Assembly) -> Result<BandedCholesky> {
        let mut a = asm.hess.clone();
        for i in 0..self.d {
            a.pin(i);
        }
        a.cholesky()
    }

    /// Gauss–Newton implicit derivative `∂c/∂θ*` at a converged solution.
    ///
    /// `θ*` is the parameter vector followed by the initial values of the
    /// components listed in `estimated_init`.
    pub fn implicit_jacobian(
        &self,
        c: &[f64],
        params: &[f64],
        lambda: f64,
        estimated_init: &[usize],
    ) -> Result<InnerJacobian> {
        let (d, ord) = (self.d, self.ord);
        let p = self.system.dim_params();
        let asm = self.assemble(c, params, lambda)?;
        let chol = self.pinned_factor(&asm)?;
        let nvar = self.len();

        // Cross derivatives ∂(∇Φ)/∂θ_k, Gauss–Newton part.
        let mut cross = vec![vec![0.0; nvar]; p];
        let nodes = self.partition.nodes();
        let wq = self.partition.weights();
        let mut x = vec![0.0; d];
        let mut dx = vec![0.0; d];
        let mut jx = vec![0.0; d * d];
        let mut jp = vec![0.0; d * p];
        for q in 0..nodes.len() {
            self.node_state(c, q, &mut x, &mut dx);
            self.system.partials_into(&x, nodes[q], params, &mut jx, &mut jp)?;
            let base = self.node_first[q] * d;
            let phi = &self.node_phi[q * ord..(q + 1) * ord];
            let dphi = &self.node_dphi[q * ord..(q + 1) * ord];
            for a in 0..d {
                let s = 2.0 * lambda * self.weights[a] * wq[q];
                for k in 0..ord {
                    for b in 0..d {
                        let mut v = -jx[a * d + b] * phi[k];
                        if a == b {
                            v += dphi[k];
                        }
                        for th in 0..p {
                            cross[th][base + k * d + b] += s * v * (-jp[a * p + th]);
                        }
                    }
                }
            }
        }
        let mut columns = Vec::with_capacity(p + estimated_init.len());
        for mut rhs in cross {
            rhs.iter_mut().for_each(|v| *v = -*v);
            rhs[..d].iter_mut().for_each(|v| *v = 0.0);
            chol.solve_in_place(&mut rhs);
            columns.push(rhs);
        }
        for &a in estimated_init {
            // Moving the pinned coefficient shifts the stationarity condition
            // by the corresponding Hessian column.
            let mut rhs = vec![0.0; nvar];
            let hi = (a + self.bandwidth()).min(nvar - 1);
            for i in d..=hi {
                rhs[i] = -asm.hess.get(i, a);
            }
            chol.solve_in_place(&mut rhs);
            rhs[a] = 1.0;
            columns.push(rhs);
        }
        Ok(InnerJacobian { columns })
    }

    /// Basis values at observation `e`, used by callers that assemble data
    /// Jacobians from coefficient derivatives.
    pub fn observation_basis(&self, e: usize) -> (usize, usize, &[f64]) {
        (
            self.obs_first[e],
            self.obs_comp[e],
            &self.obs_phi[e * self.ord..(e + 1) * self.ord],
        )
    }

    pub fn observation_count(&self) -> usize {
        self.obs_y.len()
    }

    pub fn observation_value(&self, e: usize) -> (usize, f64) {
        (self.obs_col[e], self.obs_y[e])
    }

    /// Fitted value at observation `e`.
    pub fn fitted(&self, c: &[f64], e: usize) -> f64 {
        self.obs_value(c, e)
    }

    /// Dot product of an interleaved coefficient direction with the basis at
    /// observation `e`.
    pub fn project_observation(&self, v: &[f64], e: usize) -> f64 {
        self.obs_value(v, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use crate::spline::interpolate_fn;

    fn cubic_data(n: usize) -> Dataset {
        let times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let rows = times.iter().map(|t| vec![Some(t * t * t)]).collect();
        Dataset::new(times, 1, vec![0], rows).unwrap()
    }

    #[test]
    fn representable_problem_is_recovered() {
        let sys = builtin("cubic_drift").unwrap();
        let data = cubic_data(21);
        let grid = KnotGrid::uniform(1.0, 10).unwrap();
        let exact = interpolate_fn(&grid, |t| t * t * t, |t| 3.0 * t * t).unwrap();
        for lambda in [1e-2, 1.0, 1e4] {
            let prob = InnerProblem {
                system: &sys,
                data: &data,
                grid: &grid,
                params: vec![1.0],
                init_values: vec![0.0],
                lambda,
                component_weights: None,
                tolerances: InnerTolerances::default(),
            };
            let sol = solve_inner(&prob, None).unwrap();
            assert!(sol.converged);
            for (a, b) in sol.splines[0].coeffs().iter().zip(exact.coeffs()) {
                assert!((a - b).abs() < 1e-8, "lambda {lambda}");
            }
            assert!(sol.h_value.abs() < 1e-14);
            assert!(sol.j_value.abs() < 1e-14);
            assert!((sol.objective - (sol.h_value - lambda * sol.j_value)).abs() < 1e-12);
            assert_eq!(sol.splines[0].coeffs()[0], 0.0);
            let (h, j) = inner_objective_parts(&prob, &[exact.coeffs().to_vec()]).unwrap();
            assert!(h.abs() < 1e-14 && j.abs() < 1e-14);
        }
    }

    #[test]
    fn pins_are_exact_and_signs_hold() {
        let sys = builtin("fitzhugh_nagumo").unwrap();
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.5).collect();
        let rows = times
            .iter()
            .map(|t| vec![Some((0.3 * t).sin()), Some((0.2 * t).cos())])
            .collect();
        let data = Dataset::new(times.clone(), 2, vec![0, 1], rows).unwrap();
        let grid = KnotGrid::new(times).unwrap();
        let prob = InnerProblem {
            system: &sys,
            data: &data,
            grid: &grid,
            params: vec![0.2, 0.2, 3.0],
            init_values: vec![0.123456789, -0.987654321],
            lambda: 10.0,
            component_weights: None,
            tolerances: InnerTolerances::default(),
        };
        let sol = solve_inner(&prob, None).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.splines[0].coeffs()[0], 0.123456789);
        assert_eq!(sol.splines[1].coeffs()[0], -0.987654321);
        assert!(sol.h_value <= 0.0 && sol.j_value >= 0.0);
    }

    #[test]
    fn usage_errors() {
        let sys = builtin("cubic_drift").unwrap();
        let data = cubic_data(5);
        let grid = KnotGrid::uniform(1.0, 4).unwrap();
        let sm = Smoother::new(&sys, &data, &grid, 4, None).unwrap();
        assert!(sm.solve(&[1.0], &[0.0], 0.0, None, InnerTolerances::default()).is_err());
        assert!(sm.solve(&[1.0, 2.0], &[0.0], 1.0, None, InnerTolerances::default()).is_err());
        let bad_grid = KnotGrid::uniform(2.0, 4).unwrap();
        assert!(Smoother::new(&sys, &data, &bad_grid, 4, None).is_err());
    }
}
