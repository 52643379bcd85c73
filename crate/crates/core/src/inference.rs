//! Plug-in sandwich covariance, Wald intervals and finite-difference
//! sensitivities of the inner solution.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::criteria::Dataset;
use crate::error::{Error, Result};
use crate::model::OdeSystem;
use crate::smoother::{InnerSolution, InnerTolerances, Smoother, ThetaLayout};
use crate::spline::{KnotGrid, DEFAULT_SUBDIVISIONS};

/// Condition number above which `V̂` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative step for first-order sensitivities.
pub const FIRST_STEP: f64 = 1e-4;

/// Relative step for second-order sensitivities.
pub const SECOND_STEP: f64 = 1e-3;

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn ser_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    rows_of(m).serialize(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEstimate {
    #[serde(serialize_with = "ser_matrix")]
    pub v_hat: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub meat_hat: DMatrix<f64>,
    /// `V̂⁻¹ M̂ V̂⁻¹`.
    #[serde(serialize_with = "ser_matrix")]
    pub sandwich: DMatrix<f64>,
    pub n: usize,
    pub condition_number: f64,
}

impl CovarianceEstimate {
    /// Per-coordinate variances of the estimator, `sandwich_jj / n`.
    pub fn variances(&self) -> Vec<f64> {
        (0..self.sandwich.nrows())
            .map(|j| self.sandwich[(j, j)] / self.n as f64)
            .collect()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.variances().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Plug-in `V̂`, `M̂` and sandwich from a fitted trajectory and its first
/// and second `θ*`-derivatives, each given as a function of
/// `(component, t)`.
///
/// `V̂ = −(1/n) Σ_i Σ_c [g'·∂²x + g''·∂x ∂xᵀ]` and
/// `M̂ = (1/n) Σ_i s_i s_iᵀ` with `s_i = Σ_c g'·∂x`.
pub fn estimate_covariance<V, D1, D2>(
    data: &Dataset,
    mut traj_value: V,
    mut traj_dtheta: D1,
    mut traj_d2theta: D2,
) -> Result<CovarianceEstimate>
where
    V: FnMut(usize, f64) -> Result<f64>,
    D1: FnMut(usize, f64) -> Result<Vec<f64>>,
    D2: FnMut(usize, f64) -> Result<DMatrix<f64>>,
{
    let n = data.n();
    let mut v: Option<DMatrix<f64>> = None;
    let mut meat: Option<DMatrix<f64>> = None;
    let mut score_row: Option<(usize, Vec<f64>)> = None;

    let flush = |meat: &mut Option<DMatrix<f64>>, s: &[f64]| {
        let p = s.len();
        let m = meat.get_or_insert_with(|| DMatrix::zeros(p, p));
        for a in 0..p {
            for b in 0..p {
                m[(a, b)] += s[a] * s[b];
            }
        }
    };

    for obs in data.observations() {
        let crit = &data.criteria()[obs.column];
        let x = traj_value(obs.component, obs.time)?;
        let dx = traj_dtheta(obs.component, obs.time)?;
        let d2x = traj_d2theta(obs.component, obs.time)?;
        let p = dx.len();
        if p == 0 {
            return Err(Error::usage("no parameters to estimate a covariance for"));
        }
        if d2x.nrows() != p || d2x.ncols() != p {
            return Err(Error::usage("second-derivative matrix does not match the gradient"));
        }
        let g1 = crit.dg_dx(obs.value, x);
        let g2 = crit.d2g_dx2(obs.value, x);
        let vm = v.get_or_insert_with(|| DMatrix::zeros(p, p));
        for a in 0..p {
            for b in 0..p {
                vm[(a, b)] -= g1 * d2x[(a, b)] + g2 * dx[a] * dx[b];
            }
        }
        match &mut score_row {
            Some((row, s)) if *row == obs.row => {
                for a in 0..p {
                    s[a] += g1 * dx[a];
                }
            }
            _ => {
                if let Some((_, s)) = score_row.take() {
                    flush(&mut meat, &s);
                }
                score_row = Some((obs.row, dx.iter().map(|d| g1 * d).collect()));
            }
        }
    }
    if let Some((_, s)) = score_row.take() {
        flush(&mut meat, &s);
    }
    let (mut v, mut meat) = match (v, meat) {
        (Some(v), Some(m)) => (v, m),
        _ => return Err(Error::usage("no observations to estimate a covariance from")),
    };
    v /= n as f64;
    meat /= n as f64;
    let v = (&v + v.transpose()) * 0.5;
    let meat = (&meat + meat.transpose()) * 0.5;

    let eig = SymmetricEigen::new(v.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, e| m.min(e.abs()));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular {
            condition,
            matrix: rows_of(&v),
        });
    }
    let vinv = v.clone().try_inverse().ok_or_else(|| Error::Singular {
        condition,
        matrix: rows_of(&v),
    })?;
    let sandwich = &vinv * &meat * &vinv;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    Ok(CovarianceEstimate {
        v_hat: v,
        meat_hat: meat,
        sandwich,
        n,
        condition_number: condition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when the variance was not positive and the interval collapsed.
    pub degenerate: bool,
}

impl WaldInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// `θ̂_j ± z_{(1+level)/2} √(sandwich_jj / n)`.
pub fn wald_intervals(theta_hat: &[f64], cov: &CovarianceEstimate, level: f64) -> Result<Vec<WaldInterval>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::usage(format!("confidence level must lie in [0, 1), got {level}")));
    }
    if theta_hat.len() != cov.sandwich.nrows() {
        return Err(Error::usage("estimate and covariance dimensions differ"));
    }
    let z = inverse_normal_cdf(0.5 * (1.0 + level));
    Ok(theta_hat
        .iter()
        .zip(cov.variances())
        .map(|(&th, var)| {
            if var > 0.0 && var.is_finite() {
                let half = z * var.sqrt();
                WaldInterval {
                    lo: th - half,
                    hi: th + half,
                    degenerate: false,
                }
            } else {
                WaldInterval {
                    lo: th,
                    hi: th,
                    degenerate: true,
                }
            }
        })
        .collect())
}

/// Standard normal quantile by Wichura's AS241 (about 1e-16 relative
/// accuracy).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987_1e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_4e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((5.226_495_278_852_854_6e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271_1e4)
            * r
            + 2.121_379_430_158_659_6e4)
            * r
            + 5.394_196_021_424_751_1e3)
            * r
            + 6.871_870_074_920_579_1e2)
            * r
            + 4.231_333_070_160_091_1e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506_1e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_6)
            * r
            + 5.769_497_221_460_691_4)
            * r
            + 4.630_337_846_156_545_3)
            * r
            + 1.423_437_110_749_683_6;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_7e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_3e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114_4)
            * r
            + 6.657_904_643_501_103_8;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_7e-5)
            * r
            + 7.868_691_311_456_132_6e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_879_4e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Inner solution at `θ̂*` with finite-difference derivatives of its
/// coefficients with respect to `θ*`.
#[derive(Debug, Clone)]
pub struct SplineSensitivities {
    pub center: InnerSolution,
    /// `∂c/∂θ*_k`, interleaved like the coefficients.
    pub first: Vec<Vec<f64>>,
    /// `∂²c/∂θ*_k∂θ*_l`, indexed `[k][l]`.
    pub second: Vec<Vec<Vec<f64>>>,
    grid: KnotGrid,
    dim_state: usize,
}

impl SplineSensitivities {
    pub fn dim(&self) -> usize {
        self.first.len()
    }

    fn combine(&self, v: &[f64], a: usize, first: usize, phi: &[f64]) -> f64 {
        phi.iter()
            .enumerate()
            .map(|(k, b)| b * v[(first + k) * self.dim_state + a])
            .sum()
    }

    pub fn value(&self, a: usize, t: f64) -> Result<f64> {
        let (first, phi) = self.grid.basis_derivs(t, 0)?;
        Ok(self.combine(self.center.coefficients(), a, first, &phi))
    }

    /// `∂x̂_a(t)/∂θ*`.
    pub fn dtheta(&self, a: usize, t: f64) -> Result<Vec<f64>> {
        let (first, phi) = self.grid.basis_derivs(t, 0)?;
        Ok(self.first.iter().map(|v| self.combine(v, a, first, &phi)).collect())
    }

    /// `∂²x̂_a(t)/∂θ*∂θ*ᵀ`.
    pub fn d2theta(&self, a: usize, t: f64) -> Result<DMatrix<f64>> {
        let (first, phi) = self.grid.basis_derivs(t, 0)?;
        let p = self.dim();
        Ok(DMatrix::from_fn(p, p, |k, l| self.combine(&self.second[k][l], a, first, &phi)))
    }

    /// Sandwich covariance of the fit these sensitivities describe.
    pub fn covariance(&self, data: &Dataset) -> Result<CovarianceEstimate> {
        estimate_covariance(
            data,
            |a, t| self.value(a, t),
            |a, t| self.dtheta(a, t),
            |a, t| self.d2theta(a, t),
        )
    }
}

/// Tolerances used for the center and probe solves.
fn probe_tolerances() -> InnerTolerances {
    InnerTolerances {
        grad_tol: 1e-12,
        max_iter: 200,
    }
}

/// Central differences of the inner solution over `θ*` (relative step
/// `1e-4`; second derivatives with relative step `1e-3`). Every probe is
/// warm-started from the center solve.
pub fn spline_sensitivities(
    system: &OdeSystem,
    data: &Dataset,
    grid: &KnotGrid,
    layout: &ThetaLayout,
    theta_star_hat: &[f64],
    lambda: f64,
) -> Result<SplineSensitivities> {
    let sm = Smoother::new(system, data, grid, DEFAULT_SUBDIVISIONS, None)?;
    sensitivities_with(&sm, layout, theta_star_hat, lambda, None)
}

/// [`spline_sensitivities`] on a prepared smoother, optionally starting the
/// center solve from known coefficients.
pub fn sensitivities_with(
    sm: &Smoother<'_>,
    layout: &ThetaLayout,
    theta_star_hat: &[f64],
    lambda: f64,
    warm: Option<&[f64]>,
) -> Result<SplineSensitivities> {
    let tol = probe_tolerances();
    let (params, init) = layout.split(theta_star_hat)?;
    let center = sm.solve(&params, &init, lambda, warm, tol)?;
    let p = layout.dim();
    let h1: Vec<f64> = theta_star_hat.iter().map(|v| FIRST_STEP * v.abs().max(1.0)).collect();
    let h2: Vec<f64> = theta_star_hat.iter().map(|v| SECOND_STEP * v.abs().max(1.0)).collect();

    // Probe list: (label, displacement).
    let mut probes: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for k in 0..p {
        probes.push((format!("theta*[{k}]+{}", h1[k]), vec![(k, h1[k])]));
        probes.push((format!("theta*[{k}]-{}", h1[k]), vec![(k, -h1[k])]));
    }
    for k in 0..p {
        probes.push((format!("theta*[{k}]+{}", h2[k]), vec![(k, h2[k])]));
        probes.push((format!("theta*[{k}]-{}", h2[k]), vec![(k, -h2[k])]));
        for l in k + 1..p {
            for (sk, sl) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                probes.push((
                    format!("theta*[{k}],[{l}] ({sk:+},{sl:+})"),
                    vec![(k, sk * h2[k]), (l, sl * h2[l])],
                ));
            }
        }
    }
    let center_c = center.coefficients().to_vec();
    let solved: Vec<Result<Vec<f64>>> = probes
        .par_iter()
        .map(|(label, disp)| {
            let mut th = theta_star_hat.to_vec();
            for &(k, dv) in disp {
                th[k] += dv;
            }
            let (pp, ii) = layout.split(&th)?;
            sm.solve(&pp, &ii, lambda, Some(&center_c), tol)
                .map(|s| s.coefficients().to_vec())
                .map_err(|e| Error::Sensitivity {
                    probe: label.clone(),
                    source: Box::new(e),
                })
        })
        .collect();
    let solved = solved.into_iter().collect::<Result<Vec<_>>>()?;

    let nvar = center_c.len();
    let mut it = solved.into_iter();
    let mut first = Vec::with_capacity(p);
    for k in 0..p {
        let plus = it.next().unwrap();
        let minus = it.next().unwrap();
        first.push((0..nvar).map(|i| (plus[i] - minus[i]) / (2.0 * h1[k])).collect());
    }
    let mut second = vec![vec![vec![0.0; nvar]; p]; p];
    for k in 0..p {
        let plus = it.next().unwrap();
        let minus = it.next().unwrap();
        second[k][k] = (0..nvar)
            .map(|i| (plus[i] - 2.0 * center_c[i] + minus[i]) / (h2[k] * h2[k]))
            .collect();
        for l in k + 1..p {
            let pp = it.next().unwrap();
            let pm = it.next().unwrap();
            let mp = it.next().unwrap();
            let mm = it.next().unwrap();
            let v: Vec<f64> = (0..nvar)
                .map(|i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * h2[k] * h2[l]))
                .collect();
            second[k][l] = v.clone();
            second[l][k] = v;
        }
    }
    Ok(SplineSensitivities {
        center,
        first,
        second,
        grid: sm.grid().clone(),
        dim_state: sm.system().dim_state(),
    })
}
