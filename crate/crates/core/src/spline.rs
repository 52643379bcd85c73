//! Clamped B-spline bases, spline functions and composite Simpson quadrature.
//!
//! Knot vectors repeat each endpoint `order` times, so a spline's value at
//! `0` is its first coefficient. Basis evaluation follows the Cox–de Boor
//! triangle; derivatives come from the lower-order basis functions of the
//! same triangle rather than from differencing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default spline order (cubic).
pub const CUBIC: usize = 4;

/// Simpson subdivisions per knot cell used when none is specified.
pub const DEFAULT_SUBDIVISIONS: usize = 4;

/// Error-bound constant for the value of a complete cubic interpolant.
pub const C0: f64 = 5.0 / 384.0;

/// Error-bound constant for the derivative of a complete cubic interpolant.
pub fn c1() -> f64 {
    (9.0 + 3f64.sqrt()) / 216.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    breakpoints: Vec<f64>,
    order: usize,
    knots: Vec<f64>,
}

impl KnotGrid {
    /// Cubic grid over the given breakpoints.
    pub fn new(breakpoints: Vec<f64>) -> Result<Self> {
        Self::with_order(breakpoints, CUBIC)
    }

    pub fn with_order(breakpoints: Vec<f64>, order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::usage(format!("spline order must be at least 2, got {order}")));
        }
        if breakpoints.len() < 2 {
            return Err(Error::usage("a knot grid needs at least two breakpoints"));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::usage(format!(
                "the first breakpoint must be 0, got {}",
                breakpoints[0]
            )));
        }
        for w in breakpoints.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::usage(format!(
                    "breakpoints must be finite and strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let t_end = *breakpoints.last().unwrap();
        let mut knots = Vec::with_capacity(breakpoints.len() - 2 + 2 * order);
        knots.extend(std::iter::repeat(0.0).take(order));
        knots.extend_from_slice(&breakpoints[1..breakpoints.len() - 1]);
        knots.extend(std::iter::repeat(t_end).take(order));
        Ok(Self {
            breakpoints,
            order,
            knots,
        })
    }

    /// `cells` equal cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, cells: usize) -> Result<Self> {
        if cells == 0 || !(horizon > 0.0) {
            return Err(Error::usage("uniform grid needs a positive horizon and at least one cell"));
        }
        let h = horizon / cells as f64;
        let mut bp: Vec<f64> = (0..=cells).map(|i| i as f64 * h).collect();
        bp[cells] = horizon;
        Self::new(bp)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.breakpoints.len() - 2 + self.order
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// `|τ|`, the largest gap between breakpoints.
    pub fn mesh_width(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// `κ`, largest gap over smallest gap.
    pub fn mesh_ratio(&self) -> f64 {
        let min = self
            .breakpoints
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        self.mesh_width() / min
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        let hi = self.horizon();
        if !(t >= 0.0 && t <= hi) {
            return Err(Error::Domain { t, lo: 0.0, hi });
        }
        Ok(())
    }

    /// Knot-span index `i` with `knots[i] <= t < knots[i+1]`; the right end
    /// maps into the last nonempty span. Interior knots take the right span.
    fn span(&self, t: f64) -> usize {
        let p = self.order - 1;
        let n = self.dim() - 1;
        if t >= self.knots[n + 1] {
            return n;
        }
        // Upper bound over the interior breakpoints.
        let bp = &self.breakpoints;
        let cell = bp.partition_point(|&b| b <= t).saturating_sub(1);
        cell + p
    }

    /// Basis values and derivatives up to `nderiv` at `t`.
    ///
    /// Returns the first active basis index and an `(nderiv + 1) × order`
    /// row-major table; row `k` holds the `k`-th derivatives.
    pub fn basis_derivs(&self, t: f64, nderiv: usize) -> Result<(usize, Vec<f64>)> {
        self.check_domain(t)?;
        let p = self.order - 1;
        let span = self.span(t);
        let u = &self.knots;
        let ord = self.order;

        // ndu[j][r]: basis functions (upper triangle) and knot differences.
        let mut ndu = vec![0.0; ord * ord];
        let mut left = vec![0.0; ord];
        let mut right = vec![0.0; ord];
        ndu[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j * ord + r] = right[r + 1] + left[j - r];
                let temp = ndu[r * ord + j - 1] / ndu[j * ord + r];
                ndu[r * ord + j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j * ord + j] = saved;
        }

        let rows = nderiv + 1;
        let mut ders = vec![0.0; rows * ord];
        for j in 0..=p {
            ders[j] = ndu[j * ord + p];
        }
        let mut a = vec![0.0; 2 * ord];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a.iter_mut().for_each(|v| *v = 0.0);
            a[0] = 1.0;
            for k in 1..=nderiv.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2 * ord] = a[s1 * ord] / ndu[(pk + 1) * ord + rk as usize];
                    d = a[s2 * ord] * ndu[rk as usize * ord + pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2 * ord + j] = (a[s1 * ord + j] - a[s1 * ord + j - 1])
                        / ndu[(pk + 1) * ord + idx];
                    d += a[s2 * ord + j] * ndu[idx * ord + pk];
                }
                if r <= pk {
                    a[s2 * ord + k] = -a[s1 * ord + k - 1] / ndu[(pk + 1) * ord + r];
                    d += a[s2 * ord + k] * ndu[r * ord + pk];
                }
                ders[k * ord + r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=nderiv.min(p) {
            for j in 0..=p {
                ders[k * ord + j] *= factor;
            }
            factor *= (p - k) as f64;
        }
        Ok((span - p, ders))
    }
}

/// Active basis values at `t`: first index and `order` values.
pub fn eval_basis(grid: &KnotGrid, t: f64) -> Result<(usize, Vec<f64>)> {
    grid.basis_derivs(t, 0)
}

/// Exact integral of basis function `index` over `[0, T]`.
pub fn integral_of_basis(grid: &KnotGrid, index: usize) -> Result<f64> {
    if index >= grid.dim() {
        return Err(Error::usage(format!(
            "basis index {index} out of range for dimension {}",
            grid.dim()
        )));
    }
    let k = grid.knots();
    Ok((k[index + grid.order()] - k[index]) / grid.order() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineFunction {
    grid: KnotGrid,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SplineRecord {
    breakpoints: Vec<f64>,
    order: usize,
    coeffs: Vec<f64>,
}

impl Serialize for SplineFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SplineRecord {
            breakpoints: self.grid.breakpoints.clone(),
            order: self.grid.order,
            coeffs: self.coeffs.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SplineFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = SplineRecord::deserialize(d)?;
        let grid = KnotGrid::with_order(rec.breakpoints, rec.order).map_err(serde::de::Error::custom)?;
        SplineFunction::new(grid, rec.coeffs).map_err(serde::de::Error::custom)
    }
}

impl SplineFunction {
    pub fn new(grid: KnotGrid, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.dim() {
            return Err(Error::usage(format!(
                "spline needs {} coefficients, got {}",
                grid.dim(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Value (`deriv = 0`) or derivative of the spline at `t`.
    pub fn eval(&self, t: f64, deriv: usize) -> Result<f64> {
        eval_spline(self, t, deriv)
    }
}

/// Value or derivative of `f` at `t`. Second and higher derivatives take the
/// right limit at interior knots.
pub fn eval_spline(f: &SplineFunction, t: f64, deriv: usize) -> Result<f64> {
    let ord = f.grid.order;
    if deriv >= ord {
        return Ok(0.0);
    }
    let (first, ders) = f.grid.basis_derivs(t, deriv)?;
    let row = &ders[deriv * ord..(deriv + 1) * ord];
    Ok(row
        .iter()
        .zip(&f.coeffs[first..first + ord])
        .map(|(b, c)| b * c)
        .sum())
}

/// Complete cubic interpolant: one value per breakpoint plus derivatives at
/// both ends.
pub fn interpolate(
    grid: &KnotGrid,
    values: &[f64],
    start_slope: f64,
    end_slope: f64,
) -> Result<SplineFunction> {
    if grid.order() != CUBIC {
        return Err(Error::Unsupported(
            "complete interpolation is implemented for cubic splines only".into(),
        ));
    }
    let bp = grid.breakpoints();
    if values.len() != bp.len() {
        return Err(Error::usage(format!(
            "{} samples for {} breakpoints",
            values.len(),
            bp.len()
        )));
    }
    let m = grid.dim();
    let ord = grid.order();
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut put_row = |row: usize, t: f64, deriv: usize, value: f64| -> Result<()> {
        let (first, ders) = grid.basis_derivs(t, deriv)?;
        for k in 0..ord {
            a[(row, first + k)] = ders[deriv * ord + k];
        }
        rhs[row] = value;
        Ok(())
    };
    put_row(0, bp[0], 0, values[0])?;
    put_row(1, bp[0], 1, start_slope)?;
    for i in 1..bp.len() - 1 {
        put_row(i + 1, bp[i], 0, values[i])?;
    }
    let last = bp.len() - 1;
    put_row(m - 2, bp[last], 1, end_slope)?;
    put_row(m - 1, bp[last], 0, values[last])?;
    let coeffs = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular {
            condition: f64::INFINITY,
            matrix: Vec::new(),
        })?;
    SplineFunction::new(grid.clone(), coeffs.iter().copied().collect())
}

/// Complete cubic interpolant of a function with known derivative.
pub fn interpolate_fn<F, D>(grid: &KnotGrid, f: F, df: D) -> Result<SplineFunction>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let values: Vec<f64> = grid.breakpoints().iter().map(|&t| f(t)).collect();
    interpolate(grid, &values, df(0.0), df(grid.horizon()))
}

/// Nodes and composite Simpson weights over a refinement of a knot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraturePartition {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadraturePartition {
    /// Split every cell between consecutive breakpoints into `subdivisions`
    /// equal pieces (an even number) and apply Simpson's rule on each pair.
    pub fn from_breakpoints(breakpoints: &[f64], subdivisions: usize) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::usage("quadrature partition needs at least one cell"));
        }
        if subdivisions == 0 || subdivisions % 2 != 0 {
            return Err(Error::usage(format!(
                "Simpson subdivisions per cell must be positive and even, got {subdivisions}"
            )));
        }
        let cells = breakpoints.len() - 1;
        let mut nodes = Vec::with_capacity(cells * subdivisions + 1);
        let mut weights = vec![0.0; cells * subdivisions + 1];
        nodes.push(breakpoints[0]);
        for c in 0..cells {
            let (a, b) = (breakpoints[c], breakpoints[c + 1]);
            if !(b > a) {
                return Err(Error::usage("partition breakpoints must be strictly increasing"));
            }
            let h = (b - a) / subdivisions as f64;
            for s in 1..=subdivisions {
                nodes.push(if s == subdivisions { b } else { a + s as f64 * h });
            }
            let base = c * subdivisions;
            for s in 0..subdivisions / 2 {
                let i = base + 2 * s;
                weights[i] += h / 3.0;
                weights[i + 1] += 4.0 * h / 3.0;
                weights[i + 2] += h / 3.0;
            }
        }
        Ok(Self { nodes, weights })
    }

    pub fn from_grid(grid: &KnotGrid, subdivisions: usize) -> Result<Self> {
        Self::from_breakpoints(grid.breakpoints(), subdivisions)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Composite Simpson integral of `integrand` over `partition`.
pub fn simpson<F>(mut integrand: F, partition: &QuadraturePartition) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if partition.is_empty() {
        return Err(Error::usage("empty quadrature partition"));
    }
    let x = &partition.nodes;
    let mut sum = 0.0;
    let mut left = integrand(x[0])?;
    for k in (0..x.len() - 1).step_by(2) {
        let mid = integrand(x[k + 1])?;
        let right = integrand(x[k + 2])?;
        sum += (x[k + 2] - x[k]) / 6.0 * (left + 4.0 * mid + right);
        left = right;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mesh_statistics() {
        let g = KnotGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!((g.mesh_width(), g.mesh_ratio()), (1.0, 1.0));
        let g = KnotGrid::new(vec![0.0, 0.5, 2.0]).unwrap();
        assert_eq!(g.mesh_width(), 1.5);
        assert!(close(g.mesh_ratio(), 3.0, 1e-15));
        let bp: Vec<f64> = (0..=400).map(|i| i as f64 * 0.05).collect();
        let g = KnotGrid::new(bp).unwrap();
        assert!(close(g.mesh_width(), 0.05, 1e-12));
        assert!(close(g.mesh_ratio(), 1.0, 1e-9));
        assert_eq!(g.dim(), 403);
    }

    #[test]
    fn rejects_bad_breakpoints() {
        assert!(matches!(KnotGrid::new(vec![0.0, 2.0, 1.0]), Err(Error::Usage(_))));
        assert!(matches!(KnotGrid::new(vec![-1.0, 2.0]), Err(Error::Usage(_))));
        assert!(matches!(KnotGrid::new(vec![0.0]), Err(Error::Usage(_))));
        assert!(matches!(KnotGrid::new(vec![0.0, 1.0, 1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn basis_at_endpoints_and_interior_knot() {
        let g = KnotGrid::new(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let (first, v) = eval_basis(&g, 0.0).unwrap();
        assert_eq!(first, 0);
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0]);
        let (first, v) = eval_basis(&g, 4.0).unwrap();
        assert_eq!(first + 3, g.dim() - 1);
        assert!(close(v[3], 1.0, 1e-15));
        let (first, v) = eval_basis(&g, 2.0).unwrap();
        // Active bases at t = 2 are indices 2..=5; the last one vanishes there.
        assert_eq!(first, 2);
        assert!(close(v[0], 1.0 / 6.0, 1e-15));
        assert!(close(v[1], 2.0 / 3.0, 1e-15));
        assert!(close(v[2], 1.0 / 6.0, 1e-15));
        assert!(close(v[3], 0.0, 1e-15));
    }

    #[test]
    fn domain_errors() {
        let g = KnotGrid::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(eval_basis(&g, 1.5), Err(Error::Domain { .. })));
        assert!(matches!(eval_basis(&g, -0.1), Err(Error::Domain { .. })));
        assert!(matches!(integral_of_basis(&g, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_spline() {
        let g = KnotGrid::new(vec![0.0, 0.3, 1.0, 1.7]).unwrap();
        let f = SplineFunction::new(g.clone(), vec![2.5; g.dim()]).unwrap();
        for t in [0.0, 0.1, 0.3, 0.99, 1.7] {
            assert!(close(f.eval(t, 0).unwrap(), 2.5, 1e-14));
            assert!(close(f.eval(t, 1).unwrap(), 0.0, 1e-12));
        }
    }

    #[test]
    fn cubic_reproduction() {
        let g = KnotGrid::uniform(1.0, 7).unwrap();
        let f = interpolate_fn(&g, |t| t * t * t, |t| 3.0 * t * t).unwrap();
        assert!(close(f.eval(0.37, 0).unwrap(), 0.050653, 1e-12));
        assert!(close(f.eval(0.37, 1).unwrap(), 3.0 * 0.37 * 0.37, 1e-12));
        assert!(close(f.eval(0.37, 2).unwrap(), 6.0 * 0.37, 1e-10));
        assert!(close(f.eval(0.37, 3).unwrap(), 6.0, 1e-9));
    }

    #[test]
    fn value_at_zero_is_first_coefficient() {
        let g = KnotGrid::new(vec![0.0, 0.2, 0.9, 1.0]).unwrap();
        let f = SplineFunction::new(g, vec![1.25, -3.0, 4.0, 0.5, 2.0, 7.0]).unwrap();
        assert_eq!(f.eval(0.0, 0).unwrap(), 1.25);
    }

    #[test]
    fn basis_integrals() {
        let g = KnotGrid::uniform(10.0, 10).unwrap();
        assert!(close(integral_of_basis(&g, 5).unwrap(), 1.0, 1e-14));
        assert!(close(integral_of_basis(&g, 0).unwrap(), 0.25, 1e-14));
        let total: f64 = (0..g.dim()).map(|i| integral_of_basis(&g, i).unwrap()).sum();
        assert!(close(total, 10.0, 1e-12));
    }

    #[test]
    fn simpson_examples() {
        let p = QuadraturePartition::from_breakpoints(&[0.0, 1.0], 4).unwrap();
        assert!(close(simpson(|t| Ok(t * t * t), &p).unwrap(), 0.25, 1e-14));
        assert_eq!(simpson(|_| Ok(1.0), &p).unwrap(), 1.0);
        let bp: Vec<f64> = (0..=64).map(|i| std::f64::consts::PI * i as f64 / 64.0).collect();
        let p = QuadraturePartition::from_breakpoints(&bp, 2).unwrap();
        assert!(close(simpson(|t| Ok(t.sin()), &p).unwrap(), 2.0, 1e-8));
        assert!(QuadraturePartition::from_breakpoints(&[0.0, 1.0], 3).is_err());
        assert!(QuadraturePartition::from_breakpoints(&[0.0], 4).is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = KnotGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let f = SplineFunction::new(g, vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"breakpoints\"") && s.contains("\"order\":4"));
        let back: SplineFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }
}
