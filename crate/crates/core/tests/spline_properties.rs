use odeprofile::spline::{
    c1, eval_basis, integral_of_basis, interpolate_fn, simpson, KnotGrid, QuadraturePartition, SplineFunction,
};
use proptest::prelude::*;

const C0: f64 = 5.0 / 384.0;

fn grid_from_gaps(gaps: &[f64]) -> KnotGrid {
    let mut bp = vec![0.0];
    for g in gaps {
        bp.push(bp.last().unwrap() + g);
    }
    KnotGrid::new(bp).unwrap()
}

/// Four-point Gauss–Legendre rule per cell; exact for degree ≤ 7.
fn gauss_legendre<F: Fn(f64) -> f64>(breakpoints: &[f64], f: F) -> f64 {
    let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
    let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
    let wa = (18.0 + 30f64.sqrt()) / 36.0;
    let wb = (18.0 - 30f64.sqrt()) / 36.0;
    breakpoints
        .windows(2)
        .map(|w| {
            let (m, h) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            h * (wa * (f(m - h * a) + f(m + h * a)) + wb * (f(m - h * b) + f(m + h * b)))
        })
        .sum()
}

/// Cox–de Boor value of the order-`k` B-spline `i` on `knots`, right-continuous.
fn cox_de_boor(knots: &[f64], i: usize, k: usize, t: f64) -> f64 {
    if k == 1 {
        let last = *knots.last().unwrap();
        let inside = knots[i] <= t && t < knots[i + 1];
        let at_end = t == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + k - 1] - knots[i];
    if d1 > 0.0 {
        v += (t - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, t);
    }
    let d2 = knots[i + k] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + k] - t) / d2 * cox_de_boor(knots, i + 1, k - 1, t);
    }
    v
}

fn gaps_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..2.0, 2..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_of_unity_and_local_support(gaps in gaps_strategy(), u in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let grid = grid_from_gaps(&gaps);
        for s in u {
            let t = s * grid.horizon();
            let (first, vals) = eval_basis(&grid, t).unwrap();
            prop_assert!(vals.len() <= grid.order());
            prop_assert!(first + vals.len() <= grid.dim());
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(vals.iter().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn basis_integrals_match_closed_form(gaps in gaps_strategy()) {
        let grid = grid_from_gaps(&gaps);
        let knots = grid.knots();
        let mut total = 0.0;
        for i in 0..grid.dim() {
            let got = integral_of_basis(&grid, i).unwrap();
            prop_assert!((got - (knots[i + 4] - knots[i]) / 4.0).abs() <= 1e-12);
            let numeric = gauss_legendre(grid.breakpoints(), |t| cox_de_boor(knots, i, 4, t));
            prop_assert!((got - numeric).abs() <= 1e-12 * grid.horizon().max(1.0));
            total += got;
        }
        prop_assert!((total - grid.horizon()).abs() <= 1e-12 * grid.horizon());
        prop_assert!(integral_of_basis(&grid, grid.dim()).is_err());
    }

    #[test]
    fn derivative_follows_order_three_identity(
        gaps in gaps_strategy(),
        seed_coeffs in prop::collection::vec(-3.0f64..3.0, 16),
        u in prop::collection::vec(0.0f64..1.0, 1..20),
    ) {
        let grid = grid_from_gaps(&gaps);
        let knots = grid.knots();
        let coeffs: Vec<f64> = (0..grid.dim()).map(|i| seed_coeffs[i % seed_coeffs.len()] + 0.1 * i as f64).collect();
        let s = SplineFunction::new(grid.clone(), coeffs.clone()).unwrap();
        for v in u {
            let t = v * grid.horizon();
            let identity: f64 = (1..grid.dim())
                .map(|i| {
                    let span = knots[i + 3] - knots[i];
                    if span > 0.0 { 3.0 * (coeffs[i] - coeffs[i - 1]) / span * cox_de_boor(knots, i, 3, t) } else { 0.0 }
                })
                .sum();
            let d = s.eval(t, 1).unwrap();
            prop_assert!((d - identity).abs() <= 1e-10 * (1.0 + d.abs()), "t={} {} vs {}", t, d, identity);

            let near_knot = grid.breakpoints().iter().any(|b| (b - t).abs() < 1e-3);
            if !near_knot {
                let h = 1e-6;
                let fd = (s.eval(t + h, 0).unwrap() - s.eval(t - h, 0).unwrap()) / (2.0 * h);
                prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0));
            }
        }
    }

    #[test]
    fn simpson_is_exact_on_piecewise_cubics(gaps in gaps_strategy(), seed_coeffs in prop::collection::vec(-5.0f64..5.0, 16)) {
        let grid = grid_from_gaps(&gaps);
        let coeffs: Vec<f64> = (0..grid.dim()).map(|i| seed_coeffs[i % seed_coeffs.len()]).collect();
        let exact: f64 = coeffs.iter().enumerate().map(|(i, c)| c * integral_of_basis(&grid, i).unwrap()).sum();
        let s = SplineFunction::new(grid.clone(), coeffs).unwrap();
        let part = QuadraturePartition::from_grid(&grid, 4).unwrap();
        let got = simpson(|t| s.eval(t, 0), &part).unwrap();
        prop_assert!((got - exact).abs() <= 1e-13 * (1.0 + exact.abs()) * grid.horizon().max(1.0));
    }
}

#[test]
fn simpson_on_degree_six_refines_by_sixteen() {
    let grid = grid_from_gaps(&[0.7, 1.3, 0.4, 1.1, 0.9]);
    let coeffs: Vec<f64> = (0..grid.dim()).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
    let s = SplineFunction::new(grid.clone(), coeffs).unwrap();
    let sq = |t: f64| s.eval(t, 0).unwrap().powi(2);
    let exact = gauss_legendre(grid.breakpoints(), sq);
    let err = |sub: usize| {
        let part = QuadraturePartition::from_grid(&grid, sub).unwrap();
        (simpson(|t| Ok(sq(t)), &part).unwrap() - exact).abs()
    };
    let ratio = err(4) / err(8);
    assert!((12.0..=20.0).contains(&ratio), "refinement ratio {ratio}");
}

fn sup_error(s: &SplineFunction, f: impl Fn(f64) -> f64, deriv: usize, probes: usize) -> f64 {
    let horizon = s.grid().horizon();
    (0..=probes)
        .map(|k| {
            let t = horizon * k as f64 / probes as f64;
            (s.eval(t, deriv).unwrap() - f(t)).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn sine_interpolation_obeys_hall_meyer_bounds() {
    let tau = std::f64::consts::PI / 20.0;
    let grid = KnotGrid::new((0..=20).map(|k| k as f64 * tau).collect()).unwrap();
    let s = interpolate_fn(&grid, f64::sin, f64::cos).unwrap();
    let e0 = sup_error(&s, f64::sin, 0, 1000);
    let e1 = sup_error(&s, f64::cos, 1, 1000);
    assert!(e0 <= C0 * tau.powi(4), "{e0}");
    assert!(e1 <= c1() * tau.powi(3), "{e1}");
}

#[test]
fn polynomial_times_gaussian_obeys_bounds() {
    let f = |t: f64| t * t * (-t * t).exp();
    let df = |t: f64| (2.0 * t - 2.0 * t.powi(3)) * (-t * t).exp();
    // Fourth derivative bound by dense five-point differencing.
    let h = 1e-2;
    let d4 = (0..=3000)
        .map(|k| {
            let t = 3.0 * k as f64 / 3000.0;
            (f(t - 2.0 * h) - 4.0 * f(t - h) + 6.0 * f(t) - 4.0 * f(t + h) + f(t + 2.0 * h)) / h.powi(4)
        })
        .fold(0.0f64, |m, v| m.max(v.abs()))
        * 1.05;
    let grid = KnotGrid::uniform(3.0, 30).unwrap();
    let tau = grid.mesh_width();
    let s = interpolate_fn(&grid, f, df).unwrap();
    assert!(sup_error(&s, f, 0, 3000) <= C0 * d4 * tau.powi(4));
    assert!(sup_error(&s, df, 1, 3000) <= c1() * d4 * tau.powi(3));
}

#[test]
fn exponential_interpolation_converges_at_fourth_order() {
    let e = |cells: usize| {
        let grid = KnotGrid::uniform(1.0, cells).unwrap();
        let s = interpolate_fn(&grid, f64::exp, f64::exp).unwrap();
        sup_error(&s, f64::exp, 0, 4000)
    };
    let ratio = e(8) / e(16);
    assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn sine_integral_with_sixty_four_cells() {
    let grid = KnotGrid::new((0..=64).map(|k| k as f64 * std::f64::consts::PI / 64.0).collect()).unwrap();
    let part = QuadraturePartition::from_grid(&grid, 4).unwrap();
    let v = simpson(|t| Ok(t.sin()), &part).unwrap();
    assert!((v - 2.0).abs() < 1e-8);
}
