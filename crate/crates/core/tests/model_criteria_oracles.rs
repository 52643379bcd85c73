use odeprofile::criteria::{eval_hn, eval_penalty, gaussian_criterion, logistic_criterion, penalty_gradient};
use odeprofile::model::{builtin_systems, decay_forced, fitzhugh_nagumo, linear_rate, OdeSystem};
use odeprofile::reference::{rk4_default, simulate_dataset};
use odeprofile::spline::{interpolate, interpolate_fn, KnotGrid, QuadraturePartition, SplineFunction};
use odeprofile::Dataset;
use proptest::prelude::*;

/// Probe states and parameters scaled to keep every builtin field tame.
fn probe_point(sys: &OdeSystem, u: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let d = sys.dim_state();
    let p = sys.dim_params();
    let x: Vec<f64> = (0..d).map(|a| 2.0 * u[a] - 1.0).collect();
    let t = u[d] * sys.time_horizon();
    let th: Vec<f64> = (0..p).map(|k| 0.2 + 2.0 * u[d + 1 + k]).collect();
    (x, t, th)
}

fn splines_from(sys: &OdeSystem, grid: &KnotGrid, u: &[f64]) -> Vec<SplineFunction> {
    (0..sys.dim_state())
        .map(|a| {
            let c = (0..grid.dim()).map(|i| 1.6 * u[(a * 31 + i * 7) % u.len()] - 0.8).collect();
            SplineFunction::new(grid.clone(), c).unwrap()
        })
        .collect()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_jacobians_match_differences(u in prop::collection::vec(0.0f64..1.0, 8)) {
        for sys in builtin_systems() {
            let (x, t, th) = probe_point(&sys, &u);
            let (jx, jp) = sys.eval_partials(&x, t, &th).unwrap();
            let d = sys.dim_state();
            let p = sys.dim_params();
            let mut fx = vec![0.0; d * d];
            let mut fp = vec![0.0; d * p];
            sys.fd_state_jacobian(&x, t, &th, &mut fx).unwrap();
            sys.fd_param_jacobian(&x, t, &th, &mut fp).unwrap();
            for i in 0..d {
                for j in 0..d {
                    prop_assert!(rel_close(jx[(i, j)], fx[i * d + j], 1e-5), "{} F_x", sys.name());
                }
                for j in 0..p {
                    prop_assert!(rel_close(jp[(i, j)], fp[i * p + j], 1e-5), "{} F_theta", sys.name());
                }
            }
        }
    }

    #[test]
    fn penalty_gradient_matches_central_differences(u in prop::collection::vec(0.0f64..1.0, 64)) {
        for sys in builtin_systems() {
            let grid = KnotGrid::uniform(sys.time_horizon(), 6).unwrap();
            let part = QuadraturePartition::from_grid(&grid, 4).unwrap();
            let splines = splines_from(&sys, &grid, &u);
            let th: Vec<f64> = (0..sys.dim_params()).map(|k| 0.3 + u[50 + k]).collect();
            let g = penalty_gradient(&sys, &splines, &th, &part).unwrap();
            let scale = g.coeffs.iter().flatten().chain(&g.params).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let j = |s: &[SplineFunction], p: &[f64]| eval_penalty(&sys, s, p, &part).unwrap();
            // Five-point stencil keeps truncation error well below the tolerance.
            let five = |f: &dyn Fn(f64) -> f64, h: f64| (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
            for a in 0..sys.dim_state() {
                for i in 0..grid.dim() {
                    let c0 = splines[a].coeffs()[i];
                    let h = 1e-4 * c0.abs().max(1.0);
                    let shifted = |dh: f64| {
                        let mut s = splines.clone();
                        let mut c = s[a].coeffs().to_vec();
                        c[i] = c0 + dh;
                        s[a] = SplineFunction::new(grid.clone(), c).unwrap();
                        j(&s, &th)
                    };
                    let fd = five(&shifted, h);
                    prop_assert!((g.coeffs[a][i] - fd).abs() <= 1e-5 * scale,
                        "{} coeff ({},{}): {} vs {}", sys.name(), a, i, g.coeffs[a][i], fd);
                }
            }
            for k in 0..sys.dim_params() {
                let h = 1e-4 * th[k].abs().max(1.0);
                let shifted = |dh: f64| {
                    let mut p = th.clone();
                    p[k] += dh;
                    j(&splines, &p)
                };
                let fd = five(&shifted, h);
                prop_assert!((g.params[k] - fd).abs() <= 1e-5 * scale, "{} param {}", sys.name(), k);
            }
        }
    }

    #[test]
    fn hn_is_nonpositive_and_gaussian_is_rss(
        ys in prop::collection::vec(-3.0f64..3.0, 1..30),
        shift in -2.0f64..2.0,
    ) {
        let n = ys.len();
        let times: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let data = Dataset::new(times, 1, vec![0], ys.iter().map(|y| vec![Some(*y)]).collect()).unwrap();
        let traj = |_a: usize, t: f64| Ok(shift * t);
        let h = eval_hn(&data, traj).unwrap();
        prop_assert!(h <= 0.0);
        let rss: f64 = data.times().iter().zip(&ys).map(|(t, y)| (y - shift * t).powi(2)).sum();
        prop_assert!((-(n as f64) * h - rss).abs() <= 1e-12 * rss.max(1.0));
    }
}

#[test]
fn penalty_is_stable_under_quadrature_refinement_on_linear_fields() {
    let cases = [
        (linear_rate(), vec![1.3], KnotGrid::uniform(1.0, 20).unwrap()),
        (decay_forced(), vec![], KnotGrid::uniform(10.0, 200).unwrap()),
    ];
    for (sys, th, grid) in cases {
        // Smooth trajectory that does not solve the ODE, so J is well away from 0.
        let s = interpolate_fn(&grid, |t| (0.7 * t).cos() + t, |t| 1.0 - 0.7 * (0.7 * t).sin()).unwrap();
        let j = |sub| eval_penalty(&sys, &[s.clone()], &th, &QuadraturePartition::from_grid(&grid, sub).unwrap()).unwrap();
        let (base, fine) = (j(4), j(64));
        assert!(fine > 1e-3);
        assert!((base - fine).abs() <= 1e-6 * fine, "{}: {base} vs {fine}", sys.name());
    }
}

#[test]
fn noise_free_fhn_data_give_zero_hn_at_truth() {
    let sys = fitzhugh_nagumo();
    let th = [0.2, 0.2, 3.0];
    let times: Vec<f64> = (0..=400).map(|i| i as f64 * 0.05).collect();
    let data = simulate_dataset(&sys, &th, &[1.0, -1.0], &times, &[0.0], 1, &[0, 1]).unwrap();
    let truth = rk4_default(&sys, &th, &[1.0, -1.0]).unwrap();
    let h = eval_hn(&data, |a, t| truth.eval_component(a, t)).unwrap();
    assert!(h.abs() <= 1e-10);
}

#[test]
fn interpolated_fhn_solution_has_small_penalty() {
    // J of the interpolated solution is bounded by 8T(8K²+2)(C₁K₄|τ|³)²
    // with K and K₄ measured on the RK4 solution.
    let sys = fitzhugh_nagumo();
    let th = [0.2, 0.2, 3.0];
    let truth = rk4_default(&sys, &th, &[1.0, -1.0]).unwrap();
    let grid = KnotGrid::new((0..=400).map(|i| i as f64 * 0.05).collect()).unwrap();
    let splines: Vec<SplineFunction> = (0..2)
        .map(|a| {
            let vals: Vec<f64> = grid.breakpoints().iter().map(|&t| truth.eval_component(a, t).unwrap()).collect();
            interpolate(&grid, &vals, truth.eval_slope(a, 0.0).unwrap(), truth.eval_slope(a, 20.0).unwrap()).unwrap()
        })
        .collect();
    let j = eval_penalty(&sys, &splines, &th, &QuadraturePartition::from_grid(&grid, 4).unwrap()).unwrap();

    let h = 0.02;
    let truth = &truth;
    let ts: Vec<f64> = (0..=1000).map(|k| 20.0 * k as f64 / 1000.0).collect();
    let k4 = ts
        .iter()
        .filter(|&&t| t >= 2.0 * h && t <= 20.0 - 2.0 * h)
        .flat_map(|&t| {
            (0..2).map(move |a| {
                let x = |s: f64| truth.eval_component(a, s).unwrap();
                ((x(t - 2.0 * h) - 4.0 * x(t - h) + 6.0 * x(t) - 4.0 * x(t + h) + x(t + 2.0 * h)) / h.powi(4)).abs()
            })
        })
        .fold(0.0f64, f64::max)
        * 1.1;
    let mut k = 0.0f64;
    for &t in &ts {
        let x = truth.eval(t).unwrap();
        let (jx, _) = sys.eval_partials(&x, t, &th).unwrap();
        for i in 0..2 {
            k = k.max(jx[(i, 0)].abs() + jx[(i, 1)].abs());
        }
    }
    let k = 1.1 * k;
    let r = odeprofile::spline::c1() * k4 * 0.05f64.powi(3);
    let bound = 8.0 * 20.0 * (8.0 * k * k + 2.0) * r * r;
    assert!(j <= bound, "J {j} vs bound {bound}");
}

#[test]
fn logistic_criterion_is_stable_far_out() {
    let c = logistic_criterion();
    let d = c.dg_dx(1.0, 700.0);
    assert!(d.is_finite() && d > -1e-12 && d <= 0.0);
    assert!(c.g(0.0, 700.0).is_finite() && c.g(1.0, -700.0).is_finite());
    assert!((c.g(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    let g = gaussian_criterion();
    assert_eq!(g.g(2.0, 0.5), 2.25);
    assert_eq!(g.d2g_dx2(-4.0, 9.0), 2.0);
}
