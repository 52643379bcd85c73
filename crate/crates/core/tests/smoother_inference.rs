use odeprofile::inference::{estimate_covariance, spline_sensitivities};
use odeprofile::model::{cubic_drift, decay_forced, fitzhugh_nagumo, linear_rate, OdeSystem};
use odeprofile::reference::{rk4_default, simulate_dataset, solve_sensitivities, NormalStream};
use odeprofile::smoother::{InnerTolerances, Smoother, ThetaLayout};
use odeprofile::spline::KnotGrid;
use odeprofile::Dataset;
use proptest::prelude::*;

const TH0: [f64; 3] = [0.2, 0.2, 3.0];
const X0: [f64; 2] = [1.0, -1.0];

fn tight() -> InnerTolerances {
    InnerTolerances {
        grad_tol: 1e-10,
        max_iter: 2000,
    }
}

fn fhn_times() -> Vec<f64> {
    (0..=400).map(|i| i as f64 * 0.05).collect()
}

fn fhn_data(seed: u64, sd: f64) -> Dataset {
    simulate_dataset(&fitzhugh_nagumo(), &TH0, &X0, &fhn_times(), &[sd], seed, &[0, 1]).unwrap()
}

fn probe_times(horizon: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..=n).map(move |k| horizon * k as f64 / n as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn objective_is_h_minus_lambda_j_and_pins_hold(
        ys in prop::collection::vec(-2.0f64..4.0, 11),
        rate in -1.0f64..2.0,
        y0 in -1.0f64..2.0,
        log_lambda in -2.0f64..6.0,
    ) {
        let sys = linear_rate();
        let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let data = Dataset::new(times.clone(), 1, vec![0], ys.iter().map(|y| vec![Some(*y)]).collect()).unwrap();
        let grid = KnotGrid::new(times).unwrap();
        let sm = Smoother::new(&sys, &data, &grid, 4, None).unwrap();
        let lambda = 10f64.powf(log_lambda);
        let sol = sm.solve(&[rate], &[y0], lambda, None, tight()).unwrap();
        prop_assert!((sol.objective - (sol.h_value - lambda * sol.j_value)).abs() <= 1e-12 * (1.0 + sol.objective.abs()));
        prop_assert_eq!(sol.eval(0, 0.0, 0).unwrap(), y0);
        prop_assert!(sol.h_value <= 0.0 && sol.j_value >= 0.0);
    }
}

#[test]
fn large_lambda_fit_tracks_the_ode_solution() {
    let sys = fitzhugh_nagumo();
    let data = fhn_data(1, 0.5);
    let grid = KnotGrid::new(fhn_times()).unwrap();
    let sm = Smoother::new(&sys, &data, &grid, 4, None).unwrap();
    let sol = sm.solve(&TH0, &X0, 1e6, None, tight()).unwrap();
    assert!(sol.converged);
    let truth = rk4_default(&sys, &TH0, &X0).unwrap();
    let sup = probe_times(20.0, 2000)
        .flat_map(|t| (0..2).map(move |a| (a, t)))
        .map(|(a, t)| (sol.eval(a, t, 0).unwrap() - truth.eval_component(a, t).unwrap()).abs())
        .fold(0.0f64, f64::max);
    assert!(sup <= 0.1, "sup deviation {sup}");
}

#[test]
fn warm_starts_need_fewer_iterations() {
    let sys = fitzhugh_nagumo();
    let grid = KnotGrid::new(fhn_times()).unwrap();
    let mut cold = Vec::new();
    let mut warm = Vec::new();
    for seed in 0..10 {
        let data = fhn_data(seed, 0.5);
        let sm = Smoother::new(&sys, &data, &grid, 4, None).unwrap();
        let previous = sm.solve(&TH0, &X0, 1e3, None, tight()).unwrap();
        cold.push(sm.solve(&TH0, &X0, 1e4, None, tight()).unwrap().iterations);
        warm.push(
            sm.solve(&TH0, &X0, 1e4, Some(previous.coefficients()), tight())
                .unwrap()
                .iterations,
        );
    }
    let median = |v: &mut Vec<usize>| {
        v.sort_unstable();
        (v[4] + v[5]) as f64 / 2.0
    };
    assert!(median(&mut warm) < median(&mut cold), "warm {warm:?} cold {cold:?}");
}

#[test]
fn perturbed_starts_reach_the_same_objective() {
    let sys = fitzhugh_nagumo();
    let data = fhn_data(3, 0.5);
    let grid = KnotGrid::new(fhn_times()).unwrap();
    let sm = Smoother::new(&sys, &data, &grid, 4, None).unwrap();
    let base = sm.solve(&TH0, &X0, 1e2, None, tight()).unwrap();
    let mut noise = NormalStream::new(11);
    for _ in 0..3 {
        let start: Vec<f64> = sm
            .cold_start(&X0)
            .unwrap()
            .iter()
            .map(|c| c + 0.5 * noise.next_normal())
            .collect();
        let other = sm.solve(&TH0, &X0, 1e2, Some(&start), tight()).unwrap();
        assert!(
            (other.objective - base.objective).abs() <= 1e-6 * (1.0 + base.objective.abs()),
            "{} vs {}",
            other.objective,
            base.objective
        );
    }
}

#[test]
fn sandwich_reduces_to_inverse_fisher_for_a_linear_rate() {
    // Each time is observed twice with residuals +σ and −σ, so the cross
    // term cancels and every squared residual is σ².
    let sigma = 0.3;
    let n_times = 1000;
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for i in 0..n_times {
        let t = (i as f64 + 0.5) / n_times as f64;
        for s in [1.0, -1.0] {
            times.push(t);
            rows.push(vec![Some(t.exp() + s * sigma)]);
        }
    }
    let data = Dataset::new(times.clone(), 1, vec![0], rows).unwrap();
    let cov = estimate_covariance(
        &data,
        |_, t| Ok(t.exp()),
        |_, t| Ok(vec![t * t.exp()]),
        |_, t| Ok(nalgebra::DMatrix::from_element(1, 1, t * t * t.exp())),
    )
    .unwrap();
    let sandwich = cov.sandwich[(0, 0)];
    let empirical: f64 = times.iter().map(|t| (t * t.exp()).powi(2)).sum::<f64>() / times.len() as f64;
    assert!((sandwich - sigma * sigma / empirical).abs() <= 1e-6 * sandwich);
    let closed = (std::f64::consts::E.powi(2) - 1.0) / 4.0;
    assert!((sandwich - sigma * sigma / closed).abs() <= 1e-5 * sandwich);
}

#[test]
fn covariance_ignores_row_order() {
    let sys = fitzhugh_nagumo();
    let data = fhn_data(5, 0.5);
    let truth = rk4_default(&sys, &TH0, &X0).unwrap();
    let sens = solve_sensitivities(&sys, &TH0, &X0, 20.0 / 4000.0, &[]).unwrap();
    let est = |d: &Dataset| {
        estimate_covariance(
            d,
            |a, t| truth.eval_component(a, t),
            |a, t| sens.columns.iter().map(|c| c.eval_component(a, t)).collect(),
            |_, _| Ok(nalgebra::DMatrix::zeros(3, 3)),
        )
        .unwrap()
    };
    let base = est(&data);
    let n = data.n();
    let order: Vec<usize> = (0..n).map(|i| (i * 173) % n).collect();
    let shuffled = Dataset::new(
        order.iter().map(|&i| data.times()[i]).collect(),
        2,
        vec![0, 1],
        order
            .iter()
            .map(|&i| vec![data.value(i, 0), data.value(i, 1)])
            .collect(),
    )
    .unwrap();
    let other = est(&shuffled);
    let scale = base.sandwich.amax();
    assert!((&base.sandwich - &other.sandwich).amax() <= 1e-10 * scale);
}

#[test]
fn noise_free_fit_has_vanishing_meat() {
    let sys = decay_forced();
    let times: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
    let data = simulate_dataset(&sys, &[], &[0.0], &times, &[0.0], 0, &[0]).unwrap();
    let truth = rk4_default(&sys, &[], &[0.0]).unwrap();
    let cov = estimate_covariance(
        &data,
        |a, t| truth.eval_component(a, t),
        |_, t| Ok(vec![t.sin()]),
        |_, _| Ok(nalgebra::DMatrix::from_element(1, 1, 0.0)),
    )
    .unwrap();
    assert!(cov.meat_hat.amax() <= 1e-12, "{}", cov.meat_hat);
}

#[test]
fn cubic_drift_sensitivity_is_t_cubed() {
    let sys = cubic_drift();
    let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let data = simulate_dataset(&sys, &[1.5], &[0.0], &times, &[0.0], 0, &[0]).unwrap();
    let grid = KnotGrid::new(times).unwrap();
    let layout = ThetaLayout::fixed(1, vec![0.0]);
    let s = spline_sensitivities(&sys, &data, &grid, &layout, &[1.5], 1e6).unwrap();
    for t in probe_times(1.0, 200) {
        let d = s.dtheta(0, t).unwrap()[0];
        assert!((d - t.powi(3)).abs() <= 1e-4, "t={t}: {d}");
    }
}

#[test]
fn parameter_free_field_has_zero_sensitivity() {
    let sys = OdeSystem::new("unused_param", 1, 1, 1.0, |x, _t, _th, out| out[0] = -x[0]).unwrap();
    let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let data = simulate_dataset(&sys, &[0.7], &[1.0], &times, &[0.1], 4, &[0]).unwrap();
    let grid = KnotGrid::new(times).unwrap();
    let layout = ThetaLayout::fixed(1, vec![1.0]);
    let s = spline_sensitivities(&sys, &data, &grid, &layout, &[0.7], 10.0).unwrap();
    for t in probe_times(1.0, 100) {
        assert!(s.dtheta(0, t).unwrap()[0].abs() <= 1e-12);
    }
}

#[test]
fn spline_sensitivities_approach_variational_ones() {
    let sys = fitzhugh_nagumo();
    let data = fhn_data(2, 0.5);
    let grid = KnotGrid::new(fhn_times()).unwrap();
    let layout = ThetaLayout::fixed(3, X0.to_vec());
    let s = spline_sensitivities(&sys, &data, &grid, &layout, &TH0, 1e6).unwrap();
    let v = solve_sensitivities(&sys, &TH0, &X0, 20.0 / 4000.0, &[]).unwrap();
    let mut sup = 0.0f64;
    for t in probe_times(20.0, 2000) {
        for a in 0..2 {
            let d = s.dtheta(a, t).unwrap();
            for k in 0..3 {
                sup = sup.max((d[k] - v.columns[k].eval_component(a, t).unwrap()).abs());
            }
        }
    }
    assert!(sup < 1e-2, "sup {sup}");
}
