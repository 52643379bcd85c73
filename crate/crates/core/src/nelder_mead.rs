//! Box-clamped Nelder–Mead minimizer.

#[derive(Debug, Clone, Copy)]
pub struct Options {
    /// Stop when the simplex diameter falls below `tol·(1 + ‖x_best‖∞)`.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d = 0.0f64;
    for v in &simplex[1..] {
        for (a, b) in v.iter().zip(&simplex[0]) {
            d = d.max((a - b).abs());
        }
    }
    d
}

/// Minimize `f` over the box `[lo, hi]`. Non-finite values count as `+∞`.
pub fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: Options) -> Outcome
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut start = x0.to_vec();
    clamp(&mut start, lo, hi);
    let mut simplex = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        let h = (0.1 * v[i].abs()).max(0.05);
        v[i] += h;
        if v[i] > hi[i] {
            v[i] = start[i] - h;
        }
        clamp(&mut v, lo, hi);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evaluations)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fv = order.iter().map(|&i| fv[i]).collect();

        let scale = 1.0 + simplex[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if diameter(&simplex) <= opts.tol * scale {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n).map(|i| centroid[i] + t * (simplex[n][i] - centroid[i])).collect();
            clamp(&mut p, lo, hi);
            p
        };
        let xr = along(-alpha);
        let fr = eval(&xr, &mut evaluations);
        if fr < fv[0] {
            let xe = along(-alpha * gamma);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
            continue;
        }
        if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < fv[n] {
            let x = along(-rho);
            let f = eval(&x, &mut evaluations);
            (x, f)
        } else {
            let x = along(rho);
            let f = eval(&x, &mut evaluations);
            (x, f)
        };
        if fc < fv[n].min(fr) {
            simplex[n] = xc;
            fv[n] = fc;
            continue;
        }
        for k in 1..=n {
            let mut v: Vec<f64> = (0..n).map(|i| simplex[0][i] + sigma * (simplex[k][i] - simplex[0][i])).collect();
            clamp(&mut v, lo, hi);
            fv[k] = eval(&v, &mut evaluations);
            simplex[k] = v;
        }
    }
    Outcome {
        x: simplex[0].clone(),
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let out = minimize(
            f,
            &[-1.2, 1.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            Options { tol: 1e-10, max_iter: 5000 },
        );
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn respects_box_and_infinite_regions() {
        let f = |x: &[f64]| if x[0] < 0.5 { f64::NAN } else { (x[0] - 3.0).powi(2) };
        let out = minimize(f, &[1.0], &[0.0], &[2.0], Options { tol: 1e-10, max_iter: 500 });
        assert!((out.x[0] - 2.0).abs() < 1e-8);
    }
}
