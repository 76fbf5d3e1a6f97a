//! Small numerical optimisers: bounded scalar search, Nelder-Mead, and a
//! dense Levenberg-Marquardt with a finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMin {
    pub x: f64,
    pub f: f64,
    pub evaluations: usize,
    /// Minimum landed within tolerance of an interval end.
    pub at_bound: bool,
}

/// Golden-section search on `[lo, hi]` until the bracket is shorter than
/// `tol`. Assumes `f` is unimodal on the interval.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> ScalarMin {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut evaluations = 2;
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        evaluations += 1;
    }
    let (x, fx) = if fc <= fd { (c, fc) } else { (d, fd) };
    // The interior probes never touch the ends; compare against them so a
    // monotone objective reports its boundary.
    let (fl, fh) = (f(lo), f(hi));
    evaluations += 2;
    let mut best = (x, fx);
    if fl <= best.1 {
        best = (lo, fl);
    }
    if fh < best.1 {
        best = (hi, fh);
    }
    ScalarMin {
        x: best.0,
        f: best.1,
        evaluations,
        at_bound: (best.0 - lo).abs() <= tol || (hi - best.0).abs() <= tol,
    }
}

/// Coarse uniform scan to bracket the global minimum, then golden-section
/// inside the winning bracket. Robust to mild multimodality.
pub fn bracketed_minimize<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    scan_points: usize,
    tol: f64,
) -> ScalarMin {
    let n = scan_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let mut best = (0, f64::INFINITY);
    for i in 0..n {
        let x = lo + step * i as f64;
        let v = f(x);
        if v < best.1 {
            best = (i, v);
        }
    }
    let a = lo + step * best.0.saturating_sub(1) as f64;
    let b = (lo + step * (best.0 + 1) as f64).min(hi);
    let mut r = golden_section(&mut f, a, b, tol);
    r.evaluations += n;
    r.at_bound = (r.x - lo).abs() <= tol || (hi - r.x).abs() <= tol;
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexMin {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

/// Nelder-Mead with standard coefficients. `scale` sets the initial simplex
/// edge along each coordinate.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    scale: &[f64],
    max_iter: usize,
    ftol: f64,
) -> SimplexMin {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += scale[i];
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (simplex[n][j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    simplex[i] = (0..n)
                        .map(|j| best[j] + 0.5 * (simplex[i][j] - best[j]))
                        .collect();
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let (i, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("simplex is non-empty");
    SimplexMin {
        x: simplex[i].clone(),
        f: values[i],
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub params: DVector<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
}

/// Levenberg-Marquardt on `residuals(params)`, Marquardt diagonal scaling,
/// central-difference Jacobian.
pub fn levenberg_marquardt<F>(residuals: F, start: DVector<f64>, max_iter: usize) -> LeastSquares
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = start;
    let mut r = residuals(&x);
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let mut iterations = 0;
    let n = x.len();
    while iterations < max_iter {
        iterations += 1;
        let mut jac = DMatrix::zeros(r.len(), n);
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1e-3);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (residuals(&xp) - residuals(&xm)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() < 1e-14 * (1.0 + cost) {
            break;
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 10.0;
                continue;
            };
            let xn = &x + &step;
            let rn = residuals(&xn);
            let cn = rn.norm_squared();
            if cn.is_finite() && cn < cost {
                let rel = (cost - cn) / cost.max(1e-300);
                x = xn;
                r = rn;
                cost = cn;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-14 || step.norm() < 1e-14 * (1.0 + x.norm()) {
                    return LeastSquares { params: x, cost, iterations };
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    LeastSquares { params: x, cost, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_quadratic() {
        let r = golden_section(|x| (x - 1.3).powi(2), 0.0, 5.0, 1e-9);
        assert!((r.x - 1.3).abs() < 1e-8);
        assert!(!r.at_bound);
    }

    #[test]
    fn golden_monotone_reports_bound() {
        let r = golden_section(|x| x, 0.001, 5.0, 1e-6);
        assert_eq!(r.x, 0.001);
        assert!(r.at_bound);
        let r = golden_section(|_| 1.0, 0.001, 5.0, 1e-6);
        assert_eq!(r.x, 0.001);
        assert!(r.at_bound);
    }

    #[test]
    fn bracketed_finds_global_of_bimodal() {
        let f = |x: f64| (x - 0.5).powi(2).min((x - 3.0).powi(2) - 0.1);
        let r = bracketed_minimize(f, 0.0, 4.0, 41, 1e-9);
        assert!((r.x - 3.0).abs() < 1e-6, "{}", r.x);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let r = nelder_mead(
            |p| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2),
            &[-1.2, 1.0],
            &[0.1, 0.1],
            5000,
            1e-16,
        );
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r);
    }

    #[test]
    fn lm_exponential_fit() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let res = |p: &DVector<f64>| {
            DVector::from_iterator(ts.len(), ts.iter().zip(&ys).map(|(t, y)| p[0] * (-p[1] * t).exp() - y))
        };
        let out = levenberg_marquardt(res, DVector::from_vec(vec![1.0, 0.5]), 200);
        assert!((out.params[0] - 2.5).abs() < 1e-8);
        assert!((out.params[1] - 1.3).abs() < 1e-8);
        assert!(out.cost < 1e-16);
    }
}
