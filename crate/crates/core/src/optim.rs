//! Minimal optimizers for the fitting modules: Nelder–Mead simplex for
//! low-dimensional likelihood maximization and Levenberg–Marquardt for
//! weighted least squares, plus finite-difference derivatives.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
}

/// Classic Nelder–Mead with standard coefficients. Converges on the
/// spread of simplex function values.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    initial_step: f64,
    f_tolerance: f64,
    max_iterations: usize,
) -> Result<NelderMeadResult> {
    let n = x0.len();
    assert!(n >= 1);
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1e-12 {
            initial_step * v[i].abs()
        } else {
            initial_step
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for iteration in 0..max_iterations {
        // sort ascending by value
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let reorder = |xs: &mut Vec<Vec<f64>>, vs: &mut Vec<f64>, order: &[usize]| {
            *xs = order.iter().map(|&i| xs[i].clone()).collect();
            *vs = order.iter().map(|&i| vs[i]).collect();
        };
        reorder(&mut simplex, &mut values, &order);

        if (values[n] - values[0]).abs() <= f_tolerance * (1.0 + values[0].abs()) {
            return Ok(NelderMeadResult {
                x: simplex[0].clone(),
                fx: values[0],
                iterations: iteration,
            });
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
        };

        let reflected = lerp(&centroid, &simplex[n], -alpha);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = lerp(&centroid, &simplex[n], -gamma);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let contracted = if fr < values[n] {
                lerp(&centroid, &simplex[n], -rho)
            } else {
                lerp(&centroid, &simplex[n], rho)
            };
            let fc = f(&contracted);
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                // shrink toward the best vertex
                for i in 1..=n {
                    simplex[i] = lerp(&simplex[0], &simplex[i], sigma);
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    Err(Error::FitFailure {
        message: "Nelder-Mead did not converge".into(),
        iterations: max_iterations,
        last: simplex[0].clone(),
        objective: values[0],
    })
}

#[derive(Debug)]
pub struct LeastSquaresResult {
    pub x: Vec<f64>,
    /// Covariance of the parameters, (JᵀJ)⁻¹ for whitened residuals.
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
    pub iterations: usize,
}

/// Levenberg–Marquardt on whitened residuals r(x) (already divided by
/// their σ). The Jacobian is taken by central finite differences.
pub fn levenberg_marquardt(
    residuals: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    x0: &[f64],
    max_iterations: usize,
    x_tolerance: f64,
) -> Result<LeastSquaresResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let m = r.len();
    if m < n {
        return Err(Error::invalid(format!(
            "least squares needs at least {n} residuals, got {m}"
        )));
    }
    let mut chi2: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = 1e-3;

    let jacobian = |residuals: &mut dyn FnMut(&[f64]) -> Vec<f64>, x: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(m, n);
        for col in 0..n {
            let h = 1e-6 * x[col].abs().max(1e-6);
            let mut xp = x.to_vec();
            xp[col] += h;
            let mut xm = x.to_vec();
            xm[col] -= h;
            let rp = residuals(&xp);
            let rm = residuals(&xm);
            for row in 0..m {
                j[(row, col)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        j
    };

    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let j = jacobian(residuals, &x);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let rhs = -(&jt * DVector::from_vec(r.clone()));

        let mut stepped = false;
        for _ in 0..16 {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&rhs) else {
                lambda *= 10.0;
                continue;
            };
            let x_new: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let r_new = residuals(&x_new);
            let chi2_new: f64 = r_new.iter().map(|v| v * v).sum();
            if chi2_new.is_finite() && chi2_new <= chi2 {
                // relative step size
                let step = delta
                    .iter()
                    .zip(&x)
                    .map(|(d, xi)| d.abs() / (xi.abs() + 1e-12))
                    .fold(0.0f64, f64::max);
                x = x_new;
                r = r_new;
                chi2 = chi2_new;
                lambda = (lambda * 0.3).max(1e-12);
                stepped = true;
                if step < x_tolerance {
                    // converged
                    let j = jacobian(residuals, &x);
                    let jtj = j.transpose() * &j;
                    return Ok(LeastSquaresResult {
                        x,
                        covariance: robust_inverse(&jtj),
                        chi2,
                        iterations,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            // no step improves chi2 even under heavy damping: we are at
            // a numerical optimum
            break;
        }
    }
    let j = jacobian(residuals, &x);
    let jtj = j.transpose() * &j;
    Ok(LeastSquaresResult {
        x,
        covariance: robust_inverse(&jtj),
        chi2,
        iterations,
    })
}

/// Inverse of the normal equations with a ridge fallback: a parameter
/// the data does not constrain (zero curvature row) gets an effectively
/// infinite variance instead of poisoning the whole fit.
fn robust_inverse(jtj: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(inv) = jtj.clone().try_inverse() {
        return inv;
    }
    let n = jtj.nrows();
    let scale = jtj.diagonal().amax().max(1e-300);
    let mut eps = 1e-12 * scale;
    for _ in 0..12 {
        let mut damped = jtj.clone();
        for i in 0..n {
            damped[(i, i)] += eps;
        }
        if let Some(inv) = damped.try_inverse() {
            return inv;
        }
        eps *= 100.0;
    }
    DMatrix::from_diagonal_element(n, n, f64::INFINITY)
}

/// Symmetric finite-difference Hessian of a scalar function.
pub fn numerical_hessian(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1e-4)).collect();
    let mut hess = DMatrix::zeros(n, n);
    let f0 = f(x);
    let mut eval = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut y = x.to_vec();
        y[di] += si * h[di];
        y[dj] += sj * h[dj];
        f(&y)
    };
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                let fp = eval(i, 1.0, i, 0.0);
                let fm = eval(i, -1.0, i, 0.0);
                (fp - 2.0 * f0 + fm) / (h[i] * h[i])
            } else {
                let fpp = eval(i, 1.0, j, 1.0);
                let fpm = eval(i, 1.0, j, -1.0);
                let fmp = eval(i, -1.0, j, 1.0);
                let fmm = eval(i, -1.0, j, -1.0);
                (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}
