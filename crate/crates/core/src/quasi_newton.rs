//! BFGS minimization with a backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct QnOptions {
    pub max_iter: usize,
    /// Convergence when the gradient max-norm is below `grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
}

impl Default for QnOptions {
    fn default() -> Self {
        QnOptions {
            max_iter: 200,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            max_halvings: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QnResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl QnResult {
    pub fn grad_norm(&self) -> f64 {
        self.gradient.amax()
    }
}

pub(crate) fn is_stationary(value: f64, grad: &DVector<f64>, tol: f64) -> bool {
    grad.amax() <= tol * value.abs().max(1.0)
}

/// Minimizes `f`, which returns the value and gradient at a point.
///
/// `inv_hessian` seeds the inverse-Hessian approximation; without it the
/// identity is used and rescaled after the first accepted step. Evaluation
/// errors inside the line search count as rejected steps; an error at `x0`
/// is returned.
pub fn minimize<F>(
    mut f: F,
    x0: &DVector<f64>,
    inv_hessian: Option<DMatrix<f64>>,
    opts: &QnOptions,
) -> Result<QnResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = x0.clone();
    let (mut fx, mut g) = f(&x)?;
    let seeded = inv_hessian.is_some();
    let mut h = inv_hessian.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut first_step = !seeded;

    let mut iterations = 0;
    while iterations < opts.max_iter {
        if is_stationary(fx, &g, opts.grad_tol) {
            break;
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let trial = &x + &dir * step;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + opts.armijo_c * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first_step {
                h = DMatrix::identity(n, n) * (sy / yv.norm_squared());
                first_step = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (s hy^T + hy s^T) + (rho^2 y^T H y + rho) s s^T
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    let converged = is_stationary(fx, &g, opts.grad_tol);
    Ok(QnResult {
        x,
        value: fx,
        gradient: g,
        iterations,
        converged,
    })
}
