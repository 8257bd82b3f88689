use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::design::Design;
use crate::error::{GodError, Result};
use crate::linalg::{cholesky, symmetrize};
use crate::quasi_newton::{minimize, QnOptions};

const LOG_NU: (f64, f64) = (-6.0 * std::f64::consts::LN_10, 3.0 * std::f64::consts::LN_10);
const LOG_ALPHA: (f64, f64) = (-3.0 * std::f64::consts::LN_10, 3.0 * std::f64::consts::LN_10);

/// Squared-exponential correlation exp(-sum_z alpha_z (xi_z - xj_z)^2).
pub fn sq_exp_corr(xi: &[f64], xj: &[f64], alpha: &[f64]) -> f64 {
    let s: f64 = xi
        .iter()
        .zip(xj)
        .zip(alpha)
        .map(|((a, b), al)| al * (a - b) * (a - b))
        .sum();
    (-s).exp()
}

/// Fitted zero-mean GP with nugget: y ~ N(0, phi2 (nu I + B)).
#[derive(Debug, Clone)]
pub struct GpFit {
    pub phi2: f64,
    pub nu: f64,
    pub alpha: Vec<f64>,
    /// (nu I + B)^{-1}
    pub vbar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    pub loo_mse: f64,
    /// Set when y is identically zero and defaults were returned.
    pub degenerate: bool,
    /// Whether the winning restart met the gradient tolerance rather than
    /// stalling in the line search.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            restarts: 10,
            seed: 0x6f70_7431,
            max_iter: 100,
        }
    }
}

fn corr_matrix(design: &Design, alpha: &[f64]) -> DMatrix<f64> {
    let n = design.n();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| design.row(i)).collect();
    DMatrix::from_fn(n, n, |i, j| sq_exp_corr(&rows[i], &rows[j], alpha))
}

/// Leave-one-out residuals y_i - E[y_i | y_{-i}] via the identity
/// r_i = [K^{-1} y]_i / [K^{-1}]_ii with K = nu I + B.
pub fn loo_residuals(
    y: &DVector<f64>,
    design: &Design,
    nu: f64,
    alpha: &[f64],
) -> Result<DVector<f64>> {
    let (_, kinv) = kernel_inverse(design, nu, alpha)?;
    Ok(loo_from_inverse(y, &kinv))
}

fn kernel_inverse(design: &Design, nu: f64, alpha: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = corr_matrix(design, alpha);
    let n = design.n();
    let k = &b + DMatrix::identity(n, n) * nu;
    let chol = cholesky(&k)?;
    Ok((b, symmetrize(&chol.inverse())))
}

fn loo_from_inverse(y: &DVector<f64>, kinv: &DMatrix<f64>) -> DVector<f64> {
    let a = kinv * y;
    DVector::from_fn(y.len(), |i, _| a[i] / kinv[(i, i)])
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn unpack(u: &DVector<f64>) -> (f64, Vec<f64>) {
    let bound = |v: f64, (lo, hi): (f64, f64)| (lo + (hi - lo) * sigmoid(v)).exp();
    let nu = bound(u[0], LOG_NU);
    let alpha = u.iter().skip(1).map(|&v| bound(v, LOG_ALPHA)).collect();
    (nu, alpha)
}

fn assemble(y: &DVector<f64>, design: &Design, nu: f64, alpha: Vec<f64>) -> Result<GpFit> {
    let (bbar, vbar) = kernel_inverse(design, nu, &alpha)?;
    let loo = loo_from_inverse(y, &vbar);
    let n = y.len() as f64;
    let phi2 = y.dot(&(&vbar * y)) / n;
    Ok(GpFit {
        phi2: if phi2 > 0.0 { phi2 } else { 1.0 },
        nu,
        alpha,
        vbar,
        bbar,
        loo_mse: loo.norm_squared() / n,
        degenerate: false,
        converged: true,
    })
}

/// LOO mean squared error as a function of the unconstrained parameters,
/// with its analytic gradient.
struct LooProblem<'a> {
    y: &'a DVector<f64>,
    /// Per-dimension squared coordinate differences.
    sq_diff: Vec<DMatrix<f64>>,
}

impl<'a> LooProblem<'a> {
    fn new(y: &'a DVector<f64>, design: &Design) -> Self {
        let n = design.n();
        let sq_diff = (0..design.k())
            .map(|z| DMatrix::from_fn(n, n, |i, j| (design.get(i, z) - design.get(j, z)).powi(2)))
            .collect();
        LooProblem { y, sq_diff }
    }

    /// d r_i = (da_i c_i - a_i dc_i) / c_i^2 with a = K^{-1} y, c = diag K^{-1},
    /// da = -K^{-1} K' a and dc = diag(-K^{-1} K' K^{-1}).
    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let n = self.y.len();
        let (nu, alpha) = unpack(u);
        let mut b = DMatrix::from_element(n, n, 0.0);
        for (z, d) in self.sq_diff.iter().enumerate() {
            b -= d * alpha[z];
        }
        b.apply(|v| *v = v.exp());
        let k = &b + DMatrix::identity(n, n) * nu;
        let kinv = symmetrize(&cholesky(&k)?.inverse());
        let a = &kinv * self.y;
        let c = kinv.diagonal();
        let r = a.component_div(&c);
        let value = r.norm_squared() / n as f64;
        let mut grad = DVector::zeros(u.len());
        let slope = |v: f64, (lo, hi): (f64, f64)| {
            let s = sigmoid(v);
            (hi - lo) * s * (1.0 - s)
        };
        for j in 0..u.len() {
            // dK/du_j
            let dk = if j == 0 {
                DMatrix::identity(n, n) * (nu * slope(u[0], LOG_NU))
            } else {
                let scale = -alpha[j - 1] * slope(u[j], LOG_ALPHA);
                self.sq_diff[j - 1].component_mul(&b) * scale
            };
            let kinv_dk = &kinv * &dk;
            let da = -(&kinv_dk * &a);
            let dkinv = -(&kinv_dk * &kinv);
            let g: f64 = (0..n)
                .map(|i| {
                    let dr = (da[i] * c[i] - a[i] * dkinv[(i, i)]) / (c[i] * c[i]);
                    r[i] * dr
                })
                .sum();
            grad[j] = 2.0 * g / n as f64;
        }
        Ok((value, grad))
    }
}

/// Fits (phi2, nu, alpha) by minimizing the leave-one-out mean squared
/// prediction error. The predictive mean does not depend on phi2, which is
/// profiled as y^T V y / n.
///
/// Parameters are searched on log scale inside nu in [1e-6, 1e3] and
/// alpha_z in [1e-3, 1e3]; the first restart starts at the centre of that box.
pub fn gp_fit_loo(y: &DVector<f64>, design: &Design, opts: &GpFitOptions) -> Result<GpFit> {
    let n = design.n();
    let k = design.k();
    if n < 3 {
        return Err(GodError::GpFit(format!("need at least 3 runs, got {n}")));
    }
    if y.len() != n {
        return Err(GodError::Data("response length does not match the design".into()));
    }
    if y.iter().all(|&v| v == 0.0) {
        let mut fit = assemble(y, design, 1.0, vec![1.0; k])?;
        fit.phi2 = 1.0;
        fit.degenerate = true;
        return Ok(fit);
    }

    let problem = LooProblem::new(y, design);
    let with_grad = |u: &DVector<f64>| problem.value_and_gradient(u);

    let qn = QnOptions {
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for r in 0..opts.restarts.max(1) {
        let u0 = if r == 0 {
            DVector::zeros(k + 1)
        } else {
            DVector::from_fn(k + 1, |_, _| rng.random_range(-2.5..2.5))
        };
        let Ok(res) = minimize(with_grad, &u0, None, &qn) else {
            continue;
        };
        if !res.value.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(v, _, _)| res.value < *v) {
            best = Some((res.value, res.x, res.converged));
        }
    }
    let (_, u, converged) =
        best.ok_or_else(|| GodError::GpFit("no restart produced a finite LOO error".into()))?;
    let (nu, alpha) = unpack(&u);
    let mut fit = assemble(y, design, nu, alpha)?;
    fit.converged = converged;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky_with_jitter;
    use rand_distr::StandardNormal;

    fn random_design(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Design {
        Design::new(DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn loo_identity_matches_brute_force_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = random_design(&mut rng, 10, 2);
        let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let (nu, alpha) = (0.05, vec![1.3, 0.4]);
        let fast = loo_residuals(&y, &d, nu, &alpha).unwrap();
        for i in 0..10 {
            let keep: Vec<usize> = (0..10).filter(|&j| j != i).collect();
            let sub = d.select_rows(&keep);
            let ysub = DVector::from_fn(9, |r, _| y[keep[r]]);
            let b = corr_matrix(&sub, &alpha);
            let kmat = &b + DMatrix::identity(9, 9) * nu;
            let coef = kmat.lu().solve(&ysub).unwrap();
            let bi = DVector::from_fn(9, |r, _| sq_exp_corr(&d.row(keep[r]), &d.row(i), &alpha));
            let pred = bi.dot(&coef);
            assert!((fast[i] - (y[i] - pred)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_response_returns_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d = random_design(&mut rng, 6, 3);
        let fit = gp_fit_loo(&DVector::zeros(6), &d, &GpFitOptions::default()).unwrap();
        assert!(fit.degenerate);
        assert_eq!((fit.phi2, fit.nu), (1.0, 1.0));
        assert_eq!(fit.alpha, vec![1.0; 3]);
        assert_eq!(fit.loo_mse, 0.0);
    }

    #[test]
    fn fit_improves_on_starting_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = random_design(&mut rng, 15, 2);
        let y = DVector::from_fn(15, |i, _| (2.0 * d.get(i, 0)).sin() + 0.5 * d.get(i, 1));
        let fit = gp_fit_loo(&y, &d, &GpFitOptions::default()).unwrap();
        let (nu0, a0) = unpack(&DVector::zeros(3));
        let start = loo_residuals(&y, &d, nu0, &a0).unwrap().norm_squared() / 15.0;
        assert!(fit.loo_mse <= start);
        assert!(fit.nu >= 1e-6 * 0.999 && fit.nu <= 1e3 * 1.001);
        let k = &fit.bbar + DMatrix::identity(15, 15) * fit.nu;
        assert!((&k * &fit.vbar - DMatrix::identity(15, 15)).amax() < 1e-6);
    }

    #[test]
    fn recovers_length_scale_order_of_magnitude() {
        let (nu, alpha) = (0.01, [2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut log_ratio = 0.0;
        let reps = 20;
        for _ in 0..reps {
            let d = random_design(&mut rng, 50, 1);
            let b = corr_matrix(&d, &alpha);
            let k = &b + DMatrix::identity(50, 50) * nu;
            let l = cholesky_with_jitter(&k).unwrap().l();
            let z = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = l * z;
            let opts = GpFitOptions {
                restarts: 3,
                ..Default::default()
            };
            let fit = gp_fit_loo(&y, &d, &opts).unwrap();
            log_ratio += (fit.alpha[0] / alpha[0]).ln();
        }
        let mean_ratio = (log_ratio / reps as f64).exp();
        assert!(mean_ratio > 1.0 / 3.0 && mean_ratio < 3.0, "ratio {mean_ratio}");
    }

    #[test]
    fn loo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let d = random_design(&mut rng, 12, 3);
        let y = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let problem = LooProblem::new(&y, &d);
        for _ in 0..5 {
            let u = DVector::from_fn(4, |_, _| rng.random_range(-1.5..1.5));
            let (v, g) = problem.value_and_gradient(&u).unwrap();
            let (nu, alpha) = unpack(&u);
            assert!((v - loo_residuals(&y, &d, nu, &alpha).unwrap().norm_squared() / 12.0).abs() < 1e-10);
            for j in 0..4 {
                let h = 1e-5;
                let mut up = u.clone();
                up[j] += h;
                let mut dn = u.clone();
                dn[j] -= h;
                let fd = (problem.value_and_gradient(&up).unwrap().0 - problem.value_and_gradient(&dn).unwrap().0) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-6), "coordinate {j}: {fd} vs {}", g[j]);
            }
        }
    }
}
