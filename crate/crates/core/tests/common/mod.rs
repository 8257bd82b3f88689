//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use god_core::exchange::initial_design;
use god_core::{Design, InitStrategy};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn uniform_design<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Design {
    initial_design(n, k, InitStrategy::Uniform, rng).unwrap()
}

pub fn replicated_design<R: Rng + ?Sized>(n: usize, k: usize, q_min: usize, q_max: usize, rng: &mut R) -> Design {
    initial_design(n, k, InitStrategy::Replicated { q_min, q_max }, rng).unwrap()
}

pub fn normal_vector<R: Rng + ?Sized>(len: usize, sd: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// max |a - b| / max(1, max |a|)
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

/// Z (Z^T Z)^{-1} Z^T built from explicit treatment indicators.
pub fn projection(z: &DMatrix<f64>) -> DMatrix<f64> {
    let ztz = z.tr_mul(z);
    z * ztz.try_inverse().unwrap() * z.transpose()
}

/// Damped Newton iteration for the Poisson log-linear posterior mode under an
/// independent normal prior; returns the mode and the inverse negative Hessian.
pub fn poisson_map(
    f: &DMatrix<f64>,
    y: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_var: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = f.ncols();
    let prec = DMatrix::from_diagonal(&prior_var.map(|v| 1.0 / v));
    let log_post = |t: &DVector<f64>| {
        let eta = f * t;
        let ll: f64 = eta.iter().zip(y.iter()).map(|(e, yi)| yi * e - e.exp()).sum();
        let dt = t - prior_mean;
        ll - 0.5 * (dt.transpose() * &prec * &dt)[(0, 0)]
    };
    let info = |t: &DVector<f64>| {
        let m = (f * t).map(f64::exp);
        let fm = DMatrix::from_fn(f.nrows(), p, |i, j| f[(i, j)] * m[i]);
        fm.tr_mul(f) + &prec
    };
    let mut t = prior_mean.clone();
    for _ in 0..200 {
        let m = (f * &t).map(f64::exp);
        let score = f.tr_mul(&(y - &m)) - &prec * (&t - prior_mean);
        let step = info(&t).try_inverse().unwrap() * &score;
        let mut scale = 1.0;
        let current = log_post(&t);
        while log_post(&(&t + &step * scale)) < current - 1e-12 * current.abs() && scale > 1e-10 {
            scale *= 0.5;
        }
        t += &step * scale;
        if (&step * scale).amax() < 1e-15 {
            break;
        }
    }
    let cov = info(&t).try_inverse().unwrap();
    (t, cov)
}
