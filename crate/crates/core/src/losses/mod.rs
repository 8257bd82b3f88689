//! Loss functions, calibration weights and the Gaussian-process and
//! quadrature machinery behind the L2 loss.

mod gp;
mod l2;
mod pl;
mod quadrature;
mod selfinfo;
mod weight;

pub use gp::{gp_fit_loo, loo_residuals, sq_exp_corr, GpFit, GpFitOptions};
pub use l2::{l2_loss, l2_mestimator, L2Loss, L2Quadrature, L2Smoother};
pub use pl::{pl_loss, PlLoss};
pub use quadrature::{gauss_legendre_1d, gauss_legendre_grid, QuadratureGrid};
pub use selfinfo::{GaussianNll, PoissonNll, WeibullNll, WEIBULL_SHAPE_MIN, WEIBULL_SHAPE_WIDTH};
pub use weight::{pure_error_variance, resolve_weight, CalibrationWeight, ResolvedWeight, WeightContext};

use nalgebra::{DMatrix, DVector};

use crate::design::ModelMatrix;
use crate::error::{GodError, Result};
use crate::glm::ETA_LIMIT;

/// Loss value with optional analytic derivatives.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

/// A loss l(t; y, X) with its data bound in.
pub trait Loss: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation>;

    fn value(&self, t: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(t)?.value)
    }
}

/// Sum of squares: value, gradient -2 F^T (y - F t) and Hessian 2 F^T F.
pub fn ss_loss(t: &DVector<f64>, y: &DVector<f64>, f: &ModelMatrix) -> LossEvaluation {
    let resid = y - f.predictor(t);
    LossEvaluation {
        value: resid.norm_squared(),
        gradient: Some(f.0.tr_mul(&resid) * -2.0),
        hessian: Some(f.gram() * 2.0),
    }
}

/// Poisson quasi-likelihood loss sum_i [exp(eta_i) - y_i eta_i].
pub fn ql_loss(t: &DVector<f64>, y: &DVector<f64>, f: &ModelMatrix) -> Result<LossEvaluation> {
    let eta = f.predictor(t);
    check_eta(&eta)?;
    let m = eta.map(f64::exp);
    let value = eta
        .iter()
        .zip(y.iter())
        .zip(m.iter())
        .map(|((&e, &yi), &mi)| mi - yi * e)
        .sum();
    let gradient = f.0.tr_mul(&(&m - y));
    let fm = DMatrix::from_fn(f.n(), f.p(), |i, j| f.0[(i, j)] * m[i]);
    Ok(LossEvaluation {
        value,
        gradient: Some(gradient),
        hessian: Some(fm.tr_mul(&f.0)),
    })
}

pub(crate) fn check_eta(eta: &DVector<f64>) -> Result<()> {
    match eta.iter().find(|e| !e.is_finite() || e.abs() > ETA_LIMIT) {
        Some(&e) => Err(GodError::Overflow(e.abs())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct SsLoss {
    pub y: DVector<f64>,
    pub f: ModelMatrix,
}

impl Loss for SsLoss {
    fn dim(&self) -> usize {
        self.f.p()
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        Ok(ss_loss(t, &self.y, &self.f))
    }
}

#[derive(Debug, Clone)]
pub struct QlLoss {
    pub y: DVector<f64>,
    pub f: ModelMatrix,
}

impl Loss for QlLoss {
    fn dim(&self) -> usize {
        self.f.p()
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        ql_loss(t, &self.y, &self.f)
    }
}

/// Central finite-difference gradient with step 1e-6 (1 + |t_j|).
pub fn fd_gradient(loss: &dyn Loss, t: &DVector<f64>) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(t.len());
    for j in 0..t.len() {
        let h = 1e-6 * (1.0 + t[j].abs());
        let mut up = t.clone();
        up[j] += h;
        let mut dn = t.clone();
        dn[j] -= h;
        g[j] = (loss.value(&up)? - loss.value(&dn)?) / (2.0 * h);
    }
    Ok(g)
}

/// Central finite differences of the analytic gradient, step 1e-5 (1 + |t_j|),
/// falling back to second differences of the value when no gradient exists.
pub fn fd_hessian(loss: &dyn Loss, t: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = t.len();
    let mut h = DMatrix::zeros(p, p);
    let grad_at = |x: &DVector<f64>| -> Result<DVector<f64>> {
        match loss.evaluate(x)?.gradient {
            Some(g) => Ok(g),
            None => fd_gradient(loss, x),
        }
    };
    for j in 0..p {
        let step = 1e-5 * (1.0 + t[j].abs());
        let mut up = t.clone();
        up[j] += step;
        let mut dn = t.clone();
        dn[j] -= step;
        let col = (grad_at(&up)? - grad_at(&dn)?) / (2.0 * step);
        h.set_column(j, &col);
    }
    Ok(crate::linalg::symmetrize(&h))
}
