//! Negative log-likelihoods, i.e. self-information losses, for the
//! statistical models used by the Bayesian baselines.

use nalgebra::{DMatrix, DVector};

use super::{check_eta, Loss, LossEvaluation};
use crate::design::ModelMatrix;
use crate::error::{GodError, Result};
use crate::special::ln_gamma;

/// Normal linear model with known error variance.
#[derive(Debug, Clone)]
pub struct GaussianNll {
    pub y: DVector<f64>,
    pub f: ModelMatrix,
    pub sigma2: f64,
}

impl Loss for GaussianNll {
    fn dim(&self) -> usize {
        self.f.p()
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        let n = self.y.len() as f64;
        let resid = &self.y - self.f.predictor(t);
        Ok(LossEvaluation {
            value: resid.norm_squared() / (2.0 * self.sigma2)
                + 0.5 * n * (2.0 * std::f64::consts::PI * self.sigma2).ln(),
            gradient: Some(self.f.0.tr_mul(&resid) / -self.sigma2),
            hessian: Some(self.f.gram() / self.sigma2),
        })
    }
}

/// Poisson log-linear model.
#[derive(Debug, Clone)]
pub struct PoissonNll {
    pub y: DVector<f64>,
    pub f: ModelMatrix,
}

impl Loss for PoissonNll {
    fn dim(&self) -> usize {
        self.f.p()
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        let eta = self.f.predictor(t);
        check_eta(&eta)?;
        let m = eta.map(f64::exp);
        let value = (0..self.y.len())
            .map(|i| m[i] - self.y[i] * eta[i] + ln_gamma(self.y[i] + 1.0))
            .sum();
        let fm = DMatrix::from_fn(self.f.n(), self.f.p(), |i, j| self.f.0[(i, j)] * m[i]);
        Ok(LossEvaluation {
            value,
            gradient: Some(self.f.0.tr_mul(&(&m - &self.y))),
            hessian: Some(fm.tr_mul(&self.f.0)),
        })
    }
}

pub const WEIBULL_SHAPE_MIN: f64 = 0.5;
pub const WEIBULL_SHAPE_WIDTH: f64 = 1.0;

/// Weibull proportional-hazards model with baseline hazard psi u^(psi - 1).
///
/// Parameters are (beta, s) with shape psi = 0.5 + sigmoid(s), which maps the
/// real line onto the prior support (0.5, 1.5).
#[derive(Debug, Clone)]
pub struct WeibullNll {
    pub y: DVector<f64>,
    pub c: Vec<bool>,
    pub f: ModelMatrix,
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

impl WeibullNll {
    pub fn shape(s: f64) -> f64 {
        WEIBULL_SHAPE_MIN + WEIBULL_SHAPE_WIDTH * sigmoid(s)
    }

    pub fn unconstrained_shape(psi: f64) -> f64 {
        let u = (psi - WEIBULL_SHAPE_MIN) / WEIBULL_SHAPE_WIDTH;
        (u / (1.0 - u)).ln()
    }
}

impl Loss for WeibullNll {
    fn dim(&self) -> usize {
        self.f.p() + 1
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        let p = self.f.p();
        let n = self.y.len();
        if self.y.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(GodError::Data("event times must be positive and finite".into()));
        }
        let beta = t.rows(0, p).into_owned();
        let s = t[p];
        let sig = sigmoid(s);
        let psi = WEIBULL_SHAPE_MIN + WEIBULL_SHAPE_WIDTH * sig;
        let dpsi = WEIBULL_SHAPE_WIDTH * sig * (1.0 - sig);
        let d2psi = dpsi * (1.0 - 2.0 * sig);

        let eta = self.f.predictor(&beta);
        let logy = self.y.map(f64::ln);
        let lin = DVector::from_fn(n, |i, _| eta[i] + psi * logy[i]);
        check_eta(&lin)?;
        let m = lin.map(f64::exp);
        let cv = DVector::from_fn(n, |i, _| if self.c[i] { 1.0 } else { 0.0 });

        let mut value = 0.0;
        let mut g_psi = 0.0;
        let mut h_psi = 0.0;
        for i in 0..n {
            value += m[i] - cv[i] * (eta[i] + psi.ln() + (psi - 1.0) * logy[i]);
            g_psi += m[i] * logy[i] - cv[i] * (1.0 / psi + logy[i]);
            h_psi += cv[i] / (psi * psi) + m[i] * logy[i] * logy[i];
        }
        let g_beta = self.f.0.tr_mul(&(&m - &cv));
        let fm = DMatrix::from_fn(n, p, |i, j| self.f.0[(i, j)] * m[i]);
        let h_bb = fm.tr_mul(&self.f.0);
        let h_bpsi = self.f.0.tr_mul(&m.component_mul(&logy));

        let mut gradient = DVector::zeros(p + 1);
        gradient.rows_mut(0, p).copy_from(&g_beta);
        gradient[p] = g_psi * dpsi;
        let mut hessian = DMatrix::zeros(p + 1, p + 1);
        hessian.view_mut((0, 0), (p, p)).copy_from(&h_bb);
        for j in 0..p {
            hessian[(j, p)] = h_bpsi[j] * dpsi;
            hessian[(p, j)] = h_bpsi[j] * dpsi;
        }
        hessian[(p, p)] = h_psi * dpsi * dpsi + g_psi * d2psi;
        Ok(LossEvaluation {
            value,
            gradient: Some(gradient),
            hessian: Some(hessian),
        })
    }
}
