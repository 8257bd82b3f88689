use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::l2::{L2Quadrature, L2Smoother};
use crate::design::{ModelMatrix, UniqueTreatmentStructure};
use crate::error::{GodError, Result};
use crate::glm::{poisson_fisher_scoring, ScoringOptions};

const DEGENERATE_EPS: f64 = 1e-12;
const DISPERSION_CLAMP: (f64, f64) = (1e-6, 1e6);

/// Rule producing the calibration weight w of a Gibbs posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum CalibrationWeight {
    Fixed { value: f64 },
    /// 1 / (2 sigma_tilde^2) from replicate runs.
    PureError,
    /// Reciprocal of the Pearson dispersion estimate of a Poisson fit.
    Dispersion,
    /// Matches the trace of the posterior covariance to that of the L2 estimator.
    L2Trace,
    Unit,
    /// w integrated against its conjugate prior; has no point value.
    RandomConjugate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedWeight {
    pub value: f64,
    /// The raw value fell outside the clamp range and was moved to its edge.
    pub clamped: bool,
}

/// Data a weight rule may read. Rules fail with a configuration error when
/// the inputs they need are absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightContext<'a> {
    pub y: Option<&'a DVector<f64>>,
    pub f: Option<&'a ModelMatrix>,
    pub uts: Option<&'a UniqueTreatmentStructure>,
    /// Fitted linear predictor; computed by Fisher scoring when absent.
    pub eta_hat: Option<&'a DVector<f64>>,
    pub l2: Option<(&'a L2Quadrature, &'a L2Smoother)>,
}

/// y^T (I - H_Z) y / (n - q)
pub fn pure_error_variance(y: &DVector<f64>, uts: &UniqueTreatmentStructure) -> Result<f64> {
    if uts.d() == 0 {
        return Err(GodError::NoReplication);
    }
    if y.len() != uts.n() {
        return Err(GodError::Data("response length does not match the design".into()));
    }
    Ok(uts.pure_error_ss(y) / uts.d() as f64)
}

fn need<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| GodError::Config(format!("weight rule needs {what}")))
}

fn positive(denominator: f64, what: &str) -> Result<f64> {
    if denominator > DEGENERATE_EPS && denominator.is_finite() {
        Ok(denominator)
    } else {
        Err(GodError::Degenerate(format!("{what} is {denominator:e}")))
    }
}

pub fn resolve_weight(rule: &CalibrationWeight, ctx: &WeightContext) -> Result<ResolvedWeight> {
    let plain = |value| Ok(ResolvedWeight { value, clamped: false });
    match *rule {
        CalibrationWeight::Fixed { value } => {
            if value > 0.0 && value.is_finite() {
                plain(value)
            } else {
                Err(GodError::Config(format!("fixed weight must be positive, got {value}")))
            }
        }
        CalibrationWeight::Unit => plain(1.0),
        CalibrationWeight::PureError => {
            let s2 = pure_error_variance(need(ctx.y, "responses")?, need(ctx.uts, "unique treatments")?)?;
            plain(1.0 / (2.0 * positive(s2, "pure-error variance")?))
        }
        CalibrationWeight::Dispersion => {
            let y = need(ctx.y, "responses")?;
            let f = need(ctx.f, "a model matrix")?;
            let (n, p) = (f.n(), f.p());
            if n <= p {
                return Err(GodError::DegreesOfFreedom { n, p });
            }
            let eta = match ctx.eta_hat {
                Some(e) => e.clone(),
                None => f.predictor(&poisson_fisher_scoring(&f.0, y, &ScoringOptions::default())?),
            };
            let pearson: f64 = eta
                .iter()
                .zip(y.iter())
                .map(|(&e, &yi)| {
                    let m = e.exp();
                    (yi - m) * (yi - m) / m
                })
                .sum();
            let raw = (n - p) as f64 / pearson;
            if raw.is_nan() {
                return Err(GodError::Degenerate("Pearson statistic is not a number".into()));
            }
            let value = raw.clamp(DISPERSION_CLAMP.0, DISPERSION_CLAMP.1);
            Ok(ResolvedWeight {
                value,
                clamped: value != raw,
            })
        }
        CalibrationWeight::L2Trace => {
            let y = need(ctx.y, "responses")?;
            let (quad, smoother) = need(ctx.l2, "the L2 quadrature and smoother")?;
            let s2 = positive(smoother.residual_variance(y), "GP residual variance")?;
            let spread = positive(smoother.gain.norm_squared(), "estimator variance trace")?;
            plain(quad.eq_inv.trace() / (2.0 * s2 * spread))
        }
        CalibrationWeight::RandomConjugate => Err(GodError::Config(
            "a random calibration weight has no single resolved value".into(),
        )),
    }
}
