//! Designer distributions: hyper-variable draws, simulated responses and the
//! target parameter values each loss aims at under a draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp1, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{
    expand_model_matrix, unique_treatments, Design, ModelMatrix, RegressionSpec, UniqueTreatmentStructure,
    TREATMENT_TOL,
};
use crate::error::{GodError, Result};
use crate::glm::{poisson_fisher_scoring, ScoringOptions};
use crate::linalg::{cholesky_with_jitter, least_squares};
use crate::losses::L2Smoother;

/// Product Matern (smoothness 3/2) correlation prod_z (1 + rho |d_z|) exp(-rho |d_z|).
pub fn matern_corr(xi: &[f64], xj: &[f64], rho: f64) -> f64 {
    xi.iter()
        .zip(xj)
        .map(|(a, b)| {
            let r = rho * (a - b).abs();
            (1.0 + r) * (-r).exp()
        })
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Unique-treatment GP mean with a normal scale mixture error.
    Linear,
    /// Log-linear mean with treatment discrepancies and negative-binomial counts.
    Count,
    /// Exponential event times with independent Bernoulli censoring.
    Tte,
    /// Normal linear model with a normal prior on the coefficients.
    GaussianModel,
    /// Poisson log-linear model with a normal prior on the coefficients.
    PoissonModel,
    /// Weibull proportional hazards with a uniform prior on the shape.
    WeibullModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum KappaDist {
    Exponential { mean: f64 },
    Uniform { lo: f64, hi: f64 },
    Fixed { value: f64 },
}

impl KappaDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            KappaDist::Exponential { mean } => mean * rng.sample::<f64, _>(Exp1),
            KappaDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            KappaDist::Fixed { value } => value,
        }
    }

    fn mean(&self) -> f64 {
        match *self {
            KappaDist::Exponential { mean } => mean,
            KappaDist::Uniform { lo, hi } => 0.5 * (lo + hi),
            KappaDist::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignerConfig {
    pub family: Family,
    #[serde(default = "one")]
    pub matern_rho: f64,
    #[serde(default = "one")]
    pub tau2: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default = "default_kappa")]
    pub kappa: KappaDist,
    /// Per-coefficient prior variances; a single entry applies to every coefficient.
    #[serde(default = "default_beta_var")]
    pub beta_var: Vec<f64>,
    #[serde(default = "default_tau_range")]
    pub tau_range: (f64, f64),
    /// Probability that an event is observed (not censored).
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "default_shape_range")]
    pub shape_range: (f64, f64),
}

fn one() -> f64 {
    1.0
}
fn default_kappa() -> KappaDist {
    KappaDist::Exponential { mean: 1.0 }
}
fn default_beta_var() -> Vec<f64> {
    vec![1.0]
}
fn default_tau_range() -> (f64, f64) {
    (-2.0, 2.0)
}
fn default_shape_range() -> (f64, f64) {
    (0.5, 1.5)
}

impl DesignerConfig {
    fn base(family: Family) -> Self {
        DesignerConfig {
            family,
            matern_rho: 1.0,
            tau2: 1.0,
            sigma2: 1.0,
            kappa: default_kappa(),
            beta_var: default_beta_var(),
            tau_range: default_tau_range(),
            rho: 1.0,
            shape_range: default_shape_range(),
        }
    }

    /// GP mean with Matern rho = 1, tau^2 = 1 and kappa exponential with mean 1.
    pub fn linear() -> Self {
        Self::base(Family::Linear)
    }

    /// beta ~ N(0, 1), tau ~ U(-2, 2), kappa ~ U(1, 5).
    pub fn count() -> Self {
        DesignerConfig {
            kappa: KappaDist::Uniform { lo: 1.0, hi: 5.0 },
            ..Self::base(Family::Count)
        }
    }

    /// beta ~ N(0, 5) with observation probability `rho`.
    pub fn tte(rho: f64) -> Self {
        DesignerConfig {
            beta_var: vec![5.0],
            rho,
            ..Self::base(Family::Tte)
        }
    }

    pub fn gaussian_model(beta_var: f64, sigma2: f64) -> Self {
        DesignerConfig {
            beta_var: vec![beta_var],
            sigma2,
            kappa: KappaDist::Fixed { value: sigma2 },
            ..Self::base(Family::GaussianModel)
        }
    }

    pub fn poisson_model() -> Self {
        Self::base(Family::PoissonModel)
    }

    /// beta ~ N(0, 5), shape ~ U(0.5, 1.5), observation probability `rho`.
    pub fn weibull_model(rho: f64) -> Self {
        DesignerConfig {
            beta_var: vec![5.0],
            rho,
            ..Self::base(Family::WeibullModel)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GodError::Config(what.to_string()));
        if !(self.matern_rho > 0.0 && self.tau2 > 0.0 && self.sigma2 > 0.0) {
            return bad("matern_rho, tau2 and sigma2 must be positive");
        }
        if self.beta_var.is_empty() || self.beta_var.iter().any(|&v| !(v > 0.0)) {
            return bad("beta_var must hold positive variances");
        }
        if !(self.tau_range.0 <= self.tau_range.1) {
            return bad("tau_range must be ordered");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        let (lo, hi) = self.shape_range;
        if !(lo > 0.0 && lo < hi) {
            return bad("shape_range must be an ordered positive interval");
        }
        match self.kappa {
            KappaDist::Exponential { mean } if !(mean > 0.0) => return bad("kappa mean must be positive"),
            KappaDist::Uniform { lo, hi } if !(lo >= 0.0 && lo <= hi) => return bad("kappa range must be ordered"),
            KappaDist::Fixed { value } if !(value > 0.0) => return bad("kappa must be positive"),
            _ => {}
        }
        if self.family == Family::Count {
            // U(1, hi) puts no mass on kappa = 1 itself
            let overdispersed = match self.kappa {
                KappaDist::Exponential { .. } => false,
                KappaDist::Uniform { lo, hi } => lo >= 1.0 && hi > 1.0,
                KappaDist::Fixed { value } => value > 1.0,
            };
            if !overdispersed {
                return bad("count designer needs kappa > 1");
            }
        }
        Ok(())
    }

    fn beta_variance(&self, j: usize) -> f64 {
        if self.beta_var.len() == 1 {
            self.beta_var[0]
        } else {
            self.beta_var[j]
        }
    }

    pub fn kappa_mean(&self) -> f64 {
        self.kappa.mean()
    }
}

/// One realization of the hyper-variables.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperDraw {
    Linear { mu_bar: DVector<f64>, kappa: f64, sigma2: f64 },
    Count { beta: DVector<f64>, tau: DVector<f64>, kappa: f64 },
    Tte { beta: DVector<f64>, rho: f64 },
    GaussianModel { beta: DVector<f64>, sigma2: f64 },
    PoissonModel { beta: DVector<f64> },
    WeibullModel { beta: DVector<f64>, shape: f64, rho: f64 },
}

impl HyperDraw {
    pub fn family(&self) -> Family {
        match self {
            HyperDraw::Linear { .. } => Family::Linear,
            HyperDraw::Count { .. } => Family::Count,
            HyperDraw::Tte { .. } => Family::Tte,
            HyperDraw::GaussianModel { .. } => Family::GaussianModel,
            HyperDraw::PoissonModel { .. } => Family::PoissonModel,
            HyperDraw::WeibullModel { .. } => Family::WeibullModel,
        }
    }

    pub fn beta(&self) -> Option<&DVector<f64>> {
        match self {
            HyperDraw::Linear { .. } => None,
            HyperDraw::Count { beta, .. }
            | HyperDraw::Tte { beta, .. }
            | HyperDraw::GaussianModel { beta, .. }
            | HyperDraw::PoissonModel { beta }
            | HyperDraw::WeibullModel { beta, .. } => Some(beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSample {
    pub draw: HyperDraw,
    pub y: DVector<f64>,
    /// Event indicators (true = observed); present for time-to-event families.
    pub c: Option<Vec<bool>>,
    /// Designer mean of y for the linear and count families.
    pub mu: Option<DVector<f64>>,
}

/// A designer distribution bound to one design, with the design-dependent
/// pieces (model matrix, treatments, GP factor) computed once.
#[derive(Debug, Clone)]
pub struct Designer {
    pub config: DesignerConfig,
    pub f: ModelMatrix,
    pub uts: UniqueTreatmentStructure,
    /// Lower Cholesky factor of tau^2 A over the unique treatments (linear family).
    gp_factor: Option<DMatrix<f64>>,
}

impl Designer {
    pub fn new(config: &DesignerConfig, design: &Design, spec: &RegressionSpec) -> Result<Self> {
        let uts = unique_treatments(design, TREATMENT_TOL);
        Self::with_structure(config, expand_model_matrix(design, spec)?, uts)
    }

    pub fn with_structure(config: &DesignerConfig, f: ModelMatrix, uts: UniqueTreatmentStructure) -> Result<Self> {
        config.validate()?;
        if config.beta_var.len() != 1 && config.beta_var.len() != f.p() {
            return Err(GodError::Config(format!(
                "beta_var has {} entries for {} coefficients",
                config.beta_var.len(),
                f.p()
            )));
        }
        let gp_factor = if config.family == Family::Linear {
            let reps = uts.representative_rows();
            let q = uts.q();
            let rows: Vec<Vec<f64>> = (0..q).map(|i| reps.row(i).iter().copied().collect()).collect();
            let a = DMatrix::from_fn(q, q, |i, j| config.tau2 * matern_corr(&rows[i], &rows[j], config.matern_rho));
            Some(cholesky_with_jitter(&a)?.l())
        } else {
            None
        };
        Ok(Designer {
            config: config.clone(),
            f,
            uts,
            gp_factor,
        })
    }

    fn normal_vector<R: Rng + ?Sized>(&self, rng: &mut R, p: usize) -> DVector<f64> {
        DVector::from_fn(p, |j, _| {
            self.config.beta_variance(j).sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
    }

    pub fn sample_hyper<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperDraw {
        let cfg = &self.config;
        let p = self.f.p();
        match cfg.family {
            Family::Linear => {
                let q = self.uts.q();
                let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                let l = self.gp_factor.as_ref().expect("linear designer carries a GP factor");
                HyperDraw::Linear {
                    mu_bar: l * z,
                    kappa: cfg.kappa.sample(rng),
                    sigma2: cfg.sigma2,
                }
            }
            Family::Count => {
                let beta = self.normal_vector(rng, p);
                let (lo, hi) = cfg.tau_range;
                let tau = DVector::from_fn(self.uts.q(), |_, _| lo + (hi - lo) * rng.random::<f64>());
                HyperDraw::Count {
                    beta,
                    tau,
                    kappa: cfg.kappa.sample(rng),
                }
            }
            Family::Tte => HyperDraw::Tte {
                beta: self.normal_vector(rng, p),
                rho: cfg.rho,
            },
            Family::GaussianModel => HyperDraw::GaussianModel {
                beta: self.normal_vector(rng, p),
                sigma2: cfg.sigma2,
            },
            Family::PoissonModel => HyperDraw::PoissonModel {
                beta: self.normal_vector(rng, p),
            },
            Family::WeibullModel => {
                let beta = self.normal_vector(rng, p);
                let (lo, hi) = cfg.shape_range;
                HyperDraw::WeibullModel {
                    beta,
                    shape: lo + (hi - lo) * rng.random::<f64>(),
                    rho: cfg.rho,
                }
            }
        }
    }

    /// Responses (and censoring) given a hyper draw.
    pub fn sample_given<R: Rng + ?Sized>(&self, draw: HyperDraw, rng: &mut R) -> Result<ScenarioSample> {
        let n = self.f.n();
        let censoring = |rng: &mut R, rho: f64| -> Result<Vec<bool>> {
            let b = Bernoulli::new(rho).map_err(|e| GodError::Sampling(e.to_string()))?;
            Ok((0..n).map(|_| b.sample(rng)).collect())
        };
        match &draw {
            HyperDraw::Linear { mu_bar, kappa, .. } => {
                if !(*kappa >= 0.0) {
                    return Err(GodError::Sampling(format!("error variance {kappa} is negative")));
                }
                let mu = self.uts.expand(mu_bar);
                let sd = kappa.sqrt();
                let y = DVector::from_fn(n, |i, _| mu[i] + sd * rng.sample::<f64, _>(StandardNormal));
                Ok(ScenarioSample {
                    draw,
                    y,
                    c: None,
                    mu: Some(mu),
                })
            }
            HyperDraw::Count { beta, tau, kappa } => {
                if !(*kappa > 1.0) {
                    return Err(GodError::Sampling(format!("overdispersion kappa = {kappa} must exceed 1")));
                }
                let eta = self.f.predictor(beta) + self.uts.expand(tau);
                let mu = eta.map(f64::exp);
                let mut y = DVector::zeros(n);
                for i in 0..n {
                    // gamma-Poisson mixture: shape alpha, scale mu / alpha
                    let alpha = mu[i] / (kappa - 1.0);
                    let lambda = Gamma::new(alpha, mu[i] / alpha)
                        .map_err(|e| GodError::Sampling(e.to_string()))?
                        .sample(rng);
                    y[i] = poisson_draw(lambda, rng)?;
                }
                Ok(ScenarioSample {
                    draw,
                    y,
                    c: None,
                    mu: Some(mu),
                })
            }
            HyperDraw::Tte { beta, rho } => {
                let eta = self.f.predictor(beta);
                let y = eta.map(|e| rng.sample::<f64, _>(Exp1) / e.exp());
                let c = censoring(rng, *rho)?;
                Ok(ScenarioSample {
                    draw,
                    y,
                    c: Some(c),
                    mu: None,
                })
            }
            HyperDraw::GaussianModel { beta, sigma2 } => {
                let mu = self.f.predictor(beta);
                let sd = sigma2.sqrt();
                let y = DVector::from_fn(n, |i, _| mu[i] + sd * rng.sample::<f64, _>(StandardNormal));
                Ok(ScenarioSample {
                    draw,
                    y,
                    c: None,
                    mu: Some(mu),
                })
            }
            HyperDraw::PoissonModel { beta } => {
                let mu = self.f.predictor(beta).map(f64::exp);
                let mut y = DVector::zeros(n);
                for i in 0..n {
                    y[i] = poisson_draw(mu[i], rng)?;
                }
                Ok(ScenarioSample {
                    draw,
                    y,
                    c: None,
                    mu: Some(mu),
                })
            }
            HyperDraw::WeibullModel { beta, shape, rho } => {
                let eta = self.f.predictor(beta);
                // S(y) = exp(-e^eta y^shape), so e^eta y^shape ~ Exp(1)
                let y = eta.map(|e| (rng.sample::<f64, _>(Exp1) / e.exp()).powf(1.0 / shape));
                let c = censoring(rng, *rho)?;
                Ok(ScenarioSample {
                    draw,
                    y,
                    c: Some(c),
                    mu: None,
                })
            }
        }
    }

    pub fn sample_scenario<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ScenarioSample> {
        let draw = self.sample_hyper(rng);
        self.sample_given(draw, rng)
    }
}

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    Poisson::new(lambda)
        .map(|d| d.sample(rng))
        .map_err(|e| GodError::Sampling(format!("Poisson mean {lambda}: {e}")))
}

/// Draws hyper-variables for `config` on the treatments of `design`.
pub fn sample_hyper<R: Rng + ?Sized>(
    config: &DesignerConfig,
    design: &Design,
    spec: &RegressionSpec,
    rng: &mut R,
) -> Result<HyperDraw> {
    Ok(Designer::new(config, design, spec)?.sample_hyper(rng))
}

pub fn sample_scenario<R: Rng + ?Sized>(
    config: &DesignerConfig,
    design: &Design,
    spec: &RegressionSpec,
    rng: &mut R,
) -> Result<ScenarioSample> {
    Designer::new(config, design, spec)?.sample_scenario(rng)
}

/// Which expected-loss minimizer defines the target values.
#[derive(Debug, Clone, Copy)]
pub enum TargetRule<'a> {
    /// Least-squares projection of the designer mean onto the span of F.
    SumOfSquares,
    /// Smoothed projection G mu of the designer mean.
    L2(&'a L2Smoother),
    /// Poisson score equations with the responses replaced by the mean.
    QuasiLikelihood,
    /// The generating coefficients.
    Coefficients,
}

/// Target parameter values for a scenario under a loss.
pub fn target_params(
    rule: TargetRule,
    scenario: &ScenarioSample,
    f: &ModelMatrix,
) -> Result<DVector<f64>> {
    let mean = || {
        scenario
            .mu
            .as_ref()
            .ok_or_else(|| GodError::Config("this target rule needs a designer mean".into()))
    };
    match rule {
        TargetRule::SumOfSquares => least_squares(&f.0, mean()?),
        TargetRule::L2(smoother) => Ok(smoother.apply(mean()?)),
        TargetRule::QuasiLikelihood => poisson_fisher_scoring(&f.0, mean()?, &ScoringOptions::default()),
        TargetRule::Coefficients => scenario
            .draw
            .beta()
            .cloned()
            .ok_or_else(|| GodError::Config("the linear designer has no coefficients".into())),
    }
}
