//! Utilities, Monte Carlo expected utilities for each inference pipeline,
//! closed-form objectives and efficiencies.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{expand_model_matrix, Design, ModelMatrix, RegressionSpec};
use crate::designer::{target_params, Designer, DesignerConfig, ScenarioSample, TargetRule};
use crate::error::{GodError, Result};
use crate::glm::{poisson_fisher_scoring, ScoringOptions};
use crate::linalg::{cholesky, least_squares, log_det_from_cholesky};
use crate::losses::{
    gauss_legendre_grid, gp_fit_loo, resolve_weight, CalibrationWeight, GaussianNll, GpFitOptions, L2Quadrature,
    L2Smoother, Loss, PlLoss, PoissonNll, QlLoss, WeibullNll, WeightContext,
};
use crate::posterior::{
    l2_posterior, laplace_covariance, posterior_mode, ss_fixed_posterior, ss_random_posterior, GibbsPosteriorApprox,
    LogPrior, ModeOptions, PriorComponent,
};
use crate::special::{h1, h2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Utility {
    /// Negative squared error between target values and the posterior mode.
    Nse,
    /// Log posterior density at the target values.
    Sh,
}

pub fn nse_utility(t: &DVector<f64>, post: &GibbsPosteriorApprox) -> f64 {
    -(t - &post.mode).norm_squared()
}

pub fn sh_utility(t: &DVector<f64>, post: &GibbsPosteriorApprox) -> Result<f64> {
    post.log_density(t)
}

pub fn utility_value(utility: Utility, t: &DVector<f64>, post: &GibbsPosteriorApprox) -> Result<f64> {
    match utility {
        Utility::Nse => Ok(nse_utility(t, post)),
        Utility::Sh => sh_utility(t, post),
    }
}

/// Monte Carlo mean with its standard error over the successful samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Successful samples behind the mean.
    pub b: usize,
    pub n_failures: usize,
}

impl UtilityEstimate {
    pub fn exact(value: f64) -> Self {
        UtilityEstimate {
            mean: value,
            std_error: 0.0,
            b: 0,
            n_failures: 0,
        }
    }
}

/// Runs `sample(index, rng)` for indices 0..b, each on its own ChaCha stream
/// of `seed`, and averages the results in index order. Failed or non-finite
/// samples are dropped; more than `max_failure_frac * b` of them rejects the
/// estimate.
pub fn monte_carlo<F>(b: usize, seed: u64, max_failure_frac: f64, sample: F) -> Result<UtilityEstimate>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<f64> + Sync,
{
    if b == 0 {
        return Err(GodError::Config("Monte Carlo sample size must be at least 1".into()));
    }
    let draws: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample(i, &mut rng)
        })
        .collect();
    let mut values = Vec::with_capacity(b);
    let mut first: Option<String> = None;
    for d in draws {
        match d {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(v) => {
                first.get_or_insert_with(|| format!("non-finite utility {v}"));
            }
            Err(e) => {
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let failures = b - values.len();
    if failures as f64 > max_failure_frac * b as f64 || values.is_empty() {
        return Err(GodError::TooManyFailures {
            failures,
            b,
            first: first.unwrap_or_default(),
        });
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std_error = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt()
    } else {
        0.0
    };
    Ok(UtilityEstimate {
        mean,
        std_error,
        b: values.len(),
        n_failures: failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    McGibbs,
    ClosedNseFixed,
    ClosedShFixed,
    ClosedAOptimal,
    ClosedDOptimal,
    ShRandomMc,
    McBayes,
}

impl ObjectiveKind {
    pub fn is_stochastic(self) -> bool {
        matches!(self, ObjectiveKind::McGibbs | ObjectiveKind::ShRandomMc | ObjectiveKind::McBayes)
    }

    /// Utility whose efficiency formula applies to this objective's scale.
    pub fn efficiency_scale(self, utility: Utility) -> Utility {
        match self {
            ObjectiveKind::ClosedAOptimal | ObjectiveKind::ClosedNseFixed => Utility::Nse,
            ObjectiveKind::ClosedDOptimal | ObjectiveKind::ClosedShFixed | ObjectiveKind::ShRandomMc => Utility::Sh,
            ObjectiveKind::McGibbs | ObjectiveKind::McBayes => utility,
        }
    }
}

/// The studied loss / weight / designer combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    LinearSsFixed,
    LinearSsRandom,
    LinearL2,
    CountQl,
    TtePl,
    BayesPoisson,
    BayesWeibull,
    BayesGaussian,
}

impl Problem {
    pub fn is_bayes(self) -> bool {
        matches!(self, Problem::BayesPoisson | Problem::BayesWeibull | Problem::BayesGaussian)
    }

    pub fn default_designer(self) -> DesignerConfig {
        match self {
            Problem::LinearSsFixed | Problem::LinearSsRandom | Problem::LinearL2 => DesignerConfig::linear(),
            Problem::CountQl => DesignerConfig::count(),
            Problem::TtePl => DesignerConfig::tte(1.0),
            Problem::BayesPoisson => DesignerConfig::poisson_model(),
            Problem::BayesWeibull => DesignerConfig::weibull_model(1.0),
            Problem::BayesGaussian => DesignerConfig::gaussian_model(1.0, 1.0),
        }
    }

    pub fn default_weight(self) -> CalibrationWeight {
        match self {
            Problem::LinearSsFixed => CalibrationWeight::PureError,
            Problem::LinearSsRandom => CalibrationWeight::RandomConjugate,
            Problem::LinearL2 => CalibrationWeight::L2Trace,
            Problem::CountQl => CalibrationWeight::Dispersion,
            _ => CalibrationWeight::Unit,
        }
    }

    /// Objective used when optimizing this problem under `utility`: closed
    /// forms where they exist, Monte Carlo otherwise.
    pub fn preferred_kind(self, utility: Utility) -> ObjectiveKind {
        match (self, utility) {
            (Problem::LinearSsFixed, Utility::Sh) => ObjectiveKind::ClosedShFixed,
            (Problem::LinearSsFixed, Utility::Nse) => ObjectiveKind::ClosedNseFixed,
            (Problem::LinearSsRandom, Utility::Sh) => ObjectiveKind::ShRandomMc,
            (Problem::LinearSsRandom, Utility::Nse) => ObjectiveKind::ClosedAOptimal,
            (p, _) if p.is_bayes() => ObjectiveKind::McBayes,
            _ => ObjectiveKind::McGibbs,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    /// Prior variance on the partial-likelihood slopes; `None` is flat.
    pub pl_prior_var: Option<f64>,
    /// Gauss-Legendre points per dimension for the L2 loss.
    pub quad_points: usize,
    pub gp: GpFitOptions,
    pub mode: ModeOptions,
    pub max_failure_frac: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            pl_prior_var: Some(5.0),
            quad_points: 10,
            gp: GpFitOptions::default(),
            mode: ModeOptions::default(),
            max_failure_frac: 0.1,
        }
    }
}

/// Everything needed to evaluate one objective on arbitrary designs.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub utility: Utility,
    pub problem: Problem,
    pub regression: RegressionSpec,
    pub designer: DesignerConfig,
    pub weight: CalibrationWeight,
    pub b: usize,
    pub options: PipelineOptions,
}

impl ObjectiveSpec {
    pub fn new(problem: Problem, utility: Utility, regression: RegressionSpec, b: usize) -> Self {
        ObjectiveSpec {
            kind: problem.preferred_kind(utility),
            utility,
            problem,
            regression,
            designer: problem.default_designer(),
            weight: problem.default_weight(),
            b,
            options: PipelineOptions::default(),
        }
    }

    pub fn closed(kind: ObjectiveKind, regression: RegressionSpec) -> Self {
        let (problem, utility) = match kind {
            ObjectiveKind::ClosedNseFixed | ObjectiveKind::ClosedAOptimal => (Problem::LinearSsFixed, Utility::Nse),
            _ => (Problem::LinearSsFixed, Utility::Sh),
        };
        ObjectiveSpec {
            kind,
            ..ObjectiveSpec::new(problem, utility, regression, 1)
        }
    }

    pub fn with_kind(mut self, kind: ObjectiveKind) -> Self {
        self.kind = kind;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GodError::Config(m));
        match self.kind {
            ObjectiveKind::McBayes if !self.problem.is_bayes() => {
                bad(format!("mc_bayes needs a Bayesian problem, got {:?}", self.problem))
            }
            ObjectiveKind::McGibbs if self.problem.is_bayes() => {
                bad(format!("mc_gibbs needs a Gibbs problem, got {:?}", self.problem))
            }
            ObjectiveKind::ShRandomMc if self.problem != Problem::LinearSsRandom || self.utility != Utility::Sh => {
                bad("sh_random_mc applies to linear_ss_random with the SH utility".into())
            }
            k if k.is_stochastic() && self.b == 0 => bad("Monte Carlo objectives need b >= 1".into()),
            _ => Ok(()),
        }
    }
}

/// A design criterion to maximize.
pub trait Objective: Send + Sync {
    fn is_stochastic(&self) -> bool;

    /// Default Monte Carlo size (ignored by deterministic objectives).
    fn default_b(&self) -> usize;

    /// Evaluates with the given seed block and sample size. Equal seeds give
    /// common random numbers across designs.
    fn evaluate_with(&self, design: &Design, seed: u64, b: usize) -> Result<UtilityEstimate>;

    fn evaluate(&self, design: &Design, seed: u64) -> Result<UtilityEstimate> {
        self.evaluate_with(design, seed, self.default_b())
    }
}

/// An [`ObjectiveSpec`] with its design-independent pieces precomputed.
#[derive(Debug, Clone)]
pub struct ExpectedUtility {
    pub spec: ObjectiveSpec,
    quad: Option<L2Quadrature>,
}

impl ExpectedUtility {
    pub fn new(spec: ObjectiveSpec) -> Result<Self> {
        spec.validate()?;
        spec.designer.validate()?;
        let quad = if spec.problem == Problem::LinearL2 && spec.kind == ObjectiveKind::McGibbs {
            let k = spec
                .regression
                .terms()
                .iter()
                .filter_map(|t| t.max_var())
                .max()
                .map_or(1, |v| v + 1);
            Some(L2Quadrature::new(
                &spec.regression,
                gauss_legendre_grid(k, spec.options.quad_points),
            )?)
        } else {
            None
        };
        Ok(ExpectedUtility { spec, quad })
    }

    pub fn quadrature(&self) -> Option<&L2Quadrature> {
        self.quad.as_ref()
    }
}

impl Objective for ExpectedUtility {
    fn is_stochastic(&self) -> bool {
        self.spec.kind.is_stochastic()
    }

    fn default_b(&self) -> usize {
        self.spec.b
    }

    fn evaluate_with(&self, design: &Design, seed: u64, b: usize) -> Result<UtilityEstimate> {
        match self.spec.kind {
            ObjectiveKind::McGibbs | ObjectiveKind::McBayes => mc_expected_utility(design, self, seed, b),
            ObjectiveKind::ShRandomMc => {
                sh_random_objective(design, &self.spec.regression, &self.spec.designer, b, seed, &self.spec.options)
            }
            kind => Ok(UtilityEstimate::exact(closed_objective(design, kind, &self.spec.regression)?)),
        }
    }
}

/// Closed-form objective value; -inf when F^T F is singular or the pure-error
/// degrees of freedom make the Gibbs posterior (or its expected SH utility)
/// undefined.
pub fn closed_objective(design: &Design, kind: ObjectiveKind, regression: &RegressionSpec) -> Result<f64> {
    let f = expand_model_matrix(design, regression)?;
    let Ok(chol) = cholesky(&f.gram()) else {
        return Ok(f64::NEG_INFINITY);
    };
    let logdet = log_det_from_cholesky(&chol);
    let trace_inv = || chol.inverse().trace();
    let d = || crate::design::unique_treatments(design, crate::design::TREATMENT_TOL).d();
    let p = f.p() as f64;
    let v = match kind {
        ObjectiveKind::ClosedAOptimal => -trace_inv(),
        ObjectiveKind::ClosedDOptimal => logdet,
        ObjectiveKind::ClosedNseFixed => -trace_inv() * h1(d()),
        ObjectiveKind::ClosedShFixed => -p * h2(d()) + logdet,
        other => {
            return Err(GodError::Config(format!("{other:?} has no closed form")));
        }
    };
    Ok(if v.is_nan() { f64::NEG_INFINITY } else { v })
}

/// Relative efficiency of a design scoring `value_x` against the optimum
/// `value_opt`: value_opt / value_x on the negative NSE scale and
/// exp((value_x - value_opt) / p) on the log-determinant (SH) scale.
pub fn efficiency(value_x: f64, value_opt: f64, utility: Utility, p: usize) -> f64 {
    if value_x == f64::NEG_INFINITY {
        return 0.0;
    }
    match utility {
        Utility::Nse => value_opt / value_x,
        Utility::Sh => ((value_x - value_opt) / p as f64).exp(),
    }
}

/// log|F^T F| - E[u*] with u* = p log sigma_hat^2 + n log(1 + ||y - mu||^2_{H_F} / ((n - p) sigma_hat^2)),
/// twice the expected log multivariate-t posterior density at the targets up
/// to a design-free constant.
pub fn sh_random_objective(
    design: &Design,
    regression: &RegressionSpec,
    designer: &DesignerConfig,
    b: usize,
    seed: u64,
    options: &PipelineOptions,
) -> Result<UtilityEstimate> {
    let des = Designer::new(designer, design, regression)?;
    let f = &des.f;
    let (n, p) = (f.n(), f.p());
    if n <= p {
        return Err(GodError::DegreesOfFreedom { n, p });
    }
    let Ok(chol) = cholesky(&f.gram()) else {
        return Ok(UtilityEstimate::exact(f64::NEG_INFINITY));
    };
    let logdet = log_det_from_cholesky(&chol);
    let est = monte_carlo(b, seed, options.max_failure_frac, |_, rng| {
        let s = des.sample_scenario(rng)?;
        let mu = s.mu.as_ref().expect("linear designer has a mean");
        u_star_sh(&s.y, mu, f)
    })?;
    Ok(UtilityEstimate {
        mean: logdet - est.mean,
        ..est
    })
}

/// p log sigma_hat^2 + n log(1 + ||y - mu||^2_{H_F} / ((n - p) sigma_hat^2))
pub fn u_star_sh(y: &DVector<f64>, mu: &DVector<f64>, f: &ModelMatrix) -> Result<f64> {
    let (n, p) = (f.n(), f.p());
    let fit = least_squares(&f.0, y)?;
    let s2 = (y - f.predictor(&fit)).norm_squared() / (n - p) as f64;
    if !(s2 > 0.0) {
        return Err(GodError::Degenerate("residual variance is zero".into()));
    }
    let e = y - mu;
    let proj = f.predictor(&least_squares(&f.0, &e)?);
    let h_norm = proj.dot(&e);
    Ok(p as f64 * s2.ln() + n as f64 * (h_norm / ((n - p) as f64 * s2)).ln_1p())
}

/// Per-design state shared by every Monte Carlo sample.
struct DesignContext<'a> {
    eu: &'a ExpectedUtility,
    design: &'a Design,
    designer: Designer,
    /// Model matrix entering the loss (the partial likelihood drops the intercept).
    f_loss: ModelMatrix,
    /// Coordinates of the target compared by the utility.
    keep: Vec<usize>,
    prior: LogPrior,
}

impl<'a> DesignContext<'a> {
    fn new(eu: &'a ExpectedUtility, design: &'a Design) -> Result<Self> {
        let spec = &eu.spec;
        let designer = Designer::new(&spec.designer, design, &spec.regression)?;
        let p = designer.f.p();
        let (f_loss, keep) = if spec.problem == Problem::TtePl && spec.regression.has_intercept() {
            let keep: Vec<usize> = spec
                .regression
                .terms()
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.is_intercept())
                .map(|(j, _)| j)
                .collect();
            let reduced = spec.regression.without_intercept()?;
            (expand_model_matrix(design, &reduced)?, keep)
        } else {
            (designer.f.clone(), (0..p).collect())
        };
        let beta_var = |j: usize| {
            let v = &spec.designer.beta_var;
            if v.len() == 1 {
                v[0]
            } else {
                v[j]
            }
        };
        let prior = match spec.problem {
            Problem::TtePl => match spec.options.pl_prior_var {
                Some(var) => LogPrior::normal(&vec![0.0; keep.len()], &vec![var; keep.len()]),
                None => LogPrior::flat(),
            },
            Problem::BayesPoisson | Problem::BayesGaussian => {
                LogPrior::normal(&vec![0.0; p], &(0..p).map(beta_var).collect::<Vec<_>>())
            }
            Problem::BayesWeibull => {
                let mut comps: Vec<PriorComponent> = (0..p)
                    .map(|j| PriorComponent::Normal {
                        mean: 0.0,
                        var: beta_var(j),
                    })
                    .collect();
                comps.push(PriorComponent::LogisticUnit);
                LogPrior::new(comps)
            }
            _ => LogPrior::flat(),
        };
        Ok(DesignContext {
            eu,
            design,
            designer,
            f_loss,
            keep,
            prior,
        })
    }

    fn mode_options(&self, index: usize) -> ModeOptions {
        ModeOptions {
            seed: index as u64,
            ..self.eu.spec.options.mode
        }
    }

    /// Posterior from the generic mode + Laplace path; the covariance is only
    /// formed when the SH utility needs it.
    fn laplace(
        &self,
        loss: &dyn Loss,
        w: f64,
        init: &DVector<f64>,
        index: usize,
    ) -> Result<GibbsPosteriorApprox> {
        let mode = posterior_mode(loss, w, &self.prior, init, &self.mode_options(index))?;
        let (scale, repaired) = match self.eu.spec.utility {
            Utility::Sh => laplace_covariance(loss, w, &self.prior, &mode)?,
            Utility::Nse => (DMatrix::zeros(0, 0), false),
        };
        Ok(GibbsPosteriorApprox {
            kind: crate::posterior::PosteriorKind::Normal,
            mode,
            scale,
            repaired,
        })
    }

    fn score(&self, target: &DVector<f64>, post: &GibbsPosteriorApprox) -> Result<f64> {
        let utility = self.eu.spec.utility;
        if self.keep.len() == post.p() {
            return utility_value(utility, target, post);
        }
        // utility over a leading block of the posterior (nuisance parameters last)
        let m = self.keep.len();
        let sub = GibbsPosteriorApprox {
            kind: post.kind,
            mode: post.mode.rows(0, m).into_owned(),
            scale: if post.scale.nrows() >= m {
                post.scale.view((0, 0), (m, m)).into_owned()
            } else {
                post.scale.clone()
            },
            repaired: post.repaired,
        };
        utility_value(utility, target, &sub)
    }

    fn weight_for(&self, s: &ScenarioSample, eta_hat: Option<&DVector<f64>>) -> Result<f64> {
        let ctx = WeightContext {
            y: Some(&s.y),
            f: Some(&self.f_loss),
            uts: Some(&self.designer.uts),
            eta_hat,
            l2: None,
        };
        Ok(resolve_weight(&self.eu.spec.weight, &ctx)?.value)
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let spec = &self.eu.spec;
        let s = self.designer.sample_scenario(rng)?;
        let f = &self.designer.f;
        match spec.problem {
            Problem::LinearSsFixed => {
                let target = target_params(TargetRule::SumOfSquares, &s, f)?;
                let post = match spec.weight {
                    CalibrationWeight::PureError => ss_fixed_posterior(&s.y, f, &self.designer.uts)?,
                    _ => {
                        let w = self.weight_for(&s, None)?;
                        GibbsPosteriorApprox::normal(
                            least_squares(&f.0, &s.y)?,
                            crate::linalg::spd_inverse(&f.gram())? / (2.0 * w),
                        )
                    }
                };
                self.score(&target, &post)
            }
            Problem::LinearSsRandom => {
                let target = target_params(TargetRule::SumOfSquares, &s, f)?;
                self.score(&target, &ss_random_posterior(&s.y, f)?)
            }
            Problem::LinearL2 => {
                let quad = self.eu.quad.as_ref().expect("L2 objective carries its quadrature");
                let fit = gp_fit_loo(&s.y, self.design, &spec.options.gp)?;
                let smoother = L2Smoother::new(quad, self.design, &fit)?;
                let target = target_params(TargetRule::L2(&smoother), &s, f)?;
                let theta_hat = smoother.apply(&s.y);
                let post = match spec.utility {
                    Utility::Nse => GibbsPosteriorApprox::normal(theta_hat, DMatrix::zeros(0, 0)),
                    Utility::Sh => {
                        let ctx = WeightContext {
                            y: Some(&s.y),
                            l2: Some((quad, &smoother)),
                            ..Default::default()
                        };
                        let w = resolve_weight(&spec.weight, &ctx)?.value;
                        l2_posterior(theta_hat, w, quad)?
                    }
                };
                self.score(&target, &post)
            }
            Problem::CountQl => {
                let target = target_params(TargetRule::QuasiLikelihood, &s, f)?;
                let theta_hat = poisson_fisher_scoring(&f.0, &s.y, &ScoringOptions::default())?;
                let eta_hat = f.predictor(&theta_hat);
                let w = self.weight_for(&s, Some(&eta_hat))?;
                let loss = QlLoss {
                    y: s.y.clone(),
                    f: f.clone(),
                };
                let post = self.laplace(&loss, w, &theta_hat, index)?;
                self.score(&target, &post)
            }
            Problem::TtePl => {
                let beta = target_params(TargetRule::Coefficients, &s, f)?;
                let target = DVector::from_fn(self.keep.len(), |j, _| beta[self.keep[j]]);
                let w = self.weight_for(&s, None)?;
                let loss = PlLoss {
                    y: s.y.clone(),
                    c: s.c.clone().expect("time-to-event scenario has censoring"),
                    f: self.f_loss.clone(),
                };
                let post = self.laplace(&loss, w, &DVector::zeros(self.keep.len()), index)?;
                self.score(&target, &post)
            }
            Problem::BayesPoisson => {
                let target = target_params(TargetRule::Coefficients, &s, f)?;
                let loss = PoissonNll {
                    y: s.y.clone(),
                    f: f.clone(),
                };
                let post = self.laplace(&loss, 1.0, &DVector::zeros(f.p()), index)?;
                self.score(&target, &post)
            }
            Problem::BayesGaussian => {
                let target = target_params(TargetRule::Coefficients, &s, f)?;
                let loss = GaussianNll {
                    y: s.y.clone(),
                    f: f.clone(),
                    sigma2: spec.designer.sigma2,
                };
                let post = self.laplace(&loss, 1.0, &DVector::zeros(f.p()), index)?;
                self.score(&target, &post)
            }
            Problem::BayesWeibull => {
                let target = target_params(TargetRule::Coefficients, &s, f)?;
                let loss = WeibullNll {
                    y: s.y.clone(),
                    c: s.c.clone().expect("time-to-event scenario has censoring"),
                    f: f.clone(),
                };
                let post = self.laplace(&loss, 1.0, &DVector::zeros(f.p() + 1), index)?;
                self.score(&target, &post)
            }
        }
    }
}

/// Monte Carlo estimate of the expected utility: per sample, draw
/// hyper-variables, compute target values, draw responses, form the Gibbs (or
/// Bayesian) posterior and evaluate the utility at the targets.
pub fn mc_expected_utility(design: &Design, eu: &ExpectedUtility, seed: u64, b: usize) -> Result<UtilityEstimate> {
    let ctx = DesignContext::new(eu, design)?;
    if eu.spec.problem == Problem::LinearSsFixed
        && eu.spec.weight == CalibrationWeight::PureError
        && ctx.designer.uts.d() == 0
    {
        // no replicates: the Gibbs posterior does not exist for any response
        return Ok(UtilityEstimate {
            mean: f64::NEG_INFINITY,
            std_error: 0.0,
            b: 0,
            n_failures: b,
        });
    }
    if cholesky(&ctx.f_loss.gram()).is_err() && !eu.spec.problem.is_bayes() {
        return Ok(UtilityEstimate {
            mean: f64::NEG_INFINITY,
            std_error: 0.0,
            b: 0,
            n_failures: b,
        });
    }
    monte_carlo(b, seed, eu.spec.options.max_failure_frac, |i, rng| ctx.sample(i, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn replicated_design(seed: u64) -> Design {
        // 10 distinct points, six of them duplicated: d = 6
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut rows = base.clone();
        rows.extend(base.iter().take(6).cloned());
        Design::from_rows(&rows).unwrap()
    }

    #[test]
    fn nse_examples() {
        let post = GibbsPosteriorApprox::normal(DVector::from_vec(vec![1.0, 1.0]), DMatrix::identity(2, 2));
        assert_eq!(nse_utility(&DVector::from_vec(vec![1.0, 1.0]), &post), 0.0);
        assert_eq!(nse_utility(&DVector::from_vec(vec![4.0, 5.0]), &post), -25.0);
    }

    #[test]
    fn efficiency_examples() {
        assert!((efficiency(18.26, 19.92, Utility::Sh, 10) - 0.847).abs() < 1e-3);
        assert!((efficiency(12.05, 15.73, Utility::Sh, 10) - 0.692).abs() < 1e-3);
        assert!((efficiency(-0.7882, -0.6950, Utility::Nse, 10) - 0.8818).abs() < 1e-4);
        assert_eq!(efficiency(f64::NEG_INFINITY, 11.95, Utility::Sh, 10), 0.0);
        assert_eq!(efficiency(3.0, 3.0, Utility::Sh, 10), 1.0);
    }

    #[test]
    fn closed_forms_on_identity_model() {
        // F = I when each run switches on its own indicator term
        let d = Design::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let spec = RegressionSpec::parse(&["x1", "x2"]).unwrap();
        assert_eq!(closed_objective(&d, ObjectiveKind::ClosedDOptimal, &spec).unwrap(), 0.0);
        assert_eq!(closed_objective(&d, ObjectiveKind::ClosedAOptimal, &spec).unwrap(), -2.0);
        assert_eq!(
            closed_objective(&d, ObjectiveKind::ClosedShFixed, &spec).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(
            closed_objective(&d, ObjectiveKind::ClosedNseFixed, &spec).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn singular_information_is_minus_infinity() {
        let d = Design::from_rows(&[vec![0.5], vec![0.5], vec![0.5]]).unwrap();
        let spec = RegressionSpec::linear(1);
        assert_eq!(
            closed_objective(&d, ObjectiveKind::ClosedDOptimal, &spec).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn translation_adds_constant() {
        let base = monte_carlo(200, 5, 0.1, |_, rng| Ok(rng.random::<f64>())).unwrap();
        let shifted = monte_carlo(200, 5, 0.1, |_, rng| Ok(rng.random::<f64>() + 3.5)).unwrap();
        assert!((shifted.mean - base.mean - 3.5).abs() < 1e-12);
        assert!((shifted.std_error - base.std_error).abs() < 1e-12);
    }

    #[test]
    fn failure_policy() {
        let ok = monte_carlo(100, 1, 0.1, |i, _| if i % 10 == 0 { Err(GodError::Sampling("boom".into())) } else { Ok(1.0) }).unwrap();
        assert_eq!((ok.b, ok.n_failures), (90, 10));
        let err = monte_carlo(100, 1, 0.1, |i, _| if i % 9 == 0 { Err(GodError::Sampling("boom".into())) } else { Ok(1.0) });
        assert!(matches!(err, Err(GodError::TooManyFailures { .. })));
    }

    #[test]
    fn mc_is_seed_deterministic() {
        let d = replicated_design(71);
        let mut spec = ObjectiveSpec::new(Problem::LinearSsFixed, Utility::Sh, RegressionSpec::full_quadratic(3), 50);
        spec.kind = ObjectiveKind::McGibbs;
        let eu = ExpectedUtility::new(spec).unwrap();
        let a = eu.evaluate(&d, 9).unwrap();
        let b = eu.evaluate(&d, 9).unwrap();
        assert_eq!(a, b);
        let c = eu.evaluate(&d, 10).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn near_noiseless_designer_has_tiny_nse() {
        let d = replicated_design(72);
        let mut spec = ObjectiveSpec::new(Problem::LinearSsRandom, Utility::Nse, RegressionSpec::linear(3), 20);
        spec.kind = ObjectiveKind::McGibbs;
        spec.designer.tau2 = 1e-8;
        spec.designer.kappa = crate::designer::KappaDist::Fixed { value: 1e-8 };
        let eu = ExpectedUtility::new(spec).unwrap();
        let e = eu.evaluate(&d, 3).unwrap();
        assert!(e.mean <= 0.0 && e.mean > -1e-5, "mean {}", e.mean);
    }

    #[test]
    fn u_star_matches_t_density() {
        // log t-density at the target = c(n, p) + (log|F^T F| - u*) / 2
        let d = replicated_design(73);
        let regression = RegressionSpec::linear(3);
        let des = Designer::new(&DesignerConfig::linear(), &d, &regression).unwrap();
        let (n, p) = (16.0, 4.0);
        let c = crate::special::ln_gamma(n / 2.0)
            - crate::special::ln_gamma((n - p) / 2.0)
            - p / 2.0 * ((n - p) * std::f64::consts::PI).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        for _ in 0..5 {
            let s = des.sample_scenario(&mut rng).unwrap();
            let mu = s.mu.clone().unwrap();
            let target = least_squares(&des.f.0, &mu).unwrap();
            let post = ss_random_posterior(&s.y, &des.f).unwrap();
            let lhs = post.log_density(&target).unwrap();
            let logdet = des.f.gram().determinant().ln();
            let rhs = c + 0.5 * (logdet - u_star_sh(&s.y, &mu, &des.f).unwrap());
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn saturated_design_u_star_oracle() {
        // q = p: H_F = H_Z removes mu, so with kappa ~ Exp(1) and d = n - p
        // E u* = p (-gamma + ln 2 + psi(d/2) - ln d) + n (psi(n/2) - psi(d/2))
        let d = replicated_design(76);
        let regression = RegressionSpec::full_quadratic(3);
        let e = sh_random_objective(&d, &regression, &DesignerConfig::linear(), 20000, 2, &PipelineOptions::default())
            .unwrap();
        let logdet = closed_objective(&d, ObjectiveKind::ClosedDOptimal, &regression).unwrap();
        let (n, p, dof) = (16.0, 10.0, 6.0);
        let psi = crate::special::digamma;
        let oracle = p * (-crate::special::EULER_GAMMA + 2f64.ln() + psi(dof / 2.0) - dof.ln())
            + n * (psi(n / 2.0) - psi(dof / 2.0));
        let u_star = logdet - e.mean;
        assert!((u_star - oracle).abs() < 4.0 * e.std_error, "{u_star} vs {oracle} (se {})", e.std_error);
    }

    #[test]
    fn exact_expected_sh_for_known_error_variance() {
        // with kappa fixed at 1 and a saturated treatment model the closed form
        // is -p/2 log(4 pi) + (-p h2(d) + log|F^T F|)/2 - p/2 E log kappa
        let d = replicated_design(75);
        let regression = RegressionSpec::full_quadratic(3);
        let mut spec = ObjectiveSpec::new(Problem::LinearSsFixed, Utility::Sh, regression.clone(), 4000);
        spec.kind = ObjectiveKind::McGibbs;
        spec.designer.kappa = crate::designer::KappaDist::Fixed { value: 1.0 };
        let eu = ExpectedUtility::new(spec).unwrap();
        let e = eu.evaluate(&d, 1).unwrap();
        let closed = closed_objective(&d, ObjectiveKind::ClosedShFixed, &regression).unwrap();
        let expect = -5.0 * (4.0 * std::f64::consts::PI).ln() + 0.5 * closed;
        assert!((e.mean - expect).abs() < 4.0 * e.std_error, "{} vs {expect} (se {})", e.mean, e.std_error);
    }
}
