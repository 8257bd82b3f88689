//! Gibbs posterior approximations: generic mode finding with a Laplace
//! covariance, plus the closed forms available for the linear losses.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{ModelMatrix, UniqueTreatmentStructure};
use crate::error::{GodError, Result};
use crate::linalg::{cholesky, least_squares, log_det_from_cholesky, repair_spd, spd_inverse, symmetrize};
use crate::losses::{fd_gradient, fd_hessian, pure_error_variance, L2Quadrature, Loss};
use crate::quasi_newton::{is_stationary, minimize, QnOptions};
use crate::special::ln_gamma;

/// Precision eigenvalues below this mark a direction along which the loss is
/// flat, i.e. an estimate running off to infinity.
pub const FLAT_CURVATURE: f64 = 1e-8;

const DEGENERATE_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosteriorKind {
    Normal,
    MultivariateT { dof: f64 },
}

/// Normal or multivariate-t summary of a Gibbs posterior.
#[derive(Debug, Clone)]
pub struct GibbsPosteriorApprox {
    pub kind: PosteriorKind,
    pub mode: DVector<f64>,
    /// Covariance for the normal kind, scale matrix for the t kind.
    pub scale: DMatrix<f64>,
    /// Set when the precision needed eigenvalue flooring.
    pub repaired: bool,
}

impl GibbsPosteriorApprox {
    pub fn normal(mode: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        GibbsPosteriorApprox {
            kind: PosteriorKind::Normal,
            mode,
            scale: covariance,
            repaired: false,
        }
    }

    pub fn p(&self) -> usize {
        self.mode.len()
    }

    pub fn dof(&self) -> Option<f64> {
        match self.kind {
            PosteriorKind::Normal => None,
            PosteriorKind::MultivariateT { dof } => Some(dof),
        }
    }

    /// Log density at t.
    pub fn log_density(&self, t: &DVector<f64>) -> Result<f64> {
        let p = self.p() as f64;
        let chol = cholesky(&self.scale)?;
        let diff = t - &self.mode;
        let maha = chol.solve(&diff).dot(&diff);
        let half_logdet = 0.5 * log_det_from_cholesky(&chol);
        Ok(match self.kind {
            PosteriorKind::Normal => -0.5 * p * (2.0 * std::f64::consts::PI).ln() - half_logdet - 0.5 * maha,
            PosteriorKind::MultivariateT { dof } => {
                ln_gamma(0.5 * (dof + p)) - ln_gamma(0.5 * dof) - 0.5 * p * (dof * std::f64::consts::PI).ln()
                    - half_logdet
                    - 0.5 * (dof + p) * (maha / dof).ln_1p()
            }
        })
    }

    /// Marginal spread of coordinate j: standard deviation (normal) or scale (t).
    pub fn marginal_scale(&self, j: usize) -> f64 {
        self.scale[(j, j)].sqrt()
    }
}

/// One coordinate's log prior density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorComponent {
    /// Improper uniform; contributes nothing.
    Flat,
    Normal { mean: f64, var: f64 },
    /// log sigmoid(s) + log sigmoid(-s): the density of s when
    /// lo + (hi - lo) sigmoid(s) is uniform on (lo, hi).
    LogisticUnit,
}

impl PriorComponent {
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            PriorComponent::Flat => (0.0, 0.0, 0.0),
            PriorComponent::Normal { mean, var } => {
                let d = s - mean;
                (
                    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * d * d / var,
                    -d / var,
                    -1.0 / var,
                )
            }
            PriorComponent::LogisticUnit => {
                let sig = 1.0 / (1.0 + (-s).exp());
                // log sigmoid(x) = -softplus(-x), computed stably
                let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
                (-softplus(-s) - softplus(s), 1.0 - 2.0 * sig, -2.0 * sig * (1.0 - sig))
            }
        }
    }
}

/// Independent per-coordinate log prior; the empty prior is flat everywhere.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogPrior {
    components: Vec<PriorComponent>,
}

impl LogPrior {
    pub fn flat() -> Self {
        LogPrior::default()
    }

    pub fn new(components: Vec<PriorComponent>) -> Self {
        LogPrior { components }
    }

    pub fn normal(means: &[f64], vars: &[f64]) -> Self {
        LogPrior::new(
            means
                .iter()
                .zip(vars)
                .map(|(&mean, &var)| PriorComponent::Normal { mean, var })
                .collect(),
        )
    }

    pub fn is_flat(&self) -> bool {
        self.components.iter().all(|c| *c == PriorComponent::Flat)
    }

    /// Value, gradient and (diagonal) Hessian at t.
    pub fn evaluate(&self, t: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let p = t.len();
        let mut v = 0.0;
        let mut g = DVector::zeros(p);
        let mut h = DVector::zeros(p);
        for (j, c) in self.components.iter().enumerate().take(p) {
            let (a, b, d) = c.eval(t[j]);
            v += a;
            g[j] = b;
            h[j] = d;
        }
        (v, g, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModeOptions {
    pub qn: QnOptions,
    /// Perturbed restarts tried when the first run fails to converge.
    pub restarts: usize,
    pub perturbation: f64,
    /// Seeds the restart perturbations; MC loops pass the sample index.
    pub seed: u64,
    /// Absolute gradient max-norm accepted after the Newton polish.
    pub grad_tol: f64,
}

impl Default for ModeOptions {
    fn default() -> Self {
        ModeOptions {
            qn: QnOptions::default(),
            restarts: 4,
            perturbation: 0.5,
            seed: 0,
            grad_tol: 1e-8,
        }
    }
}

/// w l(t) - log pi(t) with gradient and, when the loss supplies one, Hessian.
fn negative_log_gibbs(
    loss: &dyn Loss,
    w: f64,
    prior: &LogPrior,
    t: &DVector<f64>,
) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
    let e = loss.evaluate(t)?;
    let g = match e.gradient {
        Some(g) => g,
        None => fd_gradient(loss, t)?,
    };
    let (pv, pg, ph) = prior.evaluate(t);
    let value = w * e.value - pv;
    if !value.is_finite() {
        return Err(GodError::Overflow(value.abs()));
    }
    let hess = e.hessian.map(|h| h * w - DMatrix::from_diagonal(&ph));
    Ok((value, g * w - pg, hess))
}

fn stationary(value: f64, g: &DVector<f64>, opts: &ModeOptions) -> bool {
    g.amax() < opts.grad_tol || is_stationary(value, g, opts.qn.grad_tol)
}

fn single_run(
    loss: &dyn Loss,
    w: f64,
    prior: &LogPrior,
    x0: &DVector<f64>,
    opts: &ModeOptions,
) -> Result<(DVector<f64>, f64, DVector<f64>)> {
    let seed_inv = match negative_log_gibbs(loss, w, prior, x0)?.2 {
        Some(h) => cholesky(&symmetrize(&h)).ok().map(|c| symmetrize(&c.inverse())),
        None => None,
    };
    let res = minimize(
        |t| negative_log_gibbs(loss, w, prior, t).map(|(v, g, _)| (v, g)),
        x0,
        seed_inv,
        &opts.qn,
    )?;
    let (mut x, mut v, mut g) = (res.x, res.value, res.gradient);
    // Newton polish drives the gradient to the absolute tolerance
    for _ in 0..8 {
        if g.amax() < opts.grad_tol {
            break;
        }
        let Some(h) = negative_log_gibbs(loss, w, prior, &x)?.2 else {
            break;
        };
        let Ok(chol) = cholesky(&symmetrize(&h)) else {
            break;
        };
        let trial = &x - chol.solve(&g);
        match negative_log_gibbs(loss, w, prior, &trial) {
            Ok((tv, tg, _)) if tv <= v + 1e-12 * v.abs().max(1.0) && tg.amax() < g.amax() => {
                x = trial;
                v = tv;
                g = tg;
            }
            _ => break,
        }
    }
    Ok((x, v, g))
}

/// Mode of the Gibbs posterior exp(-w l(t)) pi(t).
///
/// Runs BFGS from `init`, seeded with the inverse Hessian when the loss has
/// one, then polishes with Newton steps. If that run does not converge,
/// `opts.restarts` restarts from `init` plus N(0, perturbation^2) noise are
/// tried and the best converged point wins.
pub fn posterior_mode(
    loss: &dyn Loss,
    w: f64,
    prior: &LogPrior,
    init: &DVector<f64>,
    opts: &ModeOptions,
) -> Result<DVector<f64>> {
    if loss.dim() != init.len() {
        return Err(GodError::Data(format!(
            "initial point has length {} for a {}-parameter loss",
            init.len(),
            loss.dim()
        )));
    }
    let mut best: Option<(DVector<f64>, f64, DVector<f64>)> = None;
    let record = |cand: (DVector<f64>, f64, DVector<f64>), best: &mut Option<(DVector<f64>, f64, DVector<f64>)>| {
        if best.as_ref().is_none_or(|b| cand.1 < b.1) {
            *best = Some(cand);
        }
    };
    let first_err = match single_run(loss, w, prior, init, opts) {
        Ok(run) => {
            if stationary(run.1, &run.2, opts) {
                return Ok(run.0);
            }
            record(run, &mut best);
            None
        }
        Err(e) => Some(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let x0 = init.map(|v| v + opts.perturbation * rng.sample::<f64, _>(StandardNormal));
        if let Ok(run) = single_run(loss, w, prior, &x0, opts) {
            record(run, &mut best);
        }
    }
    match best {
        Some((x, v, g)) if stationary(v, &g, opts) => Ok(x),
        Some((x, _, g)) => Err(GodError::ModeNotConverged {
            best: x.iter().copied().collect(),
            grad_norm: g.amax(),
        }),
        None => Err(first_err.unwrap_or(GodError::ModeNotConverged {
            best: init.iter().copied().collect(),
            grad_norm: f64::NAN,
        })),
    }
}

/// [w Hess l(mode) - Hess log pi(mode)]^{-1}, symmetrized, with the repair
/// flag. Falls back to finite differences when the loss has no Hessian.
pub fn laplace_covariance(
    loss: &dyn Loss,
    w: f64,
    prior: &LogPrior,
    mode: &DVector<f64>,
) -> Result<(DMatrix<f64>, bool)> {
    let h = match loss.evaluate(mode)?.hessian {
        Some(h) => h,
        None => fd_hessian(loss, mode)?,
    };
    let (_, _, ph) = prior.evaluate(mode);
    let precision = h * w - DMatrix::from_diagonal(&ph);
    let (precision, repaired) = repair_spd(&precision)?;
    let min = SymmetricEigen::new(precision.clone()).eigenvalues.min();
    if min < FLAT_CURVATURE {
        return Err(GodError::Curvature(format!(
            "precision eigenvalue {min:.3e} is flat; the estimate diverges"
        )));
    }
    Ok((spd_inverse(&precision)?, repaired))
}

/// Mode plus Laplace covariance as a normal approximation.
pub fn laplace_posterior(
    loss: &dyn Loss,
    w: f64,
    prior: &LogPrior,
    init: &DVector<f64>,
    opts: &ModeOptions,
) -> Result<GibbsPosteriorApprox> {
    let mode = posterior_mode(loss, w, prior, init, opts)?;
    let (cov, repaired) = laplace_covariance(loss, w, prior, &mode)?;
    Ok(GibbsPosteriorApprox {
        kind: PosteriorKind::Normal,
        mode,
        scale: cov,
        repaired,
    })
}

/// N(least squares, sigma_tilde^2 (F^T F)^{-1}) for the SS loss with the
/// pure-error weight.
pub fn ss_fixed_posterior(
    y: &DVector<f64>,
    f: &ModelMatrix,
    uts: &UniqueTreatmentStructure,
) -> Result<GibbsPosteriorApprox> {
    let s2 = pure_error_variance(y, uts)?;
    if !(s2 > DEGENERATE_SCALE) {
        return Err(GodError::Degenerate(format!("pure-error variance {s2:e}")));
    }
    let gram_inv = spd_inverse(&f.gram()).map_err(|_| GodError::Rank("F^T F is singular".into()))?;
    Ok(GibbsPosteriorApprox::normal(least_squares(&f.0, y)?, gram_inv * s2))
}

/// Multivariate t with mean least squares, scale sigma_hat^2 (F^T F)^{-1} and
/// n - p degrees of freedom: the SS Gibbs posterior with w integrated out.
pub fn ss_random_posterior(y: &DVector<f64>, f: &ModelMatrix) -> Result<GibbsPosteriorApprox> {
    let (n, p) = (f.n(), f.p());
    if n <= p {
        return Err(GodError::DegreesOfFreedom { n, p });
    }
    let gram_inv = spd_inverse(&f.gram()).map_err(|_| GodError::Rank("F^T F is singular".into()))?;
    let mode = least_squares(&f.0, y)?;
    let s2 = (y - f.predictor(&mode)).norm_squared() / (n - p) as f64;
    if !(s2 > DEGENERATE_SCALE) {
        return Err(GodError::Degenerate(format!("residual variance {s2:e}; scale is degenerate")));
    }
    Ok(GibbsPosteriorApprox {
        kind: PosteriorKind::MultivariateT { dof: (n - p) as f64 },
        mode,
        scale: gram_inv * s2,
        repaired: false,
    })
}

/// N(theta_hat, E_Q^{-1} / (2 w)).
pub fn l2_posterior(theta_hat: DVector<f64>, w: f64, quad: &L2Quadrature) -> Result<GibbsPosteriorApprox> {
    if !(w > 0.0) {
        return Err(GodError::Config(format!("weight must be positive, got {w}")));
    }
    Ok(GibbsPosteriorApprox::normal(theta_hat, &quad.eq_inv / (2.0 * w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{unique_treatments, Design, TREATMENT_TOL};
    use crate::glm::{poisson_fisher_scoring, ScoringOptions};
    use crate::losses::{LossEvaluation, PlLoss, QlLoss, SsLoss};
    use rand::Rng;

    struct HalfSquare;
    impl Loss for HalfSquare {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
            Ok(LossEvaluation {
                value: 0.5 * t[0] * t[0],
                gradient: Some(t.clone()),
                hessian: Some(DMatrix::from_element(1, 1, 1.0)),
            })
        }
    }

    fn random_problem(seed: u64, n: usize, p: usize) -> (ModelMatrix, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = ModelMatrix(DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0)));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        (f, y)
    }

    #[test]
    fn unit_curvature() {
        let (cov, repaired) = laplace_covariance(&HalfSquare, 1.0, &LogPrior::flat(), &DVector::zeros(1)).unwrap();
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(!repaired);
    }

    #[test]
    fn ss_mode_is_least_squares() {
        let (f, y) = random_problem(61, 12, 4);
        let loss = SsLoss { y: y.clone(), f: f.clone() };
        let mode = posterior_mode(&loss, 0.7, &LogPrior::flat(), &DVector::zeros(4), &ModeOptions::default()).unwrap();
        let ls = least_squares(&f.0, &y).unwrap();
        assert!((mode - ls).amax() < 1e-10);
    }

    #[test]
    fn ss_laplace_covariance_closed_form() {
        let (f, y) = random_problem(62, 10, 3);
        let w = 0.8;
        let loss = SsLoss { y, f: f.clone() };
        let (cov, _) = laplace_covariance(&loss, w, &LogPrior::flat(), &DVector::zeros(3)).unwrap();
        let expect = spd_inverse(&f.gram()).unwrap() / (2.0 * w);
        assert!((cov - expect).amax() < 1e-12);
    }

    #[test]
    fn ql_mode_matches_fisher_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let f = ModelMatrix(DMatrix::from_fn(15, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) }));
        let y = DVector::from_fn(15, |_, _| rng.random_range(0..9) as f64);
        let loss = QlLoss { y: y.clone(), f: f.clone() };
        let mode = posterior_mode(&loss, 1.3, &LogPrior::flat(), &DVector::zeros(3), &ModeOptions::default()).unwrap();
        let oracle = poisson_fisher_scoring(&f.0, &y, &ScoringOptions::default()).unwrap();
        assert!((mode - oracle).amax() < 1e-6);
    }

    #[test]
    fn separable_partial_likelihood_is_flagged() {
        // larger covariate always fails first: the slope runs off to infinity
        let f = ModelMatrix(DMatrix::from_column_slice(4, 1, &[1.0, 0.5, -0.5, -1.0]));
        let loss = PlLoss {
            y: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            c: vec![true; 4],
            f,
        };
        let res = laplace_posterior(&loss, 1.0, &LogPrior::flat(), &DVector::zeros(1), &ModeOptions::default());
        assert!(matches!(res, Err(GodError::Curvature(_)) | Err(GodError::ModeNotConverged { .. })));
    }

    #[test]
    fn ss_fixed_matches_generic_pipeline() {
        let d = Design::from_rows(&[
            vec![-1.0],
            vec![-1.0],
            vec![0.0],
            vec![0.3],
            vec![1.0],
            vec![1.0],
            vec![0.3],
        ])
        .unwrap();
        let uts = unique_treatments(&d, TREATMENT_TOL);
        let f = ModelMatrix(DMatrix::from_fn(7, 2, |i, j| if j == 0 { 1.0 } else { d.get(i, 0) }));
        let y = DVector::from_vec(vec![0.1, 0.4, -0.2, 0.9, 1.3, 0.8, 0.6]);
        let closed = ss_fixed_posterior(&y, &f, &uts).unwrap();
        let w = 1.0 / (2.0 * pure_error_variance(&y, &uts).unwrap());
        let generic = laplace_posterior(
            &SsLoss { y: y.clone(), f: f.clone() },
            w,
            &LogPrior::flat(),
            &DVector::zeros(2),
            &ModeOptions::default(),
        )
        .unwrap();
        assert!((&closed.mode - &generic.mode).amax() < 1e-10);
        assert!((&closed.scale - &generic.scale).amax() < 1e-10);
    }

    #[test]
    fn no_replication_is_an_error() {
        let d = Design::from_rows(&[vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let uts = unique_treatments(&d, TREATMENT_TOL);
        let f = ModelMatrix(DMatrix::from_fn(3, 1, |_, _| 1.0));
        let err = ss_fixed_posterior(&DVector::zeros(3), &f, &uts).unwrap_err();
        assert!(matches!(err, GodError::NoReplication));
    }

    #[test]
    fn random_posterior_scale_from_residuals() {
        let (f, y) = random_problem(64, 9, 3);
        let post = ss_random_posterior(&y, &f).unwrap();
        assert_eq!(post.dof(), Some(6.0));
        // residual oracle via explicit projection
        let hat = &f.0 * f.gram().try_inverse().unwrap() * f.0.transpose();
        let r = (DMatrix::identity(9, 9) - hat) * &y;
        let s2 = r.norm_squared() / 6.0;
        let expect = f.gram().try_inverse().unwrap() * s2;
        assert!((post.scale - expect).amax() < 1e-12);
        let exact = f.predictor(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(ss_random_posterior(&exact, &f), Err(GodError::Degenerate(_))));
    }

    #[test]
    fn normal_log_density() {
        let post = GibbsPosteriorApprox::normal(DVector::zeros(1), DMatrix::identity(1, 1));
        let v = post.log_density(&DVector::zeros(1)).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
        let (f, _) = random_problem(65, 6, 3);
        let cov = f.gram();
        let mode = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let t = DVector::from_vec(vec![0.0, 0.5, 0.7]);
        let post = GibbsPosteriorApprox::normal(mode.clone(), cov.clone());
        let diff = &t - &mode;
        let oracle = -1.5 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * cov.determinant().ln()
            - 0.5 * diff.dot(&(cov.clone().try_inverse().unwrap() * &diff));
        assert!((post.log_density(&t).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn t_density_matches_univariate_formula() {
        let post = GibbsPosteriorApprox {
            kind: PosteriorKind::MultivariateT { dof: 5.0 },
            mode: DVector::from_element(1, 0.5),
            scale: DMatrix::from_element(1, 1, 4.0),
            repaired: false,
        };
        let x: f64 = 1.7;
        let z = (x - 0.5) / 2.0;
        let expect = ln_gamma(3.0) - ln_gamma(2.5) - 0.5 * (5.0 * std::f64::consts::PI).ln() - 2f64.ln()
            - 3.0 * (1.0 + z * z / 5.0).ln();
        assert!((post.log_density(&DVector::from_element(1, x)).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn logistic_prior_derivatives() {
        let prior = LogPrior::new(vec![PriorComponent::LogisticUnit]);
        for s in [-3.0, -0.2, 0.0, 1.1, 4.0] {
            let t = DVector::from_element(1, s);
            let (v, g, h) = prior.evaluate(&t);
            let sig: f64 = 1.0 / (1.0 + (-s).exp());
            assert!((v - (sig * (1.0 - sig)).ln()).abs() < 1e-13);
            let e = 1e-6;
            let (vp, gp, _) = prior.evaluate(&DVector::from_element(1, s + e));
            let (vm, gm, _) = prior.evaluate(&DVector::from_element(1, s - e));
            assert!((g[0] - (vp - vm) / (2.0 * e)).abs() < 1e-8);
            assert!((h[0] - (gp[0] - gm[0]) / (2.0 * e)).abs() < 1e-8);
        }
    }

    #[test]
    fn doubling_weight_halves_l2_covariance() {
        use crate::design::RegressionSpec;
        use crate::losses::gauss_legendre_grid;
        let quad = L2Quadrature::new(&RegressionSpec::full_quadratic(2), gauss_legendre_grid(2, 3)).unwrap();
        let a = l2_posterior(DVector::zeros(6), 0.5, &quad).unwrap();
        assert!((&a.scale - &quad.eq_inv).amax() < 1e-15);
        let b = l2_posterior(DVector::zeros(6), 1.0, &quad).unwrap();
        assert!((&a.scale * 0.5 - &b.scale).amax() < 1e-15);
    }
}
