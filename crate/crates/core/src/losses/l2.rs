use nalgebra::{DMatrix, DVector};

use super::gp::{sq_exp_corr, GpFit};
use super::quadrature::QuadratureGrid;
use super::{Loss, LossEvaluation};
use crate::design::{expand_with_basis, Basis, Design, RegressionSpec};
use crate::error::{GodError, Result};
use crate::linalg::{cholesky, symmetrize};

/// Quadrature-side matrices of the L2 loss; independent of the design.
#[derive(Debug, Clone)]
pub struct L2Quadrature {
    pub grid: QuadratureGrid,
    /// M x p, row m = f(chi_m)^T (unweighted).
    pub f_nodes: DMatrix<f64>,
    /// M x p, row m = s_m f(chi_m)^T.
    pub fq: DMatrix<f64>,
    /// sum_m s_m f(chi_m) f(chi_m)^T
    pub eq: DMatrix<f64>,
    pub eq_inv: DMatrix<f64>,
}

impl L2Quadrature {
    pub fn new(spec: &RegressionSpec, grid: QuadratureGrid) -> Result<Self> {
        Self::with_basis(spec, grid)
    }

    pub fn with_basis(basis: &dyn Basis, grid: QuadratureGrid) -> Result<Self> {
        let nodes = Design::new(grid.nodes.clone())?;
        let f_nodes = expand_with_basis(&nodes, basis)?.0;
        let fq = DMatrix::from_fn(f_nodes.nrows(), f_nodes.ncols(), |m, j| {
            grid.weights[m] * f_nodes[(m, j)]
        });
        let eq = symmetrize(&fq.tr_mul(&f_nodes));
        let eq_inv = cholesky(&eq)
            .map_err(|_| GodError::Rank("E_Q is singular; quadrature too coarse for the basis".into()))?
            .inverse();
        Ok(L2Quadrature {
            grid,
            f_nodes,
            fq,
            eq,
            eq_inv: symmetrize(&eq_inv),
        })
    }

    pub fn p(&self) -> usize {
        self.eq.nrows()
    }
}

/// The GP smoother y -> mu_bar at the nodes and the linear map
/// G = E_Q^{-1} F_Q^T D_Q V taking responses to the L2 M-estimate.
#[derive(Debug, Clone)]
pub struct L2Smoother {
    /// M x n, element (m, i) = c2(chi_m, x_i).
    pub dq: DMatrix<f64>,
    pub vbar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    /// p x n
    pub gain: DMatrix<f64>,
}

impl L2Smoother {
    pub fn new(quad: &L2Quadrature, design: &Design, fit: &GpFit) -> Result<Self> {
        let n = design.n();
        if fit.vbar.nrows() != n {
            return Err(GodError::Data("GP fit does not match the design size".into()));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| design.row(i)).collect();
        let m = quad.grid.len();
        let k = design.k();
        let mut node = vec![0.0; k];
        let mut dq = DMatrix::zeros(m, n);
        for r in 0..m {
            for (j, v) in node.iter_mut().enumerate() {
                *v = quad.grid.nodes[(r, j)];
            }
            for (i, xi) in rows.iter().enumerate() {
                dq[(r, i)] = sq_exp_corr(&node, xi, &fit.alpha);
            }
        }
        let gain = &quad.eq_inv * (quad.fq.tr_mul(&dq) * &fit.vbar);
        Ok(L2Smoother {
            dq,
            vbar: fit.vbar.clone(),
            bbar: fit.bbar.clone(),
            gain,
        })
    }

    pub fn node_predictions(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.dq * (&self.vbar * y)
    }

    /// M-estimate for responses y, or target values when given the mean vector.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.gain * y
    }

    /// ||(I - B V) y||^2 / tr{(I - V B^T)(I - B V)}
    pub fn residual_variance(&self, y: &DVector<f64>) -> f64 {
        let n = y.len();
        let r = DMatrix::identity(n, n) - &self.bbar * &self.vbar;
        (&r * y).norm_squared() / r.norm_squared()
    }
}

/// sum_m s_m [mu_bar(chi_m) - f(chi_m)^T t]^2 with the smoother predictions
/// at the nodes supplied.
pub fn l2_loss(t: &DVector<f64>, mu_nodes: &DVector<f64>, quad: &L2Quadrature) -> LossEvaluation {
    let resid = mu_nodes - &quad.f_nodes * t;
    let value = resid
        .iter()
        .zip(quad.grid.weights.iter())
        .map(|(r, s)| s * r * r)
        .sum();
    LossEvaluation {
        value,
        gradient: Some(quad.fq.tr_mul(&resid) * -2.0),
        hessian: Some(&quad.eq * 2.0),
    }
}

/// E_Q^{-1} F_Q^T D_Q V y
pub fn l2_mestimator(
    y: &DVector<f64>,
    design: &Design,
    quad: &L2Quadrature,
    fit: &GpFit,
) -> Result<DVector<f64>> {
    Ok(L2Smoother::new(quad, design, fit)?.apply(y))
}

#[derive(Debug, Clone)]
pub struct L2Loss {
    pub mu_nodes: DVector<f64>,
    pub quad: L2Quadrature,
}

impl Loss for L2Loss {
    fn dim(&self) -> usize {
        self.quad.p()
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        Ok(l2_loss(t, &self.mu_nodes, &self.quad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gp::{gp_fit_loo, GpFitOptions};
    use crate::losses::quadrature::gauss_legendre_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Design, DVector<f64>, L2Quadrature, GpFit) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Design::new(DMatrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let y = DVector::from_fn(12, |i, _| d.get(i, 0) * d.get(i, 1) + rng.random_range(-0.1..0.1));
        let quad = L2Quadrature::new(&RegressionSpec::full_quadratic(2), gauss_legendre_grid(2, 4)).unwrap();
        let opts = GpFitOptions {
            restarts: 2,
            ..Default::default()
        };
        let fit = gp_fit_loo(&y, &d, &opts).unwrap();
        (d, y, quad, fit)
    }

    #[test]
    fn estimator_is_linear_in_y() {
        let (d, y, quad, fit) = setup(31);
        let a = l2_mestimator(&y, &d, &quad, &fit).unwrap();
        let b = l2_mestimator(&(&y * 2.0), &d, &quad, &fit).unwrap();
        assert!((b - &a * 2.0).amax() < 1e-12);
        let z = l2_mestimator(&DVector::zeros(12), &d, &quad, &fit).unwrap();
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn estimator_minimizes_the_loss() {
        let (d, y, quad, fit) = setup(32);
        let sm = L2Smoother::new(&quad, &d, &fit).unwrap();
        let theta = sm.apply(&y);
        let e = l2_loss(&theta, &sm.node_predictions(&y), &quad);
        assert!(e.gradient.unwrap().amax() < 1e-10);
    }

    #[test]
    fn coarse_quadrature_is_rank_deficient() {
        let err = L2Quadrature::new(&RegressionSpec::full_quadratic(2), gauss_legendre_grid(2, 1)).unwrap_err();
        assert!(matches!(err, GodError::Rank(_)));
    }

    #[test]
    fn residual_variance_shortcut() {
        // I - B V = nu V, so the ratio reduces to ||V y||^2 / ||V||_F^2.
        let (d, y, quad, fit) = setup(33);
        let sm = L2Smoother::new(&quad, &d, &fit).unwrap();
        let short = (&fit.vbar * &y).norm_squared() / fit.vbar.norm_squared();
        assert!((sm.residual_variance(&y) - short).abs() < 1e-8 * short);
    }
}
