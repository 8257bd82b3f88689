//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{GodError, Result};

/// Eigenvalues below this fraction of the largest are floored during repair.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Total floored mass (relative to the largest eigenvalue) tolerated by repair.
pub const REPAIR_LIMIT: f64 = 1e-6;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| GodError::Rank("Cholesky factorization failed".into()))
}

/// Cholesky with a diagonal jitter ladder of 1e-10, 1e-8, 1e-6 times the mean diagonal.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    for scale in [1e-10, 1e-8, 1e-6] {
        let jittered = m + DMatrix::identity(n, n) * (scale * mean_diag);
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
    }
    Err(GodError::Sampling(
        "covariance not positive definite after jitter".into(),
    ))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m)?.inverse()))
}

pub fn log_det_from_cholesky(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    Ok(log_det_from_cholesky(&cholesky(m)?))
}

/// Solves (F^T F) t = F^T v by Cholesky on the Gram matrix.
pub fn least_squares(f: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = f.tr_mul(f);
    let chol = Cholesky::new(gram).ok_or_else(|| GodError::Rank("F^T F is singular".into()))?;
    Ok(chol.solve(&f.tr_mul(v)))
}

/// Makes a symmetric matrix positive definite by flooring small eigenvalues.
///
/// Returns the repaired matrix and whether any eigenvalue was changed. Fails
/// when the matrix has no positive eigenvalue or the floored mass exceeds
/// `REPAIR_LIMIT * lambda_max`.
pub fn repair_spd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let sym = symmetrize(m);
    if Cholesky::new(sym.clone()).is_some() {
        let eig = SymmetricEigen::new(sym.clone());
        let max = eig.eigenvalues.max();
        if eig.eigenvalues.min() >= EIGEN_FLOOR * max {
            return Ok((sym, false));
        }
    }
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return Err(GodError::Curvature("no positive curvature".into()));
    }
    let floor = EIGEN_FLOOR * max;
    let mut mass = 0.0;
    let vals = eig.eigenvalues.map(|l| {
        if l < floor {
            mass += floor - l;
            floor
        } else {
            l
        }
    });
    if mass > REPAIR_LIMIT * max {
        return Err(GodError::Curvature(format!(
            "floored eigenvalue mass {mass:.3e} exceeds {:.3e}",
            REPAIR_LIMIT * max
        )));
    }
    let v = &eig.eigenvectors;
    let repaired = v * DMatrix::from_diagonal(&vals) * v.transpose();
    Ok((symmetrize(&repaired), true))
}

/// Quadratic form u^T M u.
pub fn quad_form(m: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    u.dot(&(m * u))
}
