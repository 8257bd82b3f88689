//! Poisson log-linear fitting by Fisher scoring.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{GodError, Result};

/// Largest |eta| accepted before exp(eta) is treated as an overflow.
pub const ETA_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy)]
pub struct ScoringOptions {
    pub max_iter: usize,
    pub score_tol: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            max_iter: 50,
            score_tol: 1e-8,
        }
    }
}

fn objective(f: &DMatrix<f64>, t: &DVector<f64>, response: &DVector<f64>) -> Option<f64> {
    let eta = f * t;
    if eta.iter().any(|e| !e.is_finite() || e.abs() > ETA_LIMIT) {
        return None;
    }
    Some(eta.iter().zip(response.iter()).map(|(&e, &m)| e.exp() - m * e).sum())
}

/// Minimizes sum_i [exp(eta_i) - m_i eta_i] over t, i.e. solves the Poisson
/// likelihood equations F^T (exp(F t) - m) = 0 with the responses replaced by `m`.
///
/// Starts from weighted least squares on log(m + 0.5) and halves steps that
/// fail to decrease the objective.
pub fn poisson_fisher_scoring(
    f: &DMatrix<f64>,
    response: &DVector<f64>,
    opts: &ScoringOptions,
) -> Result<DVector<f64>> {
    let n = f.nrows();
    if response.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(GodError::Data("responses must be finite and nonnegative".into()));
    }
    if response.iter().all(|&m| m == 0.0) {
        return Err(GodError::Degenerate("all responses are zero".into()));
    }
    let w0 = response.map(|m| m + 0.5);
    let z = response.map(|m| (m + 0.5).ln());
    let fw = DMatrix::from_fn(n, f.ncols(), |i, j| f[(i, j)] * w0[i]);
    let info0 = fw.tr_mul(f);
    let mut t = Cholesky::new(info0)
        .ok_or_else(|| GodError::Rank("F^T W F is singular".into()))?
        .solve(&fw.tr_mul(&z));

    let mut obj = objective(f, &t, response)
        .ok_or_else(|| GodError::TargetSolve("starting point overflows".into()))?;
    for _ in 0..opts.max_iter {
        let eta = f * &t;
        let m = eta.map(f64::exp);
        let score = f.tr_mul(&(response - &m));
        if score.amax() < opts.score_tol {
            return Ok(t);
        }
        let fm = DMatrix::from_fn(n, f.ncols(), |i, j| f[(i, j)] * m[i]);
        let info = fm.tr_mul(f);
        let delta = Cholesky::new(info)
            .ok_or_else(|| GodError::Rank("Fisher information is singular".into()))?
            .solve(&score);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial = &t + &delta * step;
            if let Some(v) = objective(f, &trial, response) {
                // tolerance absorbs rounding once decreases fall below ulp(obj)
                if v <= obj + 1e-14 * obj.abs().max(1.0) {
                    t = trial;
                    obj = v;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let score = f.tr_mul(&(response - (f * &t).map(f64::exp)));
    if score.amax() < opts.score_tol {
        Ok(t)
    } else {
        Err(GodError::TargetSolve(format!(
            "Fisher scoring stopped with score norm {:.3e}",
            score.amax()
        )))
    }
}
