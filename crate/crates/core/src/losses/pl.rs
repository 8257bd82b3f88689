use nalgebra::{DMatrix, DVector};

use super::{check_eta, Loss, LossEvaluation};
use crate::design::ModelMatrix;
use crate::error::{GodError, Result};

/// Negative log partial likelihood
/// sum_i c_i [log sum_{j in R_i} exp(eta_j) - eta_i].
///
/// Ties in `y` are broken by run index, so the risk set of the run at sorted
/// position r is every run at position >= r. Censored runs (c = 0) sit in risk
/// sets but contribute no summand.
pub fn pl_loss(
    t: &DVector<f64>,
    y: &DVector<f64>,
    c: &[bool],
    f: &ModelMatrix,
) -> Result<LossEvaluation> {
    let n = f.n();
    let p = f.p();
    if y.len() != n || c.len() != n {
        return Err(GodError::Data("response length does not match the model matrix".into()));
    }
    if y.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(GodError::Data("event times must be positive and finite".into()));
    }
    if !c.iter().any(|&ci| ci) {
        return Err(GodError::Degenerate("every run is censored; partial likelihood is constant".into()));
    }
    let eta = f.predictor(t);
    check_eta(&eta)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));

    let mut value = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    // running sums over the current risk set, scaled by exp(-shift)
    let mut shift = f64::NEG_INFINITY;
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    for &i in order.iter().rev() {
        let fi = f.0.row(i).transpose();
        if eta[i] > shift {
            let scale = (shift - eta[i]).exp();
            s0 *= scale;
            s1 *= scale;
            s2 *= scale;
            shift = eta[i];
        }
        let wi = (eta[i] - shift).exp();
        s0 += wi;
        s1.axpy(wi, &fi, 1.0);
        s2.ger(wi, &fi, &fi, 1.0);
        if c[i] {
            value += shift + s0.ln() - eta[i];
            let mean = &s1 / s0;
            grad += &mean - &fi;
            hess += &s2 / s0 - &mean * mean.transpose();
        }
    }
    Ok(LossEvaluation {
        value,
        gradient: Some(grad),
        hessian: Some(crate::linalg::symmetrize(&hess)),
    })
}

#[derive(Debug, Clone)]
pub struct PlLoss {
    pub y: DVector<f64>,
    pub c: Vec<bool>,
    pub f: ModelMatrix,
}

impl Loss for PlLoss {
    fn dim(&self) -> usize {
        self.f.p()
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<LossEvaluation> {
        pl_loss(t, &self.y, &self.c, &self.f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation over explicit risk sets.
    fn naive(t: &DVector<f64>, y: &DVector<f64>, c: &[bool], f: &ModelMatrix) -> f64 {
        let eta = f.predictor(t);
        let n = y.len();
        let mut v = 0.0;
        for i in 0..n {
            if !c[i] {
                continue;
            }
            let s: f64 = (0..n)
                .filter(|&j| y[j] > y[i] || (y[j] == y[i] && j >= i))
                .map(|j| eta[j].exp())
                .sum();
            v += s.ln() - eta[i];
        }
        v
    }

    #[test]
    fn single_event_is_zero() {
        let f = ModelMatrix(DMatrix::from_row_slice(1, 2, &[1.0, 0.3]));
        for t in [0.0, 1.5, -4.0] {
            let t = DVector::from_vec(vec![t, 2.0 * t]);
            let v = pl_loss(&t, &DVector::from_vec(vec![2.0]), &[true], &f).unwrap().value;
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn two_events_equal_predictors() {
        let f = ModelMatrix(DMatrix::from_row_slice(2, 1, &[0.5, -0.5]));
        let v = pl_loss(&DVector::zeros(1), &DVector::from_vec(vec![1.0, 2.0]), &[true, true], &f)
            .unwrap()
            .value;
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matches_explicit_risk_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = 12;
            let f = ModelMatrix(DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0)));
            let t = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let y = DVector::from_fn(n, |_, _| rng.random_range(0.01..5.0));
            let c: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            if !c.iter().any(|&x| x) {
                continue;
            }
            let v = pl_loss(&t, &y, &c, &f).unwrap().value;
            let o = naive(&t, &y, &c, &f);
            assert!((v - o).abs() < 1e-12 * o.abs().max(1.0));
        }
    }

    #[test]
    fn intercept_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10;
        let f = ModelMatrix(DMatrix::from_fn(n, 3, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        }));
        let y = DVector::from_fn(n, |_, _| rng.random_range(0.1..3.0));
        let c = vec![true; n];
        let t = DVector::from_vec(vec![0.2, -0.7, 1.1]);
        let mut shifted = t.clone();
        shifted[0] += 3.7;
        let a = pl_loss(&t, &y, &c, &f).unwrap().value;
        let b = pl_loss(&shifted, &y, &c, &f).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn monotone_time_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 9;
        let f = ModelMatrix(DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0)));
        let y = DVector::from_fn(n, |_, _| rng.random_range(0.1..3.0));
        let y2 = y.map(|v: f64| v.powf(3.0) + 2.0 * v.ln() + 10.0);
        let c: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let t = DVector::from_vec(vec![0.4, -1.2]);
        let a = pl_loss(&t, &y, &c, &f).unwrap();
        let b = pl_loss(&t, &y2, &c, &f).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn all_censored_is_degenerate() {
        let f = ModelMatrix(DMatrix::from_element(2, 1, 1.0));
        let err = pl_loss(&DVector::zeros(1), &DVector::from_vec(vec![1.0, 2.0]), &[false, false], &f)
            .unwrap_err();
        assert!(matches!(err, GodError::Degenerate(_)));
    }

    #[test]
    fn extreme_predictors_stay_finite() {
        let f = ModelMatrix(DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 0.0]));
        let e = pl_loss(
            &DVector::from_element(1, 650.0),
            &DVector::from_vec(vec![1.0, 2.0, 3.0]),
            &[true, true, true],
            &f,
        )
        .unwrap();
        assert!(e.value.is_finite());
        assert!(e.gradient.unwrap().iter().all(|g| g.is_finite()));
    }
}
