//! Special functions used by the closed-form objectives and interval rules.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Digamma by upward recurrence to x >= 6 followed by the asymptotic series.
pub fn digamma(mut x: f64) -> f64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        return f64::NAN;
    }
    if x <= 0.0 && x == x.floor() {
        return f64::NAN;
    }
    let mut acc = 0.0;
    if x < 0.0 {
        // reflection: psi(1 - x) - psi(x) = pi cot(pi x)
        let pi = std::f64::consts::PI;
        return digamma(1.0 - x) - pi / (pi * x).tan();
    }
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0
                                        - inv2
                                            * (691.0 / 32760.0
                                                - inv2 * (1.0 / 12.0 - inv2 * 3617.0 / 8160.0)))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Replication penalty psi(d/2) - log d + d/(d-2); +inf for d <= 2.
pub fn h2(d: usize) -> f64 {
    if d <= 2 {
        return f64::INFINITY;
    }
    let d = d as f64;
    digamma(d / 2.0) - d.ln() + d / (d - 2.0)
}

/// Existence penalty: 1 when d > 0, +inf otherwise.
pub fn h1(d: usize) -> f64 {
    if d > 0 {
        1.0
    } else {
        f64::INFINITY
    }
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Student-t quantile with `dof` degrees of freedom.
pub fn t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}
