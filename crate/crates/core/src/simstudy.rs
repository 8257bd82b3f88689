//! Coverage and length of Gibbs posterior intervals for the sum-of-squares
//! loss under the pure-error (fixed) and conjugate (random) weights.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{expand_model_matrix, unique_treatments, Design, RegressionSpec, TREATMENT_TOL};
use crate::designer::{target_params, Designer, DesignerConfig, TargetRule};
use crate::error::{GodError, Result};
use crate::posterior::{ss_fixed_posterior, ss_random_posterior, GibbsPosteriorApprox, PosteriorKind};
use crate::special::{normal_quantile, t_quantile};

/// Redraws allowed per repetition before giving up.
const MAX_REDRAWS: usize = 1000;

/// Per-coordinate central intervals mode_j +/- quantile * scale_j; returns
/// coverage indicators for `target` and interval lengths.
pub fn interval_coverage(post: &GibbsPosteriorApprox, target: &DVector<f64>, level: f64) -> (Vec<bool>, Vec<f64>) {
    let upper = 0.5 + 0.5 * level;
    let z = match post.kind {
        PosteriorKind::Normal => normal_quantile(upper),
        PosteriorKind::MultivariateT { dof } => t_quantile(upper, dof),
    };
    (0..post.p())
        .map(|j| {
            let half = z * post.marginal_scale(j);
            ((target[j] - post.mode[j]).abs() <= half, 2.0 * half)
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub level: f64,
    /// Design entries are rounded to multiples of this step so that
    /// replicates occur.
    pub rounding_step: f64,
    pub seed: u64,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            level: 0.95,
            rounding_step: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub n: usize,
    pub median_mean_coverage_fixed: f64,
    pub median_mean_coverage_random: f64,
    pub median_mean_length_fixed: f64,
    pub median_mean_length_random: f64,
    pub b: usize,
    /// Designs discarded for lacking replication or yielding a degenerate fit.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStudyResult {
    pub records: Vec<CalibrationRecord>,
    pub settings: StudySettings,
}

impl CalibrationStudyResult {
    /// One row per (n, rule): n, rule, coverage, length.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("n,rule,coverage,length\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},fixed,{},{}\n",
                r.n, r.median_mean_coverage_fixed, r.median_mean_length_fixed
            ));
            out.push_str(&format!(
                "{},random,{},{}\n",
                r.n, r.median_mean_coverage_random, r.median_mean_length_random
            ));
        }
        out
    }
}

struct Repetition {
    covered_fixed: Vec<bool>,
    covered_random: Vec<bool>,
    length_fixed: Vec<f64>,
    length_random: Vec<f64>,
    redraws: usize,
}

fn rounded_uniform_design<R: Rng + ?Sized>(n: usize, k: usize, step: f64, rng: &mut R) -> Result<Design> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..=1.0);
                    if step > 0.0 {
                        ((v / step).round() * step).clamp(-1.0, 1.0)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Design::from_rows(&rows)
}

fn repetition<R: Rng + ?Sized>(
    n: usize,
    config: &DesignerConfig,
    spec: &RegressionSpec,
    k: usize,
    settings: &StudySettings,
    rng: &mut R,
) -> Result<Repetition> {
    let mut redraws = 0;
    loop {
        if redraws > MAX_REDRAWS {
            return Err(GodError::Degenerate(format!(
                "no usable random design of {n} runs after {MAX_REDRAWS} redraws"
            )));
        }
        let design = rounded_uniform_design(n, k, settings.rounding_step, rng)?;
        let uts = unique_treatments(&design, TREATMENT_TOL);
        let f = expand_model_matrix(&design, spec)?;
        if uts.d() == 0 || crate::linalg::cholesky(&f.gram()).is_err() {
            redraws += 1;
            continue;
        }
        let designer = Designer::with_structure(config, f, uts)?;
        let s = designer.sample_scenario(rng)?;
        let target = target_params(TargetRule::SumOfSquares, &s, &designer.f)?;
        let posts = ss_fixed_posterior(&s.y, &designer.f, &designer.uts)
            .and_then(|fixed| Ok((fixed, ss_random_posterior(&s.y, &designer.f)?)));
        let (fixed, random) = match posts {
            Ok(p) => p,
            Err(GodError::Degenerate(_)) => {
                redraws += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (covered_fixed, length_fixed) = interval_coverage(&fixed, &target, settings.level);
        let (covered_random, length_random) = interval_coverage(&random, &target, settings.level);
        return Ok(Repetition {
            covered_fixed,
            covered_random,
            length_fixed,
            length_random,
            redraws,
        });
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median over coordinates of the per-coordinate mean over repetitions.
fn median_of_means<T: Copy>(reps: &[Repetition], p: usize, pick: impl Fn(&Repetition, usize) -> T, to_f: impl Fn(T) -> f64) -> f64 {
    let b = reps.len() as f64;
    median((0..p).map(|j| reps.iter().map(|r| to_f(pick(r, j))).sum::<f64>() / b).collect())
}

/// For each n, `b` repetitions of: rounded uniform random design (redrawn
/// when unreplicated), one designer scenario, both posteriors from the same
/// responses, and interval coverage of the sum-of-squares targets.
/// Repetition r at the i-th n uses stream (i << 32) | r of `settings.seed`.
pub fn run_calibration_study(
    n_values: &[usize],
    b: usize,
    config: &DesignerConfig,
    spec: &RegressionSpec,
    k: usize,
    settings: &StudySettings,
) -> Result<CalibrationStudyResult> {
    if b == 0 {
        return Err(GodError::Config("the study needs at least one repetition".into()));
    }
    if !(settings.level > 0.0 && settings.level < 1.0) {
        return Err(GodError::Config(format!("level must lie in (0, 1), got {}", settings.level)));
    }
    let p = spec.p();
    let mut records = Vec::with_capacity(n_values.len());
    for (idx, &n) in n_values.iter().enumerate() {
        if n <= p {
            return Err(GodError::DegreesOfFreedom { n, p });
        }
        let reps: Vec<Repetition> = (0..b)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(((idx as u64) << 32) | r as u64);
                repetition(n, config, spec, k, settings, &mut rng)
            })
            .collect::<Result<_>>()?;
        let indicator = |c: bool| if c { 1.0 } else { 0.0 };
        records.push(CalibrationRecord {
            n,
            median_mean_coverage_fixed: median_of_means(&reps, p, |r, j| r.covered_fixed[j], indicator),
            median_mean_coverage_random: median_of_means(&reps, p, |r, j| r.covered_random[j], indicator),
            median_mean_length_fixed: median_of_means(&reps, p, |r, j| r.length_fixed[j], |v| v),
            median_mean_length_random: median_of_means(&reps, p, |r, j| r.length_random[j], |v| v),
            b,
            redraws: reps.iter().map(|r| r.redraws).sum(),
        });
    }
    Ok(CalibrationStudyResult {
        records,
        settings: *settings,
    })
}
