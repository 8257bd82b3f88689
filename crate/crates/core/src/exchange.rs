//! Coordinate exchange over [-1, 1]^{n x k} with common-random-number
//! acceptance for Monte Carlo objectives and optional 1-d GP smoothing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{GodError, Result};
use crate::linalg::cholesky;
use crate::utility::{Objective, UtilityEstimate};

const FINAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EMULATOR_FINE_GRID: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Emulator {
    Off,
    /// Fit a 1-d GP through this many equally spaced evaluations per coordinate.
    On { points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitStrategy {
    /// Every entry uniform on [-1, 1].
    Uniform,
    /// q distinct uniform rows (q uniform on [q_min, q_max]), the remaining
    /// n - q rows copies of randomly chosen distinct rows.
    Replicated { q_min: usize, q_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_emulator")]
    pub emulator: Emulator,
    /// Monte Carlo size of every search-time comparison.
    #[serde(default = "default_comparison_b")]
    pub comparison_b: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: InitStrategy,
    /// After each coordinate sweep, try replacing each row by a copy of another.
    #[serde(default)]
    pub replication_moves: bool,
}

fn default_grid_size() -> usize {
    21
}
fn default_passes() -> usize {
    10
}
fn default_restarts() -> usize {
    20
}
fn default_emulator() -> Emulator {
    Emulator::Off
}
fn default_comparison_b() -> usize {
    500
}
fn default_init() -> InitStrategy {
    InitStrategy::Uniform
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            grid_size: default_grid_size(),
            passes: default_passes(),
            restarts: default_restarts(),
            emulator: default_emulator(),
            comparison_b: default_comparison_b(),
            seed: 0,
            init: default_init(),
            replication_moves: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GodError::Config(m.into()));
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        if self.passes < 1 {
            return bad("passes must be at least 1");
        }
        if self.restarts < 1 {
            return bad("restarts must be at least 1");
        }
        if self.comparison_b < 1 {
            return bad("comparison_b must be at least 1");
        }
        if let Emulator::On { points } = self.emulator {
            if points < 3 {
                return bad("the emulator needs at least 3 points");
            }
        }
        if let InitStrategy::Replicated { q_min, q_max } = self.init {
            if q_min < 1 || q_min > q_max {
                return bad("replicated initialisation needs 1 <= q_min <= q_max");
            }
        }
        Ok(())
    }

    /// Candidate values -1, ..., 1 in grid_size equal steps.
    pub fn grid(&self) -> Vec<f64> {
        let g = self.grid_size;
        (0..g)
            .map(|i| ((2.0 * i as f64 / (g - 1) as f64 - 1.0) * 1e12).round() / 1e12)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pass: usize,
    /// `x[i,j]` grid candidate, `g[i,j]` emulator proposal, `r[i<-l]` row
    /// copy, `init` / `final` whole-design evaluations.
    pub coordinate: String,
    pub candidate: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub records: Vec<TraceRecord>,
    pub best_design: Design,
    /// Final incumbent value; for stochastic objectives a fresh evaluation
    /// with 4 x comparison_b samples.
    pub best_objective: UtilityEstimate,
    /// Emulator fits that failed and fell back to the raw grid argmax.
    pub emulator_fallbacks: usize,
}

impl OptimizationTrace {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| GodError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| GodError::Io(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

/// Random starting design.
pub fn initial_design<R: Rng + ?Sized>(n: usize, k: usize, init: InitStrategy, rng: &mut R) -> Result<Design> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let distinct = match init {
        InitStrategy::Uniform => n,
        InitStrategy::Replicated { q_min, q_max } => rng.random_range(q_min..=q_max).min(n),
    };
    for _ in 0..distinct {
        rows.push((0..k).map(|_| rng.random_range(-1.0..=1.0)).collect());
    }
    for _ in distinct..n {
        let src = rng.random_range(0..distinct);
        rows.push(rows[src].clone());
    }
    Design::from_rows(&rows)
}

/// Objective value with failures mapped to -inf; input errors propagate.
fn score(objective: &dyn Objective, design: &Design, seed: u64, b: usize) -> Result<UtilityEstimate> {
    match objective.evaluate_with(design, seed, b) {
        Ok(e) if e.mean.is_nan() => Ok(minus_infinity()),
        Ok(e) => Ok(e),
        Err(e) if e.is_input_error() => Err(e),
        Err(_) => Ok(minus_infinity()),
    }
}

fn minus_infinity() -> UtilityEstimate {
    UtilityEstimate {
        mean: f64::NEG_INFINITY,
        std_error: 0.0,
        b: 0,
        n_failures: 0,
    }
}

/// Whether `cand` should replace `inc`. Deterministic objectives need a strict
/// increase; stochastic ones an increase beyond one pooled standard error.
fn beats(cand: &UtilityEstimate, inc: &UtilityEstimate, stochastic: bool) -> bool {
    if cand.mean == f64::NEG_INFINITY {
        return false;
    }
    if inc.mean == f64::NEG_INFINITY {
        return true;
    }
    let margin = if stochastic {
        (0.5 * (cand.std_error.powi(2) + inc.std_error.powi(2))).sqrt()
    } else {
        0.0
    };
    cand.mean > inc.mean + margin
}

/// Row indices sorted by row content, ties by index.
fn lexicographic_rows(design: &Design) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = (0..design.n()).map(|i| design.row(i)).collect();
    let mut order: Vec<usize> = (0..design.n()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

struct Exchange<'a> {
    objective: &'a dyn Objective,
    cfg: &'a OptimizerConfig,
    stochastic: bool,
    records: Vec<TraceRecord>,
    fallbacks: usize,
    pass: usize,
}

impl Exchange<'_> {
    fn record(&mut self, coordinate: String, candidate: f64, e: &UtilityEstimate, accepted: bool) {
        self.records.push(TraceRecord {
            pass: self.pass,
            coordinate,
            candidate,
            estimate: e.mean,
            std_error: e.std_error,
            accepted,
        });
    }

    fn evaluate_all(&self, designs: &[Design], seed: u64) -> Result<Vec<UtilityEstimate>> {
        designs
            .par_iter()
            .map(|d| score(self.objective, d, seed, self.cfg.comparison_b))
            .collect()
    }

    /// Picks among `moves` (label, candidate value, design) for the incumbent
    /// `x` valued `inc` (deterministic) and returns the new incumbent value.
    fn decide(
        &mut self,
        x: &mut Design,
        inc: UtilityEstimate,
        moves: Vec<(String, f64, Design)>,
        seed: u64,
    ) -> Result<UtilityEstimate> {
        if moves.is_empty() {
            return Ok(inc);
        }
        let designs: Vec<Design> = moves.iter().map(|m| m.2.clone()).collect();
        let values = self.evaluate_all(&designs, seed)?;
        let inc = if self.stochastic {
            score(self.objective, x, seed, self.cfg.comparison_b)?
        } else {
            inc
        };
        let mut best: Option<usize> = None;
        for (i, v) in values.iter().enumerate() {
            if best.is_none_or(|b| v.mean > values[b].mean) {
                best = Some(i);
            }
        }
        let chosen = best.filter(|&b| beats(&values[b], &inc, self.stochastic));
        for (i, ((label, cand, _), v)) in moves.iter().zip(&values).enumerate() {
            self.record(label.clone(), *cand, v, chosen == Some(i));
        }
        match chosen {
            Some(b) => {
                *x = designs[b].clone();
                Ok(values[b])
            }
            None => Ok(inc),
        }
    }

    fn coordinate_moves(&self, x: &Design, i: usize, j: usize, values: &[f64], tag: &str) -> Vec<(String, f64, Design)> {
        let current = x.get(i, j);
        values
            .iter()
            .filter(|&&v| (v - current).abs() > 1e-12)
            .map(|&v| {
                let mut d = x.clone();
                d.set(i, j, v);
                (format!("{tag}[{i},{j}]"), v, d)
            })
            .collect()
    }

    fn step_coordinate(&mut self, x: &mut Design, inc: UtilityEstimate, i: usize, j: usize, seed: u64) -> Result<UtilityEstimate> {
        match self.cfg.emulator {
            Emulator::On { points } if self.stochastic => {
                let (proposal, fell_back) = emulator_smooth_search(self.objective, x, (i, j), points, self.cfg.comparison_b, seed)?;
                if fell_back {
                    self.fallbacks += 1;
                }
                let moves = self.coordinate_moves(x, i, j, &[proposal], "g");
                self.decide(x, inc, moves, seed)
            }
            _ => {
                let moves = self.coordinate_moves(x, i, j, &self.cfg.grid(), "x");
                self.decide(x, inc, moves, seed)
            }
        }
    }

    fn step_replication(&mut self, x: &mut Design, inc: UtilityEstimate, i: usize, seed: u64) -> Result<UtilityEstimate> {
        let row_i = x.row(i);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        let mut moves = Vec::new();
        for l in lexicographic_rows(x) {
            let row_l = x.row(l);
            if l == i || row_l == row_i || seen.contains(&row_l) {
                continue;
            }
            let mut d = x.clone();
            d.set_row(i, &row_l);
            moves.push((format!("r[{i}<-{l}]"), f64::NAN, d));
            seen.push(row_l);
        }
        self.decide(x, inc, moves, seed)
    }
}

/// Cyclic coordinate exchange from `initial`. Rows are visited in lexicographic
/// order of their content at the start of each pass, coordinates within a row
/// in column order. Each coordinate gets its own seed block from `rng`, shared
/// by every candidate and the incumbent.
pub fn coordinate_exchange<R: Rng + ?Sized>(
    objective: &dyn Objective,
    initial: Design,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<(Design, OptimizationTrace)> {
    cfg.validate()?;
    let stochastic = objective.is_stochastic();
    let mut ex = Exchange {
        objective,
        cfg,
        stochastic,
        records: Vec::new(),
        fallbacks: 0,
        pass: 0,
    };
    let mut x = initial;
    let mut inc = score(objective, &x, rng.random(), cfg.comparison_b)?;
    ex.record("init".into(), f64::NAN, &inc, true);
    let k = x.k();
    for pass in 1..=cfg.passes {
        ex.pass = pass;
        let start = x.clone();
        for i in lexicographic_rows(&x) {
            for j in 0..k {
                inc = ex.step_coordinate(&mut x, inc, i, j, rng.random())?;
            }
        }
        if cfg.replication_moves {
            for i in lexicographic_rows(&x) {
                inc = ex.step_replication(&mut x, inc, i, rng.random())?;
            }
        }
        if x == start {
            break;
        }
    }
    if inc.mean == f64::NEG_INFINITY && !stochastic {
        let trace = OptimizationTrace {
            records: ex.records,
            best_objective: inc,
            best_design: x,
            emulator_fallbacks: ex.fallbacks,
        };
        return Err(GodError::Stuck { trace: Box::new(trace) });
    }
    let best_objective = if stochastic {
        let e = score(objective, &x, cfg.seed ^ FINAL_SEED_SALT, 4 * cfg.comparison_b)?;
        ex.pass = cfg.passes + 1;
        ex.record("final".into(), f64::NAN, &e, true);
        if e.mean == f64::NEG_INFINITY {
            let trace = OptimizationTrace {
                records: ex.records,
                best_objective: e,
                best_design: x,
                emulator_fallbacks: ex.fallbacks,
            };
            return Err(GodError::Stuck { trace: Box::new(trace) });
        }
        e
    } else {
        inc
    };
    Ok((
        x.clone(),
        OptimizationTrace {
            records: ex.records,
            best_design: x,
            best_objective,
            emulator_fallbacks: ex.fallbacks,
        },
    ))
}

/// Evaluates `points` equally spaced values of one coordinate, fits a 1-d GP
/// to the estimates and returns the maximizer of its mean on a fine grid.
/// The flag reports a failed fit, in which case the raw argmax is returned.
pub fn emulator_smooth_search(
    objective: &dyn Objective,
    design: &Design,
    coordinate: (usize, usize),
    points: usize,
    b: usize,
    seed: u64,
) -> Result<(f64, bool)> {
    let (i, j) = coordinate;
    let xs: Vec<f64> = (0..points).map(|m| -1.0 + 2.0 * m as f64 / (points - 1) as f64).collect();
    let designs: Vec<Design> = xs
        .iter()
        .map(|&v| {
            let mut d = design.clone();
            d.set(i, j, v);
            d
        })
        .collect();
    let ys: Vec<f64> = designs
        .par_iter()
        .map(|d| score(objective, d, seed, b).map(|e| e.mean))
        .collect::<Result<_>>()?;
    match emulator_propose(&xs, &ys) {
        Ok(v) => Ok((v, false)),
        Err(_) => {
            let best = xs
                .iter()
                .zip(&ys)
                .fold((xs[0], f64::NEG_INFINITY), |acc, (&x, &y)| if y > acc.1 { (x, y) } else { acc });
            Ok((best.0, true))
        }
    }
}

/// Maximizer over a fine grid of [-1, 1] of the posterior mean of a
/// constant-mean 1-d GP with squared-exponential kernel; length-scale and
/// nugget chosen by profile likelihood over a fixed grid.
pub fn emulator_propose(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(_, y)| y.is_finite()).map(|(&x, &y)| (x, y)).collect();
    let m = pts.len();
    if m < 3 {
        return Err(GodError::GpFit(format!("only {m} finite emulator points")));
    }
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let sd = (pts.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
    if !(sd > 0.0) {
        return Err(GodError::GpFit("emulator responses are constant".into()));
    }
    let z = DVector::from_iterator(m, pts.iter().map(|p| (p.1 - mean) / sd));
    let kernel = |a: f64, b: f64, ell: f64| (-((a - b) / ell).powi(2)).exp();
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    for &ell in &[0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0] {
        for &nugget in &[1e-8, 1e-4, 1e-2, 1e-1, 0.5] {
            let k = DMatrix::from_fn(m, m, |r, c| kernel(pts[r].0, pts[c].0, ell) + if r == c { nugget } else { 0.0 });
            let Ok(chol) = cholesky(&k) else { continue };
            let alpha = chol.solve(&z);
            let s2 = z.dot(&alpha) / m as f64;
            let loglik = -0.5 * m as f64 * s2.ln() - chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if loglik.is_finite() && best.as_ref().is_none_or(|b| loglik > b.0) {
                best = Some((loglik, ell, alpha));
            }
        }
    }
    let (_, ell, alpha) = best.ok_or_else(|| GodError::GpFit("no emulator kernel was positive definite".into()))?;
    let predict = |x: f64| pts.iter().zip(alpha.iter()).map(|(p, a)| kernel(x, p.0, ell) * a).sum::<f64>();
    let fine = (0..EMULATOR_FINE_GRID).map(|g| -1.0 + 2.0 * g as f64 / (EMULATOR_FINE_GRID - 1) as f64);
    let (arg, _) = fine.fold((0.0, f64::NEG_INFINITY), |acc, x| {
        let v = predict(x);
        if v > acc.1 {
            (x, v)
        } else {
            acc
        }
    });
    Ok((arg * 1e12).round() / 1e12)
}

/// Runs coordinate exchange from `cfg.restarts` random starts in parallel
/// and returns the best. Restart r draws its start and seed blocks from
/// stream r of `cfg.seed`. Ties go to the lowest restart index.
pub fn multistart(objective: &dyn Objective, cfg: &OptimizerConfig, shape: (usize, usize)) -> Result<(Design, OptimizationTrace)> {
    cfg.validate()?;
    let (n, k) = shape;
    let runs: Vec<Result<(Design, OptimizationTrace)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let init = initial_design(n, k, cfg.init, &mut rng)?;
            coordinate_exchange(objective, init, cfg, &mut rng)
        })
        .collect();
    let mut best: Option<(Design, OptimizationTrace)> = None;
    let mut first_stuck: Option<GodError> = None;
    for run in runs {
        match run {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.1.best_objective.mean > b.1.best_objective.mean) {
                    best = Some(r);
                }
            }
            Err(e @ GodError::Stuck { .. }) => {
                first_stuck.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Err(first_stuck.expect("at least one restart ran")),
    }
}
