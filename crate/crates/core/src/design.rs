//! Designs, regression functions, model matrices and the unique-treatment
//! structure that every objective consumes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GodError, Result};

/// Default max-norm tolerance below which two runs count as the same treatment.
pub const TREATMENT_TOL: f64 = 1e-9;

/// An n x k matrix of controllable-variable settings in [-1, 1]^k.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    points: DMatrix<f64>,
}

impl Design {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        let design = Design { points };
        validate_design(&design)?;
        Ok(design)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(GodError::Data("design has no runs".into()));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(GodError::Data("ragged design rows".into()));
        }
        Design::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn k(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.points[(i, j)]
    }

    /// Overwrites one coordinate. The value must already lie in [-1, 1].
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!((-1.0..=1.0).contains(&value));
        self.points[(i, j)] = value;
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    pub fn set_row(&mut self, i: usize, row: &[f64]) {
        for (j, &v) in row.iter().enumerate() {
            self.set(i, j, v);
        }
    }

    /// Rows reordered so that row `r` of the result is row `perm[r]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Design {
        let points = DMatrix::from_fn(self.n(), self.k(), |r, j| self.points[(perm[r], j)]);
        Design { points }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Design {
        let points = DMatrix::from_fn(rows.len(), self.k(), |r, j| self.points[(rows[r], j)]);
        Design { points }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Design> {
        let mut reader = csv::Reader::from_path(path)?;
        let k = reader.headers()?.len();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != k {
                return Err(GodError::Data(format!(
                    "row {} has {} fields, expected {k}",
                    rows.len() + 1,
                    record.len()
                )));
            }
            let row = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| GodError::Data(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Design::from_rows(&rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// CSV text with header `x1,...,xk`; values use the shortest round-trip form.
    pub fn to_csv_string(&self) -> String {
        let mut out = (1..=self.k())
            .map(|j| format!("x{j}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for i in 0..self.n() {
            let line = (0..self.k())
                .map(|j| format!("{}", self.points[(i, j)]))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Checks the design invariants: n, k >= 1, finite entries, all in [-1, 1].
pub fn validate_design(design: &Design) -> Result<()> {
    if design.n() == 0 || design.k() == 0 {
        return Err(GodError::Data("design must have n >= 1 and k >= 1".into()));
    }
    for i in 0..design.n() {
        for j in 0..design.k() {
            let v = design.points[(i, j)];
            if !v.is_finite() {
                return Err(GodError::Data(format!("non-finite entry at ({i}, {j})")));
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(GodError::BoundsViolation { row: i, col: j, value: v });
            }
        }
    }
    Ok(())
}

/// A monomial in the controllable variables; an empty factor list is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    /// (zero-based variable index, exponent) pairs.
    pub factors: Vec<(usize, u32)>,
}

impl Term {
    pub fn intercept() -> Self {
        Term { factors: Vec::new() }
    }

    pub fn main(var: usize) -> Self {
        Term { factors: vec![(var, 1)] }
    }

    pub fn power(var: usize, exp: u32) -> Self {
        Term { factors: vec![(var, exp)] }
    }

    pub fn interaction(a: usize, b: usize) -> Self {
        Term { factors: vec![(a, 1), (b, 1)] }
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn max_var(&self) -> Option<usize> {
        self.factors.iter().map(|&(v, _)| v).max()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors
            .iter()
            .map(|&(v, e)| x[v].powi(e as i32))
            .product()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .factors
            .iter()
            .map(|&(v, e)| {
                if e == 1 {
                    format!("x{}", v + 1)
                } else {
                    format!("x{}^{}", v + 1, e)
                }
            })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

impl FromStr for Term {
    type Err = GodError;

    /// Parses `1`, `x2`, `x1^2`, `x1*x3`, `x1^2*x2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Ok(Term::intercept());
        }
        let mut factors = Vec::new();
        for part in s.split('*') {
            let part = part.trim();
            let (var, exp) = match part.split_once('^') {
                Some((v, e)) => (v, e.trim()),
                None => (part, "1"),
            };
            let idx = var
                .trim()
                .strip_prefix('x')
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&d| d >= 1)
                .ok_or_else(|| GodError::Config(format!("bad regression term {s:?}")))?;
            let exp = exp
                .parse::<u32>()
                .ok()
                .filter(|&e| e >= 1)
                .ok_or_else(|| GodError::Config(format!("bad exponent in term {s:?}")))?;
            factors.push((idx - 1, exp));
        }
        Ok(Term { factors })
    }
}

/// A row-wise feature map x -> f(x) in R^p.
pub trait Basis: Send + Sync {
    fn dim(&self) -> usize;

    /// Highest variable index referenced, if any.
    fn max_var(&self) -> Option<usize>;

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }
}

/// Monomial regression function with a fixed term order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RegressionSpec {
    terms: Vec<Term>,
}

impl RegressionSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(GodError::Config("regression spec has no terms".into()));
        }
        Ok(RegressionSpec { terms })
    }

    /// Intercept plus main effects.
    pub fn linear(k: usize) -> Self {
        let mut terms = vec![Term::intercept()];
        terms.extend((0..k).map(Term::main));
        RegressionSpec { terms }
    }

    /// Intercept, mains, pure quadratics, then two-way interactions in
    /// lexicographic order: (1, x1..xk, x1^2..xk^2, x1x2, x1x3, ...).
    pub fn full_quadratic(k: usize) -> Self {
        let mut terms = vec![Term::intercept()];
        terms.extend((0..k).map(Term::main));
        terms.extend((0..k).map(|v| Term::power(v, 2)));
        for a in 0..k {
            for b in a + 1..k {
                terms.push(Term::interaction(a, b));
            }
        }
        RegressionSpec { terms }
    }

    pub fn parse(terms: &[&str]) -> Result<Self> {
        RegressionSpec::new(terms.iter().map(|t| t.parse()).collect::<Result<_>>()?)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn p(&self) -> usize {
        self.terms.len()
    }

    pub fn has_intercept(&self) -> bool {
        self.terms.iter().any(Term::is_intercept)
    }

    /// The same spec with every intercept term removed.
    pub fn without_intercept(&self) -> Result<Self> {
        RegressionSpec::new(
            self.terms
                .iter()
                .filter(|t| !t.is_intercept())
                .cloned()
                .collect(),
        )
    }
}

impl Basis for RegressionSpec {
    fn dim(&self) -> usize {
        self.terms.len()
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.iter().filter_map(Term::max_var).max()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.eval(x);
        }
    }
}

impl TryFrom<Vec<String>> for RegressionSpec {
    type Error = GodError;

    fn try_from(v: Vec<String>) -> Result<Self> {
        RegressionSpec::new(v.iter().map(|t| t.parse()).collect::<Result<_>>()?)
    }
}

impl From<RegressionSpec> for Vec<String> {
    fn from(s: RegressionSpec) -> Self {
        s.terms.iter().map(|t| t.to_string()).collect()
    }
}

/// The n x p matrix F with row i equal to f(x_i)^T.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrix(pub DMatrix<f64>);

impl ModelMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    /// F t.
    pub fn predictor(&self, t: &DVector<f64>) -> DVector<f64> {
        &self.0 * t
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.0.tr_mul(&self.0)
    }
}

pub fn expand_model_matrix(design: &Design, spec: &RegressionSpec) -> Result<ModelMatrix> {
    expand_with_basis(design, spec)
}

/// Evaluates any basis row by row over the design.
pub fn expand_with_basis(design: &Design, basis: &dyn Basis) -> Result<ModelMatrix> {
    if let Some(v) = basis.max_var() {
        if v >= design.k() {
            return Err(GodError::SpecMismatch { index: v, k: design.k() });
        }
    }
    let p = basis.dim();
    let mut f = DMatrix::zeros(design.n(), p);
    let mut row = vec![0.0; p];
    for i in 0..design.n() {
        let x = design.row(i);
        basis.eval_into(&x, &mut row);
        for (j, &v) in row.iter().enumerate() {
            f[(i, j)] = v;
        }
    }
    Ok(ModelMatrix(f))
}

/// Grouping of runs into unique treatments.
#[derive(Debug, Clone, PartialEq)]
pub struct UniqueTreatmentStructure {
    /// Treatment index of each run; treatments are numbered by first appearance.
    assignment: Vec<usize>,
    counts: Vec<usize>,
    representatives: DMatrix<f64>,
}

impl UniqueTreatmentStructure {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn q(&self) -> usize {
        self.counts.len()
    }

    /// Pure-error degrees of freedom n - q.
    pub fn d(&self) -> usize {
        self.n() - self.q()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn representative_rows(&self) -> &DMatrix<f64> {
        &self.representatives
    }

    /// The n x q binary indicator matrix Z.
    pub fn z(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n(), self.q());
        for (i, &t) in self.assignment.iter().enumerate() {
            z[(i, t)] = 1.0;
        }
        z
    }

    /// Z mu_bar: expands per-treatment values to runs.
    pub fn expand(&self, per_treatment: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.assignment.iter().map(|&t| per_treatment[t]),
        )
    }

    /// H_Z y, i.e. each response replaced by its treatment mean.
    pub fn treatment_means(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut sums = vec![0.0; self.q()];
        for (i, &t) in self.assignment.iter().enumerate() {
            sums[t] += y[i];
        }
        let means = DVector::from_iterator(
            self.q(),
            sums.iter().zip(&self.counts).map(|(s, &c)| s / c as f64),
        );
        self.expand(&means)
    }

    /// y^T (I - H_Z) y, the pure-error sum of squares.
    pub fn pure_error_ss(&self, y: &DVector<f64>) -> f64 {
        let fitted = self.treatment_means(y);
        (y - fitted).norm_squared()
    }

    /// Indices of all runs sharing run `i`'s treatment.
    pub fn group_of(&self, i: usize) -> Vec<usize> {
        let t = self.assignment[i];
        (0..self.n()).filter(|&r| self.assignment[r] == t).collect()
    }
}

/// Collapses rows whose max-coordinate distance is within `tol` of a
/// treatment's first row.
pub fn unique_treatments(design: &Design, tol: f64) -> UniqueTreatmentStructure {
    let n = design.n();
    let k = design.k();
    let mut reps: Vec<usize> = Vec::new();
    let mut assignment = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        let found = reps.iter().position(|&r| {
            (0..k).all(|j| (design.get(i, j) - design.get(r, j)).abs() <= tol)
        });
        match found {
            Some(t) => {
                assignment.push(t);
                counts[t] += 1;
            }
            None => {
                assignment.push(reps.len());
                reps.push(i);
                counts.push(1);
            }
        }
    }
    let representatives = DMatrix::from_fn(reps.len(), k, |t, j| design.get(reps[t], j));
    UniqueTreatmentStructure {
        assignment,
        counts,
        representatives,
    }
}
