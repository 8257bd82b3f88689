//! JSON run configuration and its translation into library objectives.

use std::collections::BTreeMap;
use std::path::Path;

use god_core::losses::CalibrationWeight;
use god_core::{
    DesignerConfig, ExpectedUtility, Family, ObjectiveKind, ObjectiveSpec, OptimizerConfig, Problem, RegressionSpec,
    Utility,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything `god optimize` and `god evaluate` need. Omitted optional
/// fields take the per-problem defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub n: usize,
    pub k: usize,
    /// Regression terms such as `["1", "x1", "x1^2", "x1*x2"]`.
    pub regression: RegressionSpec,
    pub utility: Utility,
    #[serde(default)]
    pub designer: Option<DesignerConfig>,
    #[serde(default)]
    pub weight: Option<CalibrationWeight>,
    /// Overrides the problem's preferred objective (closed form when one exists).
    #[serde(default)]
    pub objective: Option<ObjectiveKind>,
    /// Monte Carlo size during search.
    #[serde(default = "default_b")]
    pub b: usize,
    /// Monte Carlo size of `god evaluate`.
    #[serde(default = "default_final_b")]
    pub final_b: usize,
    /// Prior variance of the partial-likelihood slopes; `null` is flat.
    #[serde(default = "default_pl_prior_var")]
    pub pl_prior_var: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Reference objective values, keyed by objective name, for efficiencies.
    #[serde(default)]
    pub references: BTreeMap<String, f64>,
}

fn default_b() -> usize {
    500
}
fn default_final_b() -> usize {
    2000
}
fn default_pl_prior_var() -> Option<f64> {
    Some(5.0)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Input(format!("config error at {path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Input(format!("config error at {field}: {msg}")));
        if self.n == 0 || self.k == 0 {
            return bad(".n", "n and k must be positive".into());
        }
        if let Some(v) = self.regression.terms().iter().filter_map(|t| t.max_var()).max() {
            if v >= self.k {
                return bad(".regression", format!("term uses x{} but k = {}", v + 1, self.k));
            }
        }
        if self.problem == Problem::BayesGaussian {
            return bad(".problem", "bayes_gaussian is not one of the supported pipelines".into());
        }
        let family = self.designer().family;
        let expected = match self.problem {
            Problem::LinearSsFixed | Problem::LinearSsRandom | Problem::LinearL2 => Family::Linear,
            Problem::CountQl => Family::Count,
            Problem::TtePl => Family::Tte,
            Problem::BayesPoisson => Family::PoissonModel,
            Problem::BayesWeibull | Problem::BayesGaussian => Family::WeibullModel,
        };
        if family != expected {
            return bad(
                ".designer.family",
                format!("{:?} does not match problem {:?}", family, self.problem),
            );
        }
        let weight = self.weight();
        let allowed = match self.problem {
            Problem::LinearSsFixed => matches!(weight, CalibrationWeight::PureError | CalibrationWeight::Fixed { .. }),
            Problem::LinearSsRandom => weight == CalibrationWeight::RandomConjugate,
            Problem::LinearL2 => matches!(weight, CalibrationWeight::L2Trace | CalibrationWeight::Fixed { .. }),
            Problem::CountQl => matches!(weight, CalibrationWeight::Dispersion | CalibrationWeight::Fixed { .. }),
            Problem::TtePl => matches!(weight, CalibrationWeight::Unit | CalibrationWeight::Fixed { .. }),
            _ => weight == CalibrationWeight::Unit,
        };
        if !allowed {
            return bad(
                ".weight",
                format!("{weight:?} is not a weight rule of problem {:?}", self.problem),
            );
        }
        if let Some(var) = self.pl_prior_var {
            if !(var > 0.0 && var.is_finite()) {
                return bad(".pl_prior_var", "must be positive and finite".into());
            }
        }
        if self.b == 0 || self.final_b == 0 {
            return bad(".b", "Monte Carlo sizes must be positive".into());
        }
        self.optimizer
            .validate()
            .or_else(|e| bad(".optimizer", e.to_string()))?;
        self.designer()
            .validate()
            .or_else(|e| bad(".designer", e.to_string()))?;
        Ok(())
    }

    pub fn designer(&self) -> DesignerConfig {
        self.designer.clone().unwrap_or_else(|| self.problem.default_designer())
    }

    pub fn weight(&self) -> CalibrationWeight {
        self.weight.unwrap_or_else(|| self.problem.default_weight())
    }

    pub fn search_kind(&self) -> ObjectiveKind {
        self.objective.unwrap_or_else(|| self.problem.preferred_kind(self.utility))
    }

    /// Applies `--seed-override` and copies the run seed into the optimizer.
    pub fn with_seed(mut self, seed_override: Option<u64>) -> Self {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.optimizer.seed = self.seed;
        self
    }

    pub fn objective(&self, kind: ObjectiveKind, b: usize) -> Result<ExpectedUtility, CliError> {
        let mut spec = ObjectiveSpec::new(self.problem, self.utility, self.regression.clone(), b).with_kind(kind);
        spec.designer = self.designer();
        spec.weight = self.weight();
        spec.options.pl_prior_var = self.pl_prior_var;
        ExpectedUtility::new(spec).map_err(CliError::from)
    }

    /// Dimension of the parameter the utility scores, which sets the SH
    /// efficiency exponent.
    pub fn target_dim(&self) -> usize {
        let p = self.regression.p();
        if self.problem == Problem::TtePl && self.regression.has_intercept() {
            p - 1
        } else {
            p
        }
    }
}

pub fn parse_objective_name(name: &str) -> Result<ObjectiveKind, CliError> {
    serde_json::from_value(serde_json::Value::String(name.trim().to_string()))
        .map_err(|_| CliError::Input(format!("unknown objective {name:?}")))
}

pub fn objective_name(kind: ObjectiveKind) -> String {
    match serde_json::to_value(kind) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{kind:?}"),
    }
}
