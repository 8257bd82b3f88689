//! Optimal experimental design under Gibbs (generalised Bayesian) inference.
//!
//! A design is an n x k matrix in [-1, 1]^k. Each objective scores a design by
//! the expected utility of the Gibbs posterior it would produce, with the
//! expectation taken over a designer distribution for the responses.
//! [`exchange::multistart`] maximises any [`utility::Objective`] by
//! coordinate exchange.

pub mod design;
pub mod designer;
pub mod error;
pub mod exchange;
pub mod glm;
pub mod linalg;
pub mod losses;
pub mod posterior;
pub mod quasi_newton;
pub mod repro;
pub mod simstudy;
pub mod special;
pub mod utility;

pub use design::{
    expand_model_matrix, unique_treatments, validate_design, Design, ModelMatrix, RegressionSpec, Term,
    UniqueTreatmentStructure, TREATMENT_TOL,
};
pub use designer::{target_params, Designer, DesignerConfig, Family, KappaDist, ScenarioSample, TargetRule};
pub use error::{GodError, Result};
pub use exchange::{
    coordinate_exchange, emulator_smooth_search, multistart, Emulator, InitStrategy, OptimizationTrace,
    OptimizerConfig, TraceRecord,
};
pub use losses::{CalibrationWeight, Loss, LossEvaluation};
pub use posterior::{GibbsPosteriorApprox, LogPrior, ModeOptions, PosteriorKind, PriorComponent};
pub use simstudy::{interval_coverage, run_calibration_study, CalibrationStudyResult, StudySettings};
pub use utility::{
    closed_objective, efficiency, mc_expected_utility, sh_random_objective, ExpectedUtility, Objective,
    ObjectiveKind, ObjectiveSpec, PipelineOptions, Problem, Utility, UtilityEstimate,
};
