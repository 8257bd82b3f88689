//! Fixtures shared by the objective benchmarks.

use god_core::exchange::initial_design;
use god_core::{Design, ExpectedUtility, InitStrategy, ObjectiveKind, ObjectiveSpec, Problem, RegressionSpec, Utility};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random n x k design with about n/3 replicate rows, from a fixed seed.
pub fn design(n: usize, k: usize, seed: u64) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    initial_design(n, k, InitStrategy::Replicated { q_min: n * 2 / 3, q_max: n * 2 / 3 }, &mut rng)
        .expect("valid shape")
}

/// Monte Carlo objective of `problem` with the problem's default designer,
/// even where a closed form exists.
pub fn mc_objective(problem: Problem, utility: Utility, regression: RegressionSpec, b: usize) -> ExpectedUtility {
    let kind = if problem.is_bayes() { ObjectiveKind::McBayes } else { ObjectiveKind::McGibbs };
    ExpectedUtility::new(ObjectiveSpec::new(problem, utility, regression, b).with_kind(kind)).expect("valid objective")
}
