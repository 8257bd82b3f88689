//! End-to-end reproductions of the comparison tables and the calibration
//! study, shared by the command-line tool and the acceptance tests.

use serde::{Deserialize, Serialize};

use crate::design::{unique_treatments, Design, RegressionSpec, TREATMENT_TOL};
use crate::designer::DesignerConfig;
use crate::error::{GodError, Result};
use crate::exchange::{multistart, Emulator, InitStrategy, OptimizerConfig, OptimizationTrace};
use crate::simstudy::{run_calibration_study, CalibrationStudyResult, StudySettings};
use crate::utility::{efficiency, ExpectedUtility, Objective, ObjectiveKind, ObjectiveSpec, Problem, Utility};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

/// One cell: an objective (row) evaluated on a design (column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproEntry {
    pub row: String,
    pub column: String,
    pub value: f64,
    pub std_error: f64,
    pub efficiency: Option<f64>,
    pub reference_value: Option<f64>,
    pub reference_efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproTable {
    pub name: String,
    pub scale: Scale,
    pub seed: u64,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub entries: Vec<ReproEntry>,
    #[serde(skip)]
    pub designs: Vec<(String, Design)>,
}

impl ReproTable {
    pub fn entry(&self, row: &str, column: &str) -> Option<&ReproEntry> {
        self.entries.iter().find(|e| e.row == row && e.column == column)
    }

    pub fn design(&self, name: &str) -> Option<&Design> {
        self.designs.iter().find(|d| d.0 == name).map(|d| &d.1)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| GodError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| GodError::Io(e.to_string()))
    }

    /// Grid of `value (efficiency) | reference value (reference efficiency)`.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n| |", self.name);
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        let fmt = |v: f64, eff: Option<f64>| {
            let mut s = if v.is_infinite() {
                "-inf".to_string()
            } else {
                format!("{v:.4}")
            };
            if let Some(e) = eff {
                s.push_str(&format!(" ({:.0}%)", 100.0 * e));
            }
            s
        };
        for r in &self.rows {
            out.push_str(&format!("| {r} |"));
            for c in &self.columns {
                let cell = match self.entry(r, c) {
                    Some(e) => {
                        let mut s = fmt(e.value, e.efficiency);
                        if e.std_error > 0.0 {
                            s.push_str(&format!(" ±{:.3}", e.std_error));
                        }
                        if let Some(rv) = e.reference_value {
                            s.push_str(&format!(" / ref {}", fmt(rv, e.reference_efficiency)));
                        }
                        s
                    }
                    None => String::new(),
                };
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
        out
    }
}

fn push_row(
    table: &mut ReproTable,
    row: &str,
    values: &[(f64, f64)],
    opt_column: Option<usize>,
    scale_utility: Utility,
    p: usize,
    reference: &[(f64, f64)],
) {
    let opt = opt_column.map(|c| values[c].0);
    for (c, &(value, se)) in values.iter().enumerate() {
        table.entries.push(ReproEntry {
            row: row.into(),
            column: table.columns[c].clone(),
            value,
            std_error: se,
            efficiency: opt.map(|o| efficiency(value, o, scale_utility, p)),
            reference_value: reference.get(c).map(|r| r.0),
            reference_efficiency: reference.get(c).map(|r| r.1).filter(|e| e.is_finite()),
        });
    }
    table.rows.push(row.into());
}

const TABLE1_FIXED: [(f64, f64); 3] = [(11.95, 1.0), (11.95, 1.0), (f64::NEG_INFINITY, 0.0)];
const TABLE1_RANDOM: [(f64, f64); 3] = [(15.73, 1.0), (15.73, 1.0), (12.05, 0.69)];
const TABLE1_DOPT: [(f64, f64); 3] = [(18.26, 0.85), (18.26, 0.85), (19.92, 1.0)];
const TABLE1_DF: [(f64, f64); 3] = [(6.0, f64::NAN), (6.0, f64::NAN), (0.0, f64::NAN)];
const TABLE2_NSE: [(f64, f64); 3] = [(-0.6950, 1.0), (-0.7882, 0.88), (-0.9191, 0.75)];
const TABLE2_SH: [(f64, f64); 3] = [(-12.21, 0.45), (-4.299, 1.0), (-7.932, 0.70)];
const TABLE3_N: [usize; 5] = [10, 20, 30, 40, 50];
const TABLE3_GIBBS_OF_BAYES: [f64; 5] = [0.037, 0.061, 0.131, 0.159, 0.175];
const TABLE3_BAYES_OF_GIBBS: [f64; 5] = [0.270, 0.510, 0.600, 0.650, 0.680];

/// Printed reference cells of the sum-of-squares table: (value, efficiency)
/// per design column for the fixed-weight, random-weight and D-optimal rows.
pub fn table1_reference() -> [[(f64, f64); 3]; 3] {
    [TABLE1_FIXED, TABLE1_RANDOM, TABLE1_DOPT]
}

/// Printed reference cells of the L2 table: NSE row then SH row.
pub fn table2_reference() -> [[(f64, f64); 3]; 2] {
    [TABLE2_NSE, TABLE2_SH]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Settings {
    pub fixed_restarts: usize,
    pub dopt_restarts: usize,
    pub random_restarts: usize,
    pub random_search_b: usize,
    pub final_b: usize,
    pub passes: usize,
    pub grid_size: usize,
    /// Skip the Monte Carlo search under the random weight.
    pub skip_random_search: bool,
    pub seed: u64,
}

impl Table1Settings {
    pub fn new(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Table1Settings {
                fixed_restarts: 20,
                dopt_restarts: 100,
                random_restarts: 4,
                random_search_b: 500,
                final_b: 2000,
                passes: 10,
                grid_size: 21,
                skip_random_search: false,
                seed,
            },
            Scale::Full => Table1Settings {
                fixed_restarts: 100,
                dopt_restarts: 200,
                random_restarts: 20,
                random_search_b: 1000,
                final_b: 20000,
                passes: 10,
                grid_size: 21,
                skip_random_search: false,
                seed,
            },
        }
    }
}

/// Designs of the sum-of-squares comparison.
#[derive(Debug, Clone)]
pub struct Table1Designs {
    pub gibbs_fixed: (Design, OptimizationTrace),
    pub gibbs_random: Option<(Design, OptimizationTrace)>,
    pub d_optimal: (Design, OptimizationTrace),
}

pub fn table1_designs(s: &Table1Settings) -> Result<Table1Designs> {
    let reg = RegressionSpec::full_quadratic(3);
    let replicated = InitStrategy::Replicated { q_min: 10, q_max: 13 };
    let fixed_cfg = OptimizerConfig {
        grid_size: s.grid_size,
        passes: s.passes,
        restarts: s.fixed_restarts,
        seed: s.seed,
        init: replicated,
        replication_moves: true,
        ..Default::default()
    };
    let fixed = ExpectedUtility::new(ObjectiveSpec::closed(ObjectiveKind::ClosedShFixed, reg.clone()))?;
    let gibbs_fixed = multistart(&fixed, &fixed_cfg, (16, 3))?;
    let dopt_cfg = OptimizerConfig {
        restarts: s.dopt_restarts,
        init: InitStrategy::Uniform,
        replication_moves: false,
        ..fixed_cfg
    };
    let dopt = ExpectedUtility::new(ObjectiveSpec::closed(ObjectiveKind::ClosedDOptimal, reg.clone()))?;
    let d_optimal = multistart(&dopt, &dopt_cfg, (16, 3))?;
    let gibbs_random = if s.skip_random_search {
        None
    } else {
        let random = ExpectedUtility::new(ObjectiveSpec::new(
            Problem::LinearSsRandom,
            Utility::Sh,
            reg,
            s.random_search_b,
        ))?;
        let cfg = OptimizerConfig {
            restarts: s.random_restarts,
            comparison_b: s.random_search_b,
            ..fixed_cfg
        };
        Some(multistart(&random, &cfg, (16, 3))?)
    };
    Ok(Table1Designs {
        gibbs_fixed,
        gibbs_random,
        d_optimal,
    })
}

/// Sum-of-squares comparison: fixed- and random-weight Gibbs SH designs and
/// the D-optimal design under all three objectives, n = 16, k = 3, full
/// quadratic model.
pub fn table1(scale: Scale, settings: &Table1Settings) -> Result<ReproTable> {
    let designs = table1_designs(settings)?;
    let reg = RegressionSpec::full_quadratic(3);
    let mut columns = vec![("fixed_w", designs.gibbs_fixed.0.clone())];
    if let Some(r) = &designs.gibbs_random {
        columns.push(("random_w", r.0.clone()));
    }
    columns.push(("d_optimal", designs.d_optimal.0.clone()));
    let reference_for = |row: &[(f64, f64); 3]| -> Vec<(f64, f64)> {
        columns
            .iter()
            .map(|(name, _)| match *name {
                "fixed_w" => row[0],
                "random_w" => row[1],
                _ => row[2],
            })
            .collect()
    };
    let mut table = ReproTable {
        name: "Sum-of-squares loss: objective values (efficiency)".into(),
        scale,
        seed: settings.seed,
        rows: vec![],
        columns: columns.iter().map(|c| c.0.to_string()).collect(),
        entries: vec![],
        designs: columns.iter().map(|(n, d)| (n.to_string(), d.clone())).collect(),
    };
    let fixed = ExpectedUtility::new(ObjectiveSpec::closed(ObjectiveKind::ClosedShFixed, reg.clone()))?;
    let random = ExpectedUtility::new(ObjectiveSpec::new(
        Problem::LinearSsRandom,
        Utility::Sh,
        reg.clone(),
        settings.final_b,
    ))?;
    let dopt = ExpectedUtility::new(ObjectiveSpec::closed(ObjectiveKind::ClosedDOptimal, reg.clone()))?;
    let eval = |obj: &ExpectedUtility| -> Result<Vec<(f64, f64)>> {
        columns
            .iter()
            .map(|(_, d)| obj.evaluate(d, settings.seed ^ 0x7461_626c_6531).map(|e| (e.mean, e.std_error)))
            .collect()
    };
    let last = columns.len() - 1;
    let random_opt = if designs.gibbs_random.is_some() { 1 } else { 0 };
    push_row(&mut table, "fixed_w_sh", &eval(&fixed)?, Some(0), Utility::Sh, 10, &reference_for(&TABLE1_FIXED));
    push_row(&mut table, "random_w_sh", &eval(&random)?, Some(random_opt), Utility::Sh, 10, &reference_for(&TABLE1_RANDOM));
    push_row(&mut table, "d_optimality", &eval(&dopt)?, Some(last), Utility::Sh, 10, &reference_for(&TABLE1_DOPT));
    let df: Vec<(f64, f64)> = columns
        .iter()
        .map(|(_, d)| (unique_treatments(d, TREATMENT_TOL).d() as f64, 0.0))
        .collect();
    push_row(&mut table, "pure_error_df", &df, None, Utility::Sh, 10, &reference_for(&TABLE1_DF));
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table2Settings {
    pub search_b: usize,
    pub search_gp_restarts: usize,
    pub emulator_points: usize,
    pub restarts: usize,
    pub passes: usize,
    pub final_b: usize,
    pub final_gp_restarts: usize,
    pub seed: u64,
}

impl Table2Settings {
    pub fn new(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Table2Settings {
                search_b: 100,
                search_gp_restarts: 3,
                emulator_points: 5,
                restarts: 1,
                passes: 2,
                final_b: 500,
                final_gp_restarts: 10,
                seed,
            },
            Scale::Full => Table2Settings {
                search_b: 1000,
                search_gp_restarts: 10,
                emulator_points: 10,
                restarts: 4,
                passes: 10,
                final_b: 20000,
                final_gp_restarts: 10,
                seed,
            },
        }
    }
}

fn l2_objective(utility: Utility, b: usize, gp_restarts: usize) -> Result<ExpectedUtility> {
    let mut spec = ObjectiveSpec::new(Problem::LinearL2, utility, RegressionSpec::full_quadratic(3), b);
    spec.options.gp.restarts = gp_restarts;
    ExpectedUtility::new(spec)
}

/// L2-loss comparison: NSE and SH Gibbs designs against a supplied
/// space-filling design, n = 16, k = 3.
pub fn table2(scale: Scale, lhd: &Design, s: &Table2Settings) -> Result<ReproTable> {
    if (lhd.n(), lhd.k()) != (16, 3) {
        return Err(GodError::Data(format!(
            "the comparison design must have 16 runs and 3 variables, got {} x {}",
            lhd.n(),
            lhd.k()
        )));
    }
    let cfg = OptimizerConfig {
        passes: s.passes,
        restarts: s.restarts,
        emulator: Emulator::On {
            points: s.emulator_points,
        },
        comparison_b: s.search_b,
        seed: s.seed,
        ..Default::default()
    };
    let nse_design = multistart(&l2_objective(Utility::Nse, s.search_b, s.search_gp_restarts)?, &cfg, (16, 3))?.0;
    let sh_design = multistart(&l2_objective(Utility::Sh, s.search_b, s.search_gp_restarts)?, &cfg, (16, 3))?.0;
    let designs = vec![
        ("nse".to_string(), nse_design),
        ("sh".to_string(), sh_design),
        ("lhd".to_string(), lhd.clone()),
    ];
    let mut table = ReproTable {
        name: "L2 loss: objective values (efficiency)".into(),
        scale,
        seed: s.seed,
        rows: vec![],
        columns: designs.iter().map(|d| d.0.clone()).collect(),
        entries: vec![],
        designs: designs.clone(),
    };
    for (row, utility, opt, reference) in [
        ("nse_utility", Utility::Nse, 0, TABLE2_NSE),
        ("sh_utility", Utility::Sh, 1, TABLE2_SH),
    ] {
        let obj = l2_objective(utility, s.final_b, s.final_gp_restarts)?;
        let values: Vec<(f64, f64)> = designs
            .iter()
            .map(|(_, d)| obj.evaluate(d, s.seed ^ 0x7461_626c_6532).map(|e| (e.mean, e.std_error)))
            .collect::<Result<_>>()?;
        push_row(&mut table, row, &values, Some(opt), utility, 10, &reference);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Settings {
    pub n_values: Vec<usize>,
    pub rho: f64,
    pub search_b: usize,
    pub emulator_points: usize,
    pub restarts: usize,
    pub passes: usize,
    pub final_b: usize,
    pub seed: u64,
}

impl Table3Settings {
    pub fn new(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Table3Settings {
                n_values: vec![10, 30],
                rho: 0.75,
                search_b: 500,
                emulator_points: 7,
                restarts: 2,
                passes: 3,
                final_b: 2000,
                seed,
            },
            Scale::Full => Table3Settings {
                n_values: TABLE3_N.to_vec(),
                rho: 0.75,
                search_b: 1000,
                emulator_points: 10,
                restarts: 10,
                passes: 10,
                final_b: 20000,
                seed,
            },
        }
    }
}

fn tte_objective(bayes: bool, rho: f64, b: usize) -> Result<ExpectedUtility> {
    let reg = RegressionSpec::linear(3);
    let (problem, designer) = if bayes {
        (Problem::BayesWeibull, DesignerConfig::weibull_model(rho))
    } else {
        (Problem::TtePl, DesignerConfig::tte(rho))
    };
    let mut spec = ObjectiveSpec::new(problem, Utility::Nse, reg, b);
    spec.designer = designer;
    ExpectedUtility::new(spec)
}

/// Cross-efficiencies of the partial-likelihood Gibbs design and the Weibull
/// Bayesian design, k = 3 main effects, NSE utility.
pub fn table3(scale: Scale, s: &Table3Settings) -> Result<ReproTable> {
    let mut table = ReproTable {
        name: format!("Time-to-event cross-efficiencies (rho = {})", s.rho),
        scale,
        seed: s.seed,
        rows: vec![],
        columns: s.n_values.iter().map(|n| format!("n={n}")).collect(),
        entries: vec![],
        designs: vec![],
    };
    let rows = [
        "gibbs_efficiency_of_bayes_design",
        "bayes_efficiency_of_gibbs_design",
        "gibbs_utility_gibbs_design",
        "gibbs_utility_bayes_design",
        "bayes_utility_gibbs_design",
        "bayes_utility_bayes_design",
    ];
    table.rows = rows.iter().map(|r| r.to_string()).collect();
    for (idx, &n) in s.n_values.iter().enumerate() {
        let column = table.columns[idx].clone();
        let seed = s.seed.wrapping_add(n as u64);
        let cfg = OptimizerConfig {
            passes: s.passes,
            restarts: s.restarts,
            emulator: Emulator::On {
                points: s.emulator_points,
            },
            comparison_b: s.search_b,
            seed,
            ..Default::default()
        };
        let gibbs_search = tte_objective(false, s.rho, s.search_b)?;
        let bayes_search = tte_objective(true, s.rho, s.search_b)?;
        let xg = multistart(&gibbs_search, &cfg, (n, 3))?.0;
        let xb = multistart(&bayes_search, &cfg, (n, 3))?.0;
        let gibbs = tte_objective(false, s.rho, s.final_b)?;
        let bayes = tte_objective(true, s.rho, s.final_b)?;
        let final_seed = seed ^ 0x7461_626c_6533;
        let ug_g = gibbs.evaluate(&xg, final_seed)?;
        let ug_b = gibbs.evaluate(&xb, final_seed)?;
        let ub_g = bayes.evaluate(&xg, final_seed)?;
        let ub_b = bayes.evaluate(&xb, final_seed)?;
        let reference = TABLE3_N.iter().position(|&m| m == n);
        let cells = [
            (efficiency(ug_b.mean, ug_g.mean, Utility::Nse, 4), 0.0, reference.map(|i| TABLE3_GIBBS_OF_BAYES[i])),
            (efficiency(ub_g.mean, ub_b.mean, Utility::Nse, 4), 0.0, reference.map(|i| TABLE3_BAYES_OF_GIBBS[i])),
            (ug_g.mean, ug_g.std_error, None),
            (ug_b.mean, ug_b.std_error, None),
            (ub_g.mean, ub_g.std_error, None),
            (ub_b.mean, ub_b.std_error, None),
        ];
        for (row, (value, se, reference_value)) in rows.iter().zip(cells) {
            table.entries.push(ReproEntry {
                row: row.to_string(),
                column: column.clone(),
                value,
                std_error: se,
                efficiency: None,
                reference_value,
                reference_efficiency: None,
            });
        }
        table.designs.push((format!("gibbs_n{n}"), xg));
        table.designs.push((format!("bayes_n{n}"), xb));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimstudySettings {
    pub n_values: Vec<usize>,
    pub b: usize,
    pub study: StudySettings,
}

impl SimstudySettings {
    pub fn new(scale: Scale, seed: u64) -> Self {
        let study = StudySettings {
            seed,
            ..Default::default()
        };
        match scale {
            Scale::Desk => SimstudySettings {
                n_values: vec![20, 50, 100, 200],
                b: 500,
                study,
            },
            Scale::Full => SimstudySettings {
                n_values: (20..=200).step_by(5).collect(),
                b: 1000,
                study,
            },
        }
    }
}

/// Fixed versus random calibration weight interval study, full quadratic
/// model in k = 3 variables.
pub fn simstudy(s: &SimstudySettings) -> Result<CalibrationStudyResult> {
    run_calibration_study(
        &s.n_values,
        s.b,
        &DesignerConfig::linear(),
        &RegressionSpec::full_quadratic(3),
        3,
        &s.study,
    )
}
