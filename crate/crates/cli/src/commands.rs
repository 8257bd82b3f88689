use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use god_core::repro::{self, Scale, SimstudySettings, Table1Settings, Table2Settings, Table3Settings};
use god_core::{efficiency, multistart, unique_treatments, Design, GodError, Objective, TREATMENT_TOL};
use serde::Serialize;
use serde_json::json;

use crate::config::{objective_name, parse_objective_name, RunConfig};
use crate::{CliError, ReproTarget, ScaleArg};

/// Seed salt separating `evaluate` draws from the search's seed blocks.
const EVALUATE_SALT: u64 = 0x6576_616c_7561_7465;

fn output_dir(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Input("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    write(path, &(text + "\n"))
}

/// JSON cannot hold infinities; they are written as strings.
fn number(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

pub fn optimize(config: &Path, out: Option<PathBuf>, seed_override: Option<u64>) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = RunConfig::load(config)?.with_seed(seed_override);
    let dir = output_dir(out, &cfg)?;
    let kind = cfg.search_kind();
    let objective = cfg.objective(kind, cfg.b)?;
    let (design, trace) = match multistart(&objective, &cfg.optimizer, (cfg.n, cfg.k)) {
        Ok(r) => r,
        Err(GodError::Stuck { trace }) => {
            trace.write_csv(dir.join("trace.csv"))?;
            return Err(CliError::Numerical(format!(
                "optimizer stuck: every one of {} candidate evaluations was -inf; see {}",
                trace.records.len(),
                dir.join("trace.csv").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    design.write_csv(dir.join("design.csv"))?;
    trace.write_csv(dir.join("trace.csv"))?;
    let uts = unique_treatments(&design, TREATMENT_TOL);
    let est = trace.best_objective;
    let report = json!({
        "design": "design.csv",
        "objective": {
            "name": objective_name(kind),
            "mean": number(est.mean),
            "std_error": number(est.std_error),
            "b": est.b,
            "n_failures": est.n_failures,
        },
        "n": cfg.n,
        "k": cfg.k,
        "p": cfg.regression.p(),
        "q": uts.q(),
        "d": uts.d(),
        "emulator_fallbacks": trace.emulator_fallbacks,
        "config": cfg,
        "seed": cfg.seed,
        "wall_time_secs": start.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "{}: {} (se {}), q = {}, d = {}; wrote {}",
        objective_name(kind),
        est.mean,
        est.std_error,
        uts.q(),
        uts.d(),
        dir.display()
    );
    Ok(())
}

pub fn evaluate(
    design_path: &Path,
    config: &Path,
    objectives: &[String],
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?.with_seed(seed_override);
    let design = Design::read_csv(design_path)?;
    if (design.n(), design.k()) != (cfg.n, cfg.k) {
        return Err(CliError::Input(format!(
            "design is {} x {} but the config expects {} x {}",
            design.n(),
            design.k(),
            cfg.n,
            cfg.k
        )));
    }
    let dir = output_dir(out, &cfg)?;
    let seed = cfg.seed ^ EVALUATE_SALT;
    let mut results = Vec::new();
    for name in objectives {
        let kind = parse_objective_name(name)?;
        let objective = cfg.objective(kind, cfg.final_b)?;
        let est = objective.evaluate(&design, seed)?;
        let name = objective_name(kind);
        let reference = cfg.references.get(&name).copied();
        let eff = reference.map(|r| efficiency(est.mean, r, kind.efficiency_scale(cfg.utility), cfg.target_dim()));
        println!(
            "{name}: {} (se {}){}",
            est.mean,
            est.std_error,
            eff.map_or(String::new(), |e| format!(", efficiency {:.1}%", 100.0 * e))
        );
        results.push(json!({
            "objective": name,
            "mean": number(est.mean),
            "std_error": number(est.std_error),
            "b": est.b,
            "n_failures": est.n_failures,
            "reference": reference.map(number),
            "efficiency": eff.map(number),
        }));
    }
    let uts = unique_treatments(&design, TREATMENT_TOL);
    let evaluation = json!({
        "design": design_path.display().to_string(),
        "n": design.n(),
        "k": design.k(),
        "q": uts.q(),
        "d": uts.d(),
        "results": results,
        "config": cfg,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("evaluation.json"), &evaluation)
}

pub fn repro(
    target: ReproTarget,
    scale: ScaleArg,
    out: &Path,
    lhd: Option<PathBuf>,
    seed: u64,
) -> Result<(), CliError> {
    let scale = match scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Full => Scale::Full,
    };
    fs::create_dir_all(out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    let (name, table) = match target {
        ReproTarget::Simstudy => {
            let settings = SimstudySettings::new(scale, seed);
            let result = repro::simstudy(&settings)?;
            write(&out.join("simstudy.csv"), &result.to_csv_string())?;
            write_json(
                &out.join("simstudy.json"),
                &json!({ "settings": settings, "result": result, "version": env!("CARGO_PKG_VERSION") }),
            )?;
            print!("{}", result.to_csv_string());
            return Ok(());
        }
        ReproTarget::Table1 => {
            let settings = Table1Settings::new(scale, seed);
            let table = repro::table1(scale, &settings)?;
            ("table1", (table, serde_json::to_value(settings)))
        }
        ReproTarget::Table2 => {
            let path = lhd.ok_or_else(|| CliError::Input("table2 needs --lhd with a 16 x 3 design".into()))?;
            let lhd = Design::read_csv(&path)?;
            let settings = Table2Settings::new(scale, seed);
            let table = repro::table2(scale, &lhd, &settings)?;
            ("table2", (table, serde_json::to_value(settings)))
        }
        ReproTarget::Table3 => {
            let settings = Table3Settings::new(scale, seed);
            let table = repro::table3(scale, &settings)?;
            ("table3", (table, serde_json::to_value(settings)))
        }
    };
    let (table, settings) = table;
    let settings = settings.map_err(|e| CliError::Numerical(e.to_string()))?;
    write(&out.join(format!("{name}.md")), &table.to_markdown())?;
    write(&out.join(format!("{name}.csv")), &table.to_csv_string()?)?;
    write_json(
        &out.join(format!("{name}.json")),
        &json!({ "settings": settings, "table": table, "version": env!("CARGO_PKG_VERSION") }),
    )?;
    for (design_name, design) in &table.designs {
        design.write_csv(out.join(format!("{name}_{design_name}.csv")))?;
    }
    print!("{}", table.to_markdown());
    Ok(())
}
