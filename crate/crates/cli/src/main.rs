//! `god`: search for and evaluate Gibbs-optimal designs, and rerun the
//! comparison studies.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use god_core::GodError;

#[derive(Parser)]
#[command(name = "god", version, about = "Gibbs optimal design search and evaluation")]
struct Cli {
    /// Worker threads for the parallel evaluations (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximise the configured objective; writes design.csv, trace.csv and report.json.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Score a design under a comma-separated list of objectives; writes evaluation.json.
    Evaluate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        objectives: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Rerun one of the built-in comparison studies.
    Repro {
        target: ReproTarget,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long)]
        out: PathBuf,
        /// Space-filling comparison design (16 x 3) for table2.
        #[arg(long)]
        lhd: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ReproTarget {
    Table1,
    Table2,
    Table3,
    Simstudy,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Full,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    Input(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<GodError> for CliError {
    fn from(e: GodError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Optimize {
            config,
            out,
            seed_override,
        } => commands::optimize(&config, out, seed_override),
        Command::Evaluate {
            design,
            config,
            objectives,
            out,
            seed_override,
        } => commands::evaluate(&design, &config, &objectives, out, seed_override),
        Command::Repro {
            target,
            scale,
            out,
            lhd,
            seed_override,
        } => commands::repro(target, scale, &out, lhd, seed_override.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
