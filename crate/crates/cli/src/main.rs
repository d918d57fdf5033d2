//! `stagger-lab` command line.
//!
//! Every subcommand resolves a run configuration (file, preset or defaults,
//! then flag overrides), runs it, and prints the manifest. Failures print a
//! JSON error document on stderr and exit with status 2.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stagger_lab::pipeline::config::{Command, RunConfig};
use stagger_lab::pipeline::{error_json, print_manifest, run_pipeline};
use stagger_lab::Result;

#[derive(Parser)]
#[command(name = "stagger-lab", version, about = "Event-study diagnostics, estimation and sensitivity for staggered adoption")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// TWFE implicit weights and contamination indices.
    Diagnose(Common),
    /// Group-time cells, event-time aggregates and the TWFE event study.
    Estimate(Common),
    /// Identified sets, robust intervals and the breakdown frontier.
    Sensitivity(Common),
    /// Calibrated (B, Gamma, DeltaR) from pre-period coefficients.
    Calibrate(Common),
    /// Monte Carlo cells over the violation grid.
    Simulate(Common),
    /// Placebo rejection tables and the frontier Gamma*.
    Frontier(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum GridChoice {
    /// Keep the configured grids.
    Config,
    /// The design's full violation grid.
    Paper,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulation design preset: mc81-dgp1, mc81-dgp2, mc81-dgp3, mc84, mc85.
    #[arg(long, visible_alias = "preset")]
    design: Option<String>,
    /// Long-format panel CSV (unit,time,outcome,cohort[,x1..][,exposure][,observed]).
    #[arg(long, conflicts_with = "design")]
    panel: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "STAGGER_LAB_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    grid: Option<GridChoice>,
    /// Full sample sizes and replication counts.
    #[arg(long)]
    paper_scale: bool,
    /// Monte Carlo replications per cell (simulation and frontier).
    #[arg(long)]
    replications: Option<usize>,
}

fn resolve(command: Command, a: &Common) -> Result<RunConfig> {
    let mut c = match (&a.config, &a.design) {
        (Some(path), design) => {
            let mut c = RunConfig::load(path)?;
            if let Some(name) = design {
                c.dgp = RunConfig::preset(name)?.dgp;
                c.panel = None;
            }
            c
        }
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    c.command = command;
    if let Some(p) = &a.panel {
        c.panel = Some(p.clone());
        c.dgp = None;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(t) = a.threads {
        c.threads = t;
    }
    if let Some(o) = &a.out {
        c.out = o.clone();
    }
    if matches!(a.grid, Some(GridChoice::Paper)) {
        c = c.with_full_grid();
    }
    if a.paper_scale {
        c = c.with_full_scale();
    }
    if let Some(r) = a.replications {
        c.montecarlo.replications = r;
        c.frontier.replications = r;
    }
    Ok(c)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Sub::Diagnose(a) => (Command::Diagnose, a),
        Sub::Estimate(a) => (Command::Estimate, a),
        Sub::Sensitivity(a) => (Command::Sensitivity, a),
        Sub::Calibrate(a) => (Command::Calibrate, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Frontier(a) => (Command::Frontier, a),
    };
    match resolve(command, args).and_then(|c| run_pipeline(&c)) {
        Ok(m) => {
            let _ = print_manifest(std::io::stdout().lock(), &m);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(2)
        }
    }
}
