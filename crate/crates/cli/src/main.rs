//! `scbf`: synthesize, simulate, filter, verify and plot.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 power iteration
//! did not converge (artifacts are still written), 3 a verification check
//! failed.

mod artifacts;
mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use scbf_core::systems::BenchmarkId;

use crate::artifacts::{read_metadata, SYNTH_META};
use crate::commands::Outcome;
use crate::config::{GridCounts, JobConfig};

#[derive(Parser)]
#[command(name = "scbf", version, about = "Stochastic control barrier function synthesis and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Benchmark name, e.g. di_omni or brownian_1d.
    #[arg(long, global = true)]
    system: Option<BenchmarkId>,
    /// Job config (TOML, or JSON such as an echoed metadata.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Nodes per dimension, comma separated.
    #[arg(long, global = true)]
    grid: Option<GridCounts>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads; falls back to SCBF_THREADS.
    #[arg(long, global = true, env = "SCBF_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Power-policy iteration; writes psi.fld, policy_k.fld and metadata.json.
    Synthesize,
    /// Monte Carlo safety curve under a fixed policy, the filter, or open loop.
    Simulate {
        /// Directory holding synthesized artifacts; defaults to the output directory.
        #[arg(long)]
        psi: Option<PathBuf>,
    },
    /// Filters reference inputs read from a CSV of `t, x..., u_ref...` rows.
    Filter {
        #[arg(long)]
        psi: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
    },
    /// Checks synthesized artifacts; exit code 3 when any check fails.
    Verify {
        #[arg(long)]
        psi: Option<PathBuf>,
    },
    /// Writes gnuplot data and scripts.
    ExportPlot {
        /// Directory holding psi.fld and/or curve.csv; defaults to the output directory.
        #[arg(long)]
        psi: Option<PathBuf>,
    },
}

fn resolve_config(c: &Common, artifacts: Option<&Path>) -> Result<JobConfig> {
    let mut cfg = if let Some(path) = &c.config {
        let mut cfg = JobConfig::load(path)?;
        if let Some(id) = c.system {
            cfg.system.name = id;
        }
        cfg
    } else if let Some(id) = c.system {
        JobConfig::for_system(id)
    } else if let Some(dir) = artifacts.filter(|d| d.join(SYNTH_META).exists()) {
        read_metadata(dir)?.config
    } else {
        bail!("no system selected: pass --system or --config");
    };
    if let Some(counts) = &c.grid {
        cfg.grid.counts = Some(counts.0.clone());
    }
    if let Some(h) = c.horizon {
        cfg.propagation.horizon = h;
    }
    if let Some(tol) = c.tol {
        cfg.iteration.tol = tol;
    }
    if let Some(seed) = c.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(trials) = c.trials {
        cfg.simulation.trials = trials;
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let default_dir = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Synthesize => commands::synthesize(&resolve_config(c, None)?),
        Command::Simulate { psi } => {
            let dir = psi.clone().unwrap_or(default_dir);
            commands::simulate(&resolve_config(c, Some(&dir))?, &dir)
        }
        Command::Filter { psi, queries } => {
            let dir = psi.clone().unwrap_or(default_dir);
            commands::filter(&resolve_config(c, Some(&dir))?, &dir, queries)
        }
        Command::Verify { psi } => {
            let dir = psi.clone().unwrap_or(default_dir);
            commands::verify(&resolve_config(c, Some(&dir))?, &dir)
        }
        Command::ExportPlot { psi } => {
            let src = psi.clone().unwrap_or_else(|| default_dir.clone());
            for f in plot::export_plot(&src, &default_dir)? {
                println!("wrote {}", default_dir.join(f).display());
            }
            Ok(Outcome::Success)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: power iteration did not converge; partial results written");
            ExitCode::from(2)
        }
        Ok(Outcome::ChecksFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
