use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lattice_homog::harness::{
    run_effective, run_measures, run_solve, run_sweep, run_verify, sweep_output, ExperimentConfig, RunOutput,
};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

/// Homogenization experiments on thin periodic layer lattices in the unit cube.
#[derive(Parser)]
#[command(name = "lattice-homog", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact and Monte Carlo volumes of the layer regions.
    Measures(Common),
    /// Effective conductivity tensor and isotropy flag.
    Effective(Common),
    /// Fine-scale solve at one sweep point with a nodal dump.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Lattice index; the first entry of the sweep by default.
        #[arg(long)]
        n: Option<u32>,
    },
    /// Convergence sweep against the homogenized solution.
    Sweep(Common),
    /// Inequality suite for the slice-average, trace and capacitary operators.
    VerifyOps(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool> {
    let start = Instant::now();
    let (output, out): (RunOutput, PathBuf) = match cli.command {
        Command::Measures(c) => {
            let (cfg, out) = load(&c)?;
            (run_measures(&cfg)?, out)
        }
        Command::Effective(c) => {
            let (cfg, out) = load(&c)?;
            (run_effective(&cfg)?, out)
        }
        Command::Solve { common, n } => {
            let (cfg, out) = load(&common)?;
            let n = n.unwrap_or(cfg.n[0]);
            (run_solve(&cfg, n)?, out)
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(&c)?;
            let outcome = run_sweep(&cfg)?;
            (sweep_output(&cfg, &outcome), out)
        }
        Command::VerifyOps(c) => {
            let (cfg, out) = load(&c)?;
            (run_verify(&cfg)?, out)
        }
    };
    output.write_to(&out).with_context(|| format!("writing to {}", out.display()))?;
    for line in &output.summary {
        println!("{line}");
    }
    for f in &output.files {
        eprintln!("wrote {}", out.join(&f.name).display());
    }
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(output.passed)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
