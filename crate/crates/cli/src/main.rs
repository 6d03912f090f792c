use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use eigenpinn_cli::commands::{self, ExportSource};
use eigenpinn_cli::config::{RunConfig, RESOLVED_CONFIG};

#[derive(Parser)]
#[command(
    name = "eigenpinn",
    version,
    about = "Eigenvalues from neural-network loss curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train across the energy grid, detect minima and refine them.
    Scan(RunArgs),
    /// Re-run detection and refinement on an existing loss curve.
    Refine(RunArgs),
    /// Reference spectrum and upper-bound curve for the configured problem.
    Oracle(RunArgs),
    /// Sample a trained eigenfunction on a regular lattice.
    ExportEigenfunction {
        #[command(flatten)]
        run: RunArgs,
        /// 1-based index into eigenvalues.json.
        #[arg(
            long,
            conflicts_with = "snapshot",
            required_unless_present = "snapshot"
        )]
        estimate: Option<usize>,
        /// Snapshot file to export instead of an estimate.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Compare estimates in an output directory with its oracle spectrum.
    Validate {
        /// Output directory holding eigenvalues.json and oracle_spectrum.json.
        #[arg(long)]
        out: PathBuf,
        /// Extra absolute tolerance added to each estimate's resolution.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
}

fn resolve(args: &RunArgs, reuse_existing: bool) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    if reuse_existing && args.config.is_none() {
        let saved = out.join(RESOLVED_CONFIG);
        if saved.exists() {
            cfg = RunConfig::load(&saved)?;
        }
    }
    Ok((cfg, out))
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Scan(args) => {
            let (cfg, out) = resolve(&args, false)?;
            let file = commands::scan(&cfg, &out, log)?;
            println!(
                "{} estimate(s) written to {}",
                file.estimates.len(),
                out.display()
            );
        }
        Command::Refine(args) => {
            let (cfg, out) = resolve(&args, true)?;
            let file = commands::refine(&cfg, &out, log)?;
            println!(
                "{} estimate(s) written to {}",
                file.estimates.len(),
                out.display()
            );
        }
        Command::Oracle(args) => {
            let (cfg, out) = resolve(&args, true)?;
            let file = commands::oracle(&cfg, &out)?;
            for e in &file.eigenvalues {
                println!("{e:.10}");
            }
        }
        Command::ExportEigenfunction {
            run,
            estimate,
            snapshot,
        } => {
            let (cfg, out) = resolve(&run, true)?;
            let (source, k) = match (estimate, snapshot) {
                (Some(i), _) => (ExportSource::Estimate(i), i),
                (None, Some(p)) => (ExportSource::Snapshot(p), 0),
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let meta = commands::export_eigenfunction(&cfg, &out, &source, k)
                .with_context(|| format!("exporting into {}", out.display()))?;
            println!(
                "eigenfunction_{k}.csv written ({}^{} nodes, L2 norm {:.6})",
                meta.nodes_per_axis,
                cfg.domain.dim(),
                meta.l2_norm
            );
        }
        Command::Validate { out, tolerance } => {
            let rows = commands::validate(&out, tolerance)?;
            let mut ok = true;
            for r in &rows {
                println!(
                    "{:<5} {:<12} {}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.label,
                    r.detail
                );
                ok &= r.pass;
            }
            if rows.is_empty() {
                println!("nothing to validate");
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
