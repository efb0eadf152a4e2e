use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crhlab::config::{self, ExperimentConfig};
use crhlab::experiment::read_manifest;
use crhlab::{emit_report, phase_scan, run_experiment, verify_theorems, RunOptions, RunOutcome, RunnerError};
use crhlab_core::crhkit::PhaseId;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "crhlab", version, about = "Conjugate-matrix alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Probe interval in steps, overriding the config.
    #[arg(long, global = true)]
    snapshot_every: Option<u64>,
    /// Alignment threshold for phase labels.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Concurrent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train every grid point of a config (a file or a preset name).
    Train {
        config: String,
        /// Discard existing outputs instead of resuming.
        #[arg(long)]
        fresh: bool,
    },
    /// Summarize completed runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Check the master theorem on synthetic phase instances.
    VerifyTheorems {
        #[arg(long)]
        phase: Option<String>,
    },
    /// Reclassify every snapshot of a run.
    PhaseScan { run: PathBuf },
}

fn load(spec: &str) -> Result<ExperimentConfig, RunnerError> {
    let path = Path::new(spec);
    if !path.exists() && config::PRESETS.iter().any(|(n, _)| *n == spec) {
        return config::preset(spec);
    }
    config::load_config(path)
}

/// Expands sweep roots into the run directories below them.
fn run_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>, RunnerError> {
    let mut dirs = Vec::new();
    for root in roots {
        if read_manifest(root).is_ok() {
            dirs.push(root.clone());
            continue;
        }
        let entries = std::fs::read_dir(root).map_err(|e| RunnerError::io(root, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(crhlab::persist::MANIFEST).exists())
            .collect();
        if found.is_empty() {
            return Err(RunnerError::Usage(format!("{} holds no runs", root.display())));
        }
        found.sort();
        dirs.extend(found);
    }
    Ok(dirs)
}

fn execute(cli: Cli) -> Result<u8, RunnerError> {
    match cli.command {
        Command::Train { config, fresh } => {
            let mut c = load(&config)?;
            if let Some(o) = cli.out {
                c.output = o;
            }
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            if let Some(n) = cli.snapshot_every {
                c.probe.snapshot_every = n;
            }
            if let Some(t) = cli.tau {
                c.tau = t;
            }
            c.validate()?;
            let runs = run_experiment(&c, cli.jobs, &RunOptions { fresh, halt_after: None })?;
            let mut code = 0;
            for r in &runs {
                match &r.outcome {
                    RunOutcome::Diverged { step, message } => {
                        println!("{}: diverged at step {step} ({message})", r.dir.display());
                        code = EXIT_DIVERGED;
                    }
                    RunOutcome::AlreadyComplete => println!("{}: already complete", r.dir.display()),
                    other => println!("{}: {other:?}", r.dir.display()),
                }
            }
            Ok(code)
        }
        Command::Report { runs } => {
            let dirs = run_dirs(&runs)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("report"));
            let r = emit_report(&dirs, &out)?;
            println!("{} rows in {}", r.rows, r.summary.display());
            if let Some(s) = r.rank_spearman {
                println!("spearman(rank, HG_a) = {s:.4}");
            }
            Ok(0)
        }
        Command::VerifyTheorems { phase } => {
            let phase = match phase {
                Some(p) => Some(PhaseId::parse(&p).ok_or_else(|| RunnerError::Usage(format!("unknown phase {p:?}")))?),
                None => None,
            };
            let out = cli.out.unwrap_or_else(|| PathBuf::from("."));
            let rows = verify_theorems(phase, cli.seed, crhlab_core::linalg::DEFAULT_REL_TOL, &out)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
            for f in &failed {
                println!("FAIL {} phase {} seed {}: {} = {}", f.theorem, f.phase.name(), f.seed, f.relation, f.measured);
            }
            println!("{} checks, {} failed", rows.len(), failed.len());
            Ok(if failed.is_empty() { 0 } else { EXIT_VERIFY })
        }
        Command::PhaseScan { run } => {
            for row in phase_scan(&run, cli.tau)? {
                println!("{}", row.join(","));
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
