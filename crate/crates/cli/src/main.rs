//! `iclm`: train, evaluate, audit and inspect routed modular language models.
//!
//! Everything that affects results lives in the config file; flags only
//! choose paths.
//!
//! Exit codes: 0 ok, 1 other error, 2 config error, 3 missing artifact,
//! 4 audit failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iclm::config::RunConfig;
use iclm::data::jsonl::{export_jsonl, ingest_jsonl};
use iclm::data::synth::synth_generate;
use iclm::model::eval::EvalMode;
use iclm::run::{audit_run, eval_run, execute, load_run, project_run};
use iclm::Error;

/// Environment variable that overrides the config seed.
const SEED_ENV: &str = "ICLM_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "iclm",
    version,
    about = "Routed modular language models with causal audits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        /// TOML run configuration.
        #[arg(long, short)]
        config: PathBuf,
        /// Run directory to create.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Exact-match accuracy of a trained run.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// JSONL dataset; defaults to the run's own evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// combined, invariant-only, specific-only or all.
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Structural audits and diagnostics; exits 4 if any exact check fails.
    Audit {
        #[arg(long)]
        run: PathBuf,
        /// Wire the router to read a specific module's state (test fixture
        /// for the audit itself).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// 2-D projection of router embeddings as CSV and SVG.
    Project {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as JSONL.
    GenData {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Audit(_) => 4,
        _ => 1,
    }
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        }),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &PathBuf) -> Result<(RunConfig, Option<u64>), Error> {
    let mut cfg = RunConfig::load(path)?;
    let seed = seed_override()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, seed))
}

fn parse_modes(mode: &str) -> Result<Vec<EvalMode>, Error> {
    if mode == "all" {
        Ok(EvalMode::ALL.to_vec())
    } else {
        Ok(vec![mode.parse()?])
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out } => {
            let (cfg, seed) = load_config(&config)?;
            let outcome = execute(&cfg, &out, seed)?;
            let last = outcome.log.metrics.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps, final loss {last:.6}",
                outcome.log.steps()
            );
            if let Some(seq) = &outcome.sequential {
                println!(
                    "modules idle in phase B: {:?}, changed: {:?}",
                    seq.idle_in_b, seq.changed
                );
            }
            println!("run directory: {}", out.display());
        }
        Command::Eval { run, data, mode } => {
            let modes = parse_modes(&mode)?;
            let loaded = load_run(&run)?;
            let data = match data {
                Some(p) => ingest_jsonl(&p, loaded.config.data.synth.max_prompt_tokens)?,
                None => loaded.eval_data()?,
            };
            for r in eval_run(&loaded, &data, &modes)? {
                println!(
                    "{:<15} {:>6} {:.4}",
                    r.mode.as_str(),
                    r.instances,
                    r.accuracy
                );
            }
        }
        Command::Audit { run, inject_fault } => {
            let loaded = load_run(&run)?;
            let report = audit_run(&loaded, inject_fault)?;
            for c in &report.checks {
                println!(
                    "{} {} ({})",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Audit(format!(
                    "failed checks: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Project { run, data } => {
            let loaded = load_run(&run)?;
            let data = match data {
                Some(p) => ingest_jsonl(&p, loaded.config.data.synth.max_prompt_tokens)?,
                None => loaded.eval_data()?,
            };
            let p = project_run(&loaded, &data)?;
            let (between, within) = p.separation();
            println!("projected {} points, stress {:.6}, label separation {between:.4} vs spread {within:.4}", p.coords.len(), p.stress);
        }
        Command::GenData { config, out } => {
            let (cfg, _) = load_config(&config)?;
            let data = synth_generate(&cfg.synth())?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            export_jsonl(&out, &data)?;
            println!("wrote {} instances to {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
