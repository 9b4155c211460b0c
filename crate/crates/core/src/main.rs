use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use probekit::pipeline::{self, RunConfig, RunError, RunOptions, SynthRequest};
use probekit::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_FATAL: u8 = 3;

#[derive(Parser)]
#[command(name = "probekit", version, about = "Layerwise representational probes over model checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run config and its datasets without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Run every probe over every model, checkpoint and layer.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Keep finished cells from an earlier, interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Write plot-ready tables for a finished run.
    Report {
        /// Output directory of the run.
        #[arg(long)]
        out: PathBuf,
        /// Run config; defaults to the copy stored in the run directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic data: a full project by default, or a single
    /// generator described by a JSON spec.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("probekit: {msg}");
    ExitCode::from(code)
}

fn fatal_or_invalid(e: Error) -> ExitCode {
    match e {
        Error::Io { .. } => fail(EXIT_FATAL, e),
        other => fail(EXIT_VALIDATION, other),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(fatal_or_invalid)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Validate { config, folds } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(n) = folds {
                cfg.n_folds = n;
            }
            let (report, _) = pipeline::validate(&cfg);
            println!("{report}");
            if report.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VALIDATION)
            }
        }
        Command::Run { config, out, seed, folds, jobs, resume } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let opts = RunOptions { out_dir: out, seed, n_folds: folds, jobs, resume };
            match pipeline::run(cfg, &opts) {
                Ok(outcome) => {
                    println!(
                        "{} cells ({} resumed), {} failed; outputs in {}",
                        outcome.n_cells,
                        outcome.resumed,
                        outcome.failed.len(),
                        outcome.out_dir.display()
                    );
                    for (cell, err) in &outcome.failed {
                        eprintln!(
                            "failed: {} {} step {} layer {}: {err}",
                            cell.probe_id, cell.model_id, cell.step, cell.layer_id
                        );
                    }
                    if outcome.failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_PARTIAL)
                    }
                }
                Err(RunError::Invalid(report)) => fail(EXIT_VALIDATION, format!("validation failed\n{report}")),
                Err(RunError::Fatal(e)) => fatal_or_invalid(e),
            }
        }
        Command::Report { out, config } => {
            if let Some(path) = config {
                let cfg = match load_config(&path) {
                    Ok(c) => c,
                    Err(code) => return code,
                };
                let copy = out.join(pipeline::CONFIG_COPY);
                let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
                if let Err(e) = std::fs::write(&copy, text) {
                    return fail(EXIT_FATAL, format!("{}: {e}", copy.display()));
                }
            }
            match pipeline::report(&out, None) {
                Ok(files) => {
                    for f in files {
                        println!("{}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fatal_or_invalid(e),
            }
        }
        Command::Synth { out, config, seed } => {
            let request = match config {
                None => SynthRequest::Project(pipeline::ProjectSpec::default()),
                Some(path) => match std::fs::read_to_string(&path) {
                    Ok(text) => match SynthRequest::from_json(&text) {
                        Ok(r) => r,
                        Err(e) => return fail(EXIT_VALIDATION, e),
                    },
                    Err(e) => return fail(EXIT_FATAL, format!("{}: {e}", path.display())),
                },
            };
            let result = match request {
                SynthRequest::Project(mut spec) => {
                    if let Some(s) = seed {
                        spec.seed = s;
                    }
                    pipeline::write_project(&spec, &out).map(|_| vec![pipeline::PROJECT_CONFIG.to_string()])
                }
                SynthRequest::Data(mut spec) => {
                    if let Some(s) = seed {
                        spec.seed = s;
                    }
                    spec.write(&out)
                }
            };
            match result {
                Ok(files) => {
                    for f in files {
                        println!("{}", out.join(f).display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fatal_or_invalid(e),
            }
        }
    }
}
