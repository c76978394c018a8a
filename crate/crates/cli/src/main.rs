//! `latvar` — reproducible experiment runner for latent-variable
//! estimation accuracy in Gaussian mixtures.
//!
//! Subcommands:
//! - `coeffs`: Fisher matrices and closed-form leading coefficients (JSON);
//! - `simulate`: the replication sweep (CSV, plus a `.paired.csv` sibling
//!   with per-replication Bayes−ML differences);
//! - `verify`: fitted coefficients and method-ordering verdicts against
//!   the closed forms.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 non-regular
//! model, 3 insufficient data, 4 verification ordering failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latvar::config::ExperimentConfig;
use latvar::runner;
use latvar::Error;

#[derive(Parser)]
#[command(name = "latvar", version, about = "Latent-variable estimation accuracy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute Fisher matrices and the closed-form leading coefficients.
    Coeffs(CommonArgs),
    /// Run the replication sweep and write the estimates CSV.
    ///
    /// When writing to a file, paired Bayes−ML difference rows go to a
    /// `.paired.csv` sibling; when printing to stdout only the estimate
    /// rows are emitted.
    Simulate(CommonArgs),
    /// Check a sweep's CSV against the closed forms and the predicted
    /// method ordering.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output path (JSON for coeffs/verify, CSV for simulate); falls
    /// back to the config's output block, then stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the replication pool (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Estimates CSV produced by `simulate`.
    #[arg(value_name = "CSV")]
    csv: PathBuf,
    /// Paired-differences CSV (default: the `.paired.csv` sibling of
    /// the estimates CSV, if present; verification falls back to
    /// independent fits without it).
    #[arg(long, value_name = "PATH")]
    paired: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Invalid(_) | Error::Io(_) => 1,
        Error::NonRegular(_) | Error::Boundary(_) => 2,
        Error::InsufficientData(_) => 3,
    }
}

/// Load, override, and eagerly validate the configuration so every
/// subcommand reports config problems before doing any work.
fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.build()?;
    Ok(cfg)
}

fn configure_threads(args: &CommonArgs) {
    if let Some(threads) = args.threads {
        // Ignore a second initialization; the pool can only be set once
        // per process and the first setting wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// `x.csv` → `x.paired.csv`.
fn paired_sibling(path: &Path) -> PathBuf {
    path.with_extension("paired.csv")
}

fn run() -> Result<u8, Error> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a usage
            // error, which this tool reports like a config error.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(0);
            }
            eprint!("{e}");
            return Ok(1);
        }
    };

    match cli.command {
        Command::Coeffs(args) => {
            let cfg = load_config(&args)?;
            let report = runner::cmd_coeffs(&cfg)?;
            let json = runner::to_json(&report);
            let out = args
                .out
                .or_else(|| cfg.output.coeffs_json.as_deref().map(PathBuf::from));
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => print!("{json}"),
            }
            Ok(0)
        }
        Command::Simulate(args) => {
            configure_threads(&args);
            let cfg = load_config(&args)?;
            let output = runner::cmd_simulate(&cfg)?;
            let csv = runner::estimates_csv(&output.estimates);
            let out = args
                .out
                .clone()
                .or_else(|| cfg.output.estimates_csv.as_deref().map(PathBuf::from));
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)?;
                    if !output.paired.is_empty() {
                        std::fs::write(
                            paired_sibling(&path),
                            runner::paired_csv(&output.paired),
                        )?;
                    }
                }
                None => print!("{csv}"),
            }
            Ok(0)
        }
        Command::Verify(args) => {
            configure_threads(&args.common);
            let cfg = load_config(&args.common)?;
            let estimates = runner::parse_estimates_csv(&std::fs::read_to_string(&args.csv)?)?;
            let paired_path = args
                .paired
                .clone()
                .or_else(|| {
                    let sibling = paired_sibling(&args.csv);
                    sibling.exists().then_some(sibling)
                });
            let paired = match &paired_path {
                Some(path) => Some(runner::parse_paired_csv(&std::fs::read_to_string(path)?)?),
                None => None,
            };
            let report = runner::cmd_verify(&cfg, &estimates, paired.as_deref())?;
            print!("{report}");
            if let Some(path) = &args.common.out {
                std::fs::write(path, runner::to_json(&report))?;
            }
            Ok(if report.all_ok { 0 } else { 4 })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
