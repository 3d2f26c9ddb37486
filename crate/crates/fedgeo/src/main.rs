//! Command-line entry point. Subcommands map one-to-one onto the
//! [`fedgeo::experiment`] commands; see that module for the output layout.
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedgeo::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(
    name = "fedgeo",
    version,
    about = "Deterministic federated-learning simulator for next-location prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset cache plus audit tables
    Synth(CommonArgs),
    /// Build the dataset cache from PLT trajectory directories
    Ingest(CommonArgs),
    /// Run the configured federation once per seed and summarize
    Run(CommonArgs),
    /// Run the eight-variant mechanism grid and tabulate best accuracies
    Ablate(CommonArgs),
    /// Run the cartesian sweep over fraction, local epochs, and q
    Sweep(CommonArgs),
    /// Rebuild summary tables from round logs already on disk
    Report(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides [output].dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list (overrides [output].seeds)
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Validate the config and print the plan without writing anything
    #[arg(long)]
    dry_run: bool,
    /// Replace existing outputs instead of refusing to overwrite
    #[arg(long)]
    force: bool,
}

fn report_ignoring_force(
    cfg: &experiment::ExperimentConfig,
    dry_run: bool,
    _force: bool,
) -> Result<(), ExperimentError> {
    experiment::cmd_report(cfg, dry_run)
}

fn dispatch(command: Command) -> Result<(), ExperimentError> {
    let (args, run): (&CommonArgs, fn(&_, bool, bool) -> _) = match &command {
        Command::Synth(a) => (a, experiment::cmd_synth as _),
        Command::Ingest(a) => (a, experiment::cmd_ingest as _),
        Command::Run(a) => (a, experiment::cmd_run as _),
        Command::Ablate(a) => (a, experiment::cmd_ablate as _),
        Command::Sweep(a) => (a, experiment::cmd_sweep as _),
        Command::Report(a) => (a, report_ignoring_force as _),
    };
    let mut cfg = experiment::load_config(args.config.as_deref())?;
    cfg.apply_overrides(args.out.clone(), args.seeds.clone());
    run(&cfg, args.dry_run, args.force)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
