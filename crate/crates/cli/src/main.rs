use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sintermon::Error;
use sintermon_cli::{stages, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "sintermon", version, about = "Unsupervised laser-power anomaly detection from boresight image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every stage's outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Train the model on the nominal layers.
    Train,
    /// Score every layer with the model and the baseline.
    Score,
    /// Compute precision, recall and ROC per layer.
    Eval,
    /// Summarise the evaluation reports.
    Report,
    /// All five stages in order.
    Run,
    /// Print the resolved config.
    Config,
}

fn run(cli: &Cli) -> sintermon::Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if cli.command == Command::Config {
        println!("{}", config.to_json()?);
        return Ok(());
    }
    let mut log = |line: &str| eprintln!("{line}");
    let mut stage = Stage {
        config: &config,
        root: &cli.out,
        overwrite: cli.overwrite,
        log: &mut log,
    };
    let print_summary = |s: &sintermon_cli::Summary| print!("{}", s.table());
    match cli.command {
        Command::Gen => stages::gen(&mut stage).map(drop),
        Command::Train => stages::train(&mut stage).map(drop),
        Command::Score => stages::score(&mut stage).map(drop),
        Command::Eval => stages::eval(&mut stage).map(drop),
        Command::Report => stages::report(&mut stage).map(|s| print_summary(&s)),
        Command::Run => {
            stages::gen(&mut stage)?;
            stages::train(&mut stage)?;
            stages::score(&mut stage)?;
            stages::eval(&mut stage)?;
            stages::report(&mut stage).map(|s| print_summary(&s))
        }
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotFound(_) => 3,
        Error::OutputExists(_) => 4,
        Error::Checksum(_) | Error::Version { .. } | Error::Format(_) | Error::Json(_) | Error::Csv(_) => 5,
        _ => 1,
    }
}
