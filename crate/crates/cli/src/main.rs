//! `ror`: inspect architectures, train staged pipelines, evaluate
//! checkpoints, compute aging curves and plot results.

mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, SystemTime};

use clap::{Parser, Subcommand, ValueEnum};
use ror_core::data::LabelField;

use manifest::{artifacts, hash_file, RunManifest, RUN_MANIFEST};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Failure while doing the work (exit 2).
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Field {
    Age,
    Gender,
}

#[derive(Debug, Parser)]
#[command(name = "ror", version, about = "Residual networks of residual networks for age and gender groups")]
struct Cli {
    /// Seed for every randomized step; overrides a config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ror-out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "single")]
    precision: Precision,
    /// Worker threads for parallel curve runs (all cores by default).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a spec and write its graph (JSON, DOT), depth, parameter count and shortcut census.
    Inspect { spec: PathBuf },
    /// Run the stages of a training config.
    Train { config: PathBuf },
    /// Evaluate checkpoints on a manifest, optionally per subject-exclusive fold.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "age")]
        field: Field,
        /// Class count of the label space (8 for age, 2 for gender by default).
        #[arg(long)]
        classes: Option<usize>,
        /// Evaluate on each of N subject-exclusive folds.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train the K-1 "older than group k" classifiers and suggest loss weights.
    Curve { config: PathBuf },
    /// Render training logs (validation error) or curve CSVs to SVG.
    Plot {
        files: Vec<PathBuf>,
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long, default_value = "plot.svg")]
        name: String,
    },
    /// Write a synthetic dataset as a manifest plus PNG images.
    Synth {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Thresholds k whose classes k and k+1 overlap, e.g. 4,5,6.
        #[arg(long, value_delimiter = ',')]
        overlap: Vec<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Inspect { .. } => "inspect",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Curve { .. } => "curve",
            Command::Plot { .. } => "plot",
            Command::Synth { .. } => "synth",
        }
    }
}

pub struct Context {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub precision: Precision,
    pub threads: Option<usize>,
    pub inputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
}

fn dispatch(ctx: &mut Context, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Inspect { spec } => commands::inspect(ctx, spec),
        Command::Train { config } => commands::train(ctx, config),
        Command::Eval {
            checkpoints,
            manifest,
            field,
            classes,
            folds,
        } => commands::eval(
            ctx,
            commands::EvalArgs {
                checkpoints,
                manifest,
                field: match field {
                    Field::Age => LabelField::Age,
                    Field::Gender => LabelField::Gender,
                },
                classes: *classes,
                folds: *folds,
            },
        ),
        Command::Curve { config } => commands::curve(ctx, config),
        Command::Plot { files, labels, name } => commands::plot(ctx, files, labels, name),
        Command::Synth {
            classes,
            per_class,
            size,
            overlap,
            noise,
        } => commands::synth(
            ctx,
            commands::SynthArgs {
                classes: *classes,
                per_class: *per_class,
                size: *size,
                overlap: overlap.clone(),
                noise: *noise,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = ["warn", "info", "debug"][usize::from(cli.verbose).min(2)];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    // filesystem timestamps can trail the wall clock slightly
    let start = SystemTime::now() - Duration::from_secs(1);
    if let Err(e) = fs::create_dir_all(&cli.out) {
        eprintln!("error: {}: {e}", cli.out.display());
        return ExitCode::from(2);
    }
    let mut ctx = Context {
        out: cli.out.clone(),
        seed: cli.seed,
        precision: cli.precision,
        threads: cli.threads,
        inputs: Vec::new(),
        seeds: BTreeMap::new(),
    };
    let result = dispatch(&mut ctx, &cli.command);
    let run = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().into(),
        argv: std::env::args().collect(),
        precision: format!("{:?}", cli.precision).to_lowercase(),
        threads: cli.threads,
        seeds: ctx.seeds.clone(),
        inputs: ctx.inputs.iter().filter_map(|p| hash_file(p)).collect(),
        artifacts: artifacts(&ctx.out, start),
        status: if result.is_ok() { "ok" } else { "failed" }.into(),
        error: result.as_ref().err().map(ToString::to_string),
    };
    let written = serde_json::to_string_pretty(&run)
        .map_err(|e| e.to_string())
        .and_then(|t| fs::write(ctx.out.join(RUN_MANIFEST), t + "\n").map_err(|e| e.to_string()));
    match (result, written) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Ok(()), Err(e)) => {
            eprintln!("error: writing run manifest: {e}");
            ExitCode::from(2)
        }
        (Err(e), _) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
