mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Citation intent classification with structural scaffolds.
#[derive(Parser)]
#[command(name = "citescaffold", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaffoldTask {
    Worthiness,
    Section,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckScope {
    Ops,
    Layers,
    Model,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridModeArg {
    Full,
    AxisAligned,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; trailing `--section.key value` pairs override the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a labeled JSONL file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report_dir: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Predict intents for a JSONL file of citation contexts.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write attention heatmaps (JSON + SVG) into this directory.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Build auxiliary datasets from a sentence corpus.
    GenScaffolds {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        task: ScaffoldTask,
        #[arg(long, default_value_t = 13370)]
        seed: u64,
        /// Truncate the larger worthiness class to the size of the smaller.
        #[arg(long)]
        balance: bool,
    },
    /// Aggregate crowd annotations into labeled instances.
    Aggregate {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: CheckScope,
        #[arg(long, default_value_t = 13370)]
        seed: u64,
    },
    /// Grid search over the auxiliary loss weights.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 0.3)]
        max: f64,
        #[arg(long, value_enum, default_value = "full")]
        mode: GridModeArg,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Evaluate {
            checkpoint,
            test,
            report_dir,
            sidecar,
        } => commands::evaluate(&checkpoint, &test, &report_dir, sidecar.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            out,
            attention,
            sidecar,
        } => commands::predict(&checkpoint, &input, &out, attention.as_deref(), sidecar.as_deref()),
        Command::GenScaffolds {
            corpus,
            out_dir,
            task,
            seed,
            balance,
        } => commands::gen_scaffolds(&corpus, &out_dir, task, seed, balance),
        Command::Aggregate {
            annotations,
            gold,
            out,
        } => commands::aggregate(&annotations, &gold, &out),
        Command::Gradcheck { scope, seed } => commands::gradcheck(scope, seed),
        Command::Grid {
            config,
            step,
            max,
            mode,
            overrides,
        } => commands::grid(&config, step, max, mode, &overrides),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
