use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "motdrive", version, about = "Toy-world driving model: data, training, evaluation, inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy-world dataset (scenarios.jsonl, PGM frames, manifest).
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write metrics.json.
    Eval(EvalArgs),
    /// Plan (and optionally imagine future frames) for one scenario.
    Infer(InferArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenDataArgs {
    /// World config JSON; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub stage: u8,
    /// JSON with optional `training` (stage config) and `model` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to start from; required for stages 2-4.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `training.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load a checkpoint even if its config differs from `model`.
    #[arg(long)]
    pub force: bool,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the generation expert.
    #[arg(long)]
    pub no_gen: bool,
    /// Skip QA and chain-of-thought decoding.
    #[arg(long)]
    pub no_text: bool,
    /// Plan with the plain planning prompt instead of the scenario command.
    #[arg(long)]
    pub no_command: bool,
    /// Evaluate only the first N scenarios.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accept a checkpoint trained on a different world config.
    #[arg(long)]
    pub force: bool,
}

#[derive(clap::Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenario id inside --data, or a path to a scenario JSON record.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// World config for a scenario given as a file.
    #[arg(long)]
    pub world_config: Option<PathBuf>,
    /// Free-text instruction, e.g. "turn left".
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_gen: bool,
    #[arg(long)]
    pub force: bool,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MOTDRIVE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("MOTDRIVE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let res = init_threads().and_then(|_| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
