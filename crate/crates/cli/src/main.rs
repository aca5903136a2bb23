mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Overrides the worker thread count.
const THREADS_ENV: &str = "HALLUCINATOR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hallucinator", version, about = "Speaker set expansion and kNN feature conversion")]
struct Cli {
    /// Seed for every random draw in the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus as FSF files with label sidecars.
    Synth(SynthArgs),
    /// Train a model on a directory of FSF files.
    Train(TrainArgs),
    /// Sample new vectors for a target set.
    Hallucinate(HallucinateArgs),
    /// Expand a target set and convert a source sequence onto it.
    Convert(ConvertArgs),
    /// Score a model, or the ground truth, on a synthetic corpus.
    Eval(EvalArgs),
    /// Train and score architecture variants on a synthetic corpus.
    Ablate(AblateArgs),
    /// Write a 2-D principal-component projection of feature files.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    held_out: usize,
    #[arg(long, default_value_t = 16)]
    phonemes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    utterances: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelSize {
    Desk,
    Paper,
}

#[derive(Debug, Args)]
struct TrainOptions {
    /// Model and optimizer preset.
    #[arg(long, value_enum, default_value = "desk")]
    size: ModelSize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Validations without improvement before stopping; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of FSF files; files marked held out are skipped.
    #[arg(long)]
    data: PathBuf,
    /// Receives best.phck, last.phck and history.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "V1")]
    variant: String,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    options: TrainOptions,
}

#[derive(Debug, Args)]
struct HallucinateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Required when `--count` is positive.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Without a checkpoint the ground-truth frames are scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 500, 1000, 2000, 5000])]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "V1,V2,V3,V4,V5,V6")]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [500, 1000, 2000, 5000])]
    counts: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    options: TrainOptions,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Feature files; each becomes one group named after its file stem.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Adds a hallucinated group per input.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() -> error::CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| error::CliError::Usage(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| error::CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> error::CliResult<()> {
    init_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => commands::synth(&a, seed),
        Command::Train(a) => commands::train(&a, seed),
        Command::Hallucinate(a) => commands::hallucinate(&a, seed),
        Command::Convert(a) => commands::convert(&a, seed),
        Command::Eval(a) => commands::eval(&a, seed),
        Command::Ablate(a) => commands::ablate(&a, seed),
        Command::Project(a) => commands::project(&a, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
