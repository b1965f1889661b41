use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Multi-example smoothing of per-patch token scores.
#[derive(Debug, Parser)]
#[command(name = "patchpool", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank support items for each query by feature similarity.
    Retrieve(RetrieveArgs),
    /// Build prompt pools from retrievals and exported score tensors.
    Pool(PoolArgs),
    /// Smooth a query score grid against its prompt pool.
    Smooth(SmoothArgs),
    /// Argmax-decode a score grid into a token grid.
    Decode(DecodeArgs),
    /// Score predicted token grids against ground truth.
    Eval(EvalArgs),
    /// Run the bias experiment on synthetic worlds.
    SynthRun(SynthArgs),
    /// Time each pipeline stage for several pool sizes.
    Bench(BenchArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

/// Smoothing overrides shared by several subcommands.
#[derive(Debug, Args, Default)]
pub struct SmoothingFlags {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// js or kl
    #[arg(long)]
    pub divergence: Option<String>,
    /// score, feature or patch
    #[arg(long)]
    pub key: Option<String>,
    /// weighted, average or nearest
    #[arg(long)]
    pub aggregation: Option<String>,
    /// patch or all
    #[arg(long)]
    pub scope: Option<String>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Support feature tensor.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Query feature tensor.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    /// JSON object mapping query id to relevant support ids; adds Recall@k.
    #[arg(long)]
    pub relevant: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub recall_k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Retrieval JSON written by `retrieve`.
    #[arg(long)]
    pub retrieved: PathBuf,
    #[arg(long)]
    pub scores_dir: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub codebook: Option<usize>,
    /// q, seq, self or rand
    #[arg(long)]
    pub mode: Option<String>,
    /// Seed for the rand mode.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pool: PathBuf,
    /// Score grid of the query prompt.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-patch neighbors and weights as JSON.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[command(flatten)]
    pub smoothing: SmoothingFlags,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predicted token grid, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth token grid, or a directory of `<id>.pncl` grids.
    #[arg(long)]
    pub gt: PathBuf,
    /// File-name suffix of predictions in a directory.
    #[arg(long, default_value = ".pncl")]
    pub pred_suffix: String,
    /// accuracy, miou or mse
    #[arg(long, default_value = "accuracy")]
    pub metric: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the 100 seeds shipped with the library instead of `--seed`.
    #[arg(long)]
    pub fixed_seeds: bool,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub codebook: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    /// beta_truth,beta_pair,epsilon_noise
    #[arg(long)]
    pub bias: Option<String>,
    /// Pool sizes to compare, comma separated.
    #[arg(long)]
    pub m: Option<String>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub smoothing: SmoothingFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pool sizes, comma separated.
    #[arg(long, default_value = "1,2,4,8")]
    pub m: String,
    /// Repetitions per pool size; the fastest is kept.
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub smoothing: SmoothingFlags,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<patchpool_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Pool(a) => commands::pool(a),
        Command::Smooth(a) => commands::smooth(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::SynthRun(a) => commands::synth_run(a),
        Command::Bench(a) => commands::bench(a),
        Command::Run(a) => commands::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
