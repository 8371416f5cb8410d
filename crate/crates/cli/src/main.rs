mod commands;
mod config;
mod exit;

use std::path::PathBuf;

use acacr::data::Split;
use acacr::network::BlockVariant;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "acacr", version, about = "Cloud removal with attentive contextual attention")]
pub struct Cli {
    /// Worker threads for per-sample gradients (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Compute in f64 instead of f32.
    #[arg(long, global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic cloudy/clear dataset.
    GenerateData(GenerateArgs),
    /// Train one network variant.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Restore a single image.
    Infer(InferArgs),
    /// Train and score the base, ca and ac variants under identical seeds.
    Compare(CompareArgs),
    /// Export similarity rows, top patches and heatmaps for one query.
    InspectAttention(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Total sample count, split 2:1 into train and test.
    #[arg(long, default_value_t = 12)]
    pub count: usize,
    /// Height and width.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub bands: usize,
    #[arg(long, default_value_t = 0.4)]
    pub coverage: f64,
    #[arg(long, default_value_t = 0.5)]
    pub softness: f64,
    #[arg(long, default_value_t = acacr::data::DEFAULT_CLOUD_COLOR)]
    pub color: f64,
    /// Skip the PNG previews.
    #[arg(long)]
    pub no_previews: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory; overrides `data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<BlockVariant>,
    /// Continue from a checkpoint instead of a fresh network.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Defaults to `eval-<split>` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `.tnsr` or `.png` image.
    #[arg(long)]
    pub input: PathBuf,
    /// Output path; the `.tnsr` result and a `.png` preview for 3-band
    /// images are written beside it with those extensions.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Query position as fractions of height and width, e.g. `0.3,0.6`.
    #[arg(long, default_value = "0.3,0.6")]
    pub query: String,
    /// Fraction of patches listed as top matches.
    #[arg(long, default_value_t = 0.05)]
    pub top: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel size of one patch in the heatmaps.
    #[arg(long, default_value_t = 16)]
    pub cell: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let code = match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code as i32
        }
    };
    std::process::exit(code);
}
