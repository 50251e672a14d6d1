//! `iat`: enhance images, synthesize paired data, train, evaluate and
//! inspect models.

mod commands;
mod error;
mod pairs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use iat_core::isp::Profile;
use iat_core::training::LossKind;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "iat", version, about = "Illumination-adaptive image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enhance one image or every image in a directory.
    Enhance(EnhanceArgs),
    /// Build degraded/clean training pairs from clean images.
    Synthesize(SynthesizeArgs),
    /// Train a model on a directory of pairs.
    Train(TrainArgs),
    /// Score a checkpoint on a directory of pairs.
    Eval(EvalArgs),
    /// Print parameter counts and estimated FLOPs.
    Info(InfoArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Skip the global branch and write `I⊙M + A`.
    #[arg(long)]
    pub local_only: bool,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["clean", "procedural"])))]
pub struct SynthesizeArgs {
    /// Directory of clean images.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Use generated clean scenes of this size (HxW) instead of a directory.
    #[arg(long, value_parser = parse_resolution)]
    pub procedural: Option<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "low_light")]
    pub profile: Profile,
    /// Number of samples; defaults to one per clean image.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the sampled noise level for every sample.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of input_*/target_* pairs (raw_*.pfm optional).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation pairs; the training pairs are scored when absent.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where the best checkpoint is written.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub lambda_raw: Option<f64>,
    #[arg(long)]
    pub w_percep: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Parameter-name prefix to keep fixed (repeatable).
    #[arg(long)]
    pub freeze: Vec<String>,
    #[arg(long)]
    pub no_hflip: bool,
    #[arg(long)]
    pub no_vflip: bool,
    /// Prepare batches on a background thread.
    #[arg(long)]
    pub prefetch: bool,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Print only the final summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of input_*/target_* pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub local_only: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "config"])))]
pub struct InfoArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON training config (its `model` field is used).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resolution for the FLOP estimate, HxW.
    #[arg(long, default_value = "400x600", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config (its `model` and `seed` fields are used).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("resolution must be nonzero".into());
    }
    Ok((h, w))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Enhance(a) => commands::enhance::run(&a),
        Command::Synthesize(a) => commands::synthesize::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Info(a) => commands::info::run(&a),
        Command::Init(a) => commands::init::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
