//! `place`: dataset generation, layout maps, training, sampling, evaluation
//! and inspection from one binary.

mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use place_core::diffusion::LayoutMode;
use place_core::fusion_attention::FusionDomain;
use place_core::synth_data::Split;

#[derive(Debug, Parser)]
#[command(name = "place", version, about = "Layout-controlled diffusion on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic split (images, maps, captions).
    GenData(GenDataArgs),
    /// Compute a layout control map and write one PGM per class.
    ComputeLcm(ComputeLcmArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Sample one image.
    Sample(SampleArgs),
    /// Sample every map of a dataset and score it with the oracle segmenter.
    Eval(EvalArgs),
    /// Dump α over time, fusion maps and the x̂0 trajectory of one sample.
    Inspect(InspectArgs),
}

/// Options shared by every run-producing command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config or a previous run.json; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed (falls back to the config, then $PLACE_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ComputeLcmArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Class-name sidecar; defaults to the map path with a .json extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Latent grid as HxW.
    #[arg(long, value_parser = parse_dims)]
    pub latent: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    /// Use the nearest-resize baseline instead of exact coverage.
    #[arg(long)]
    pub nearest: bool,
}

/// Map source for single-image commands.
#[derive(Debug, Clone, Args)]
pub struct MapSource {
    #[arg(long, conflicts_with = "dataset")]
    pub map: Option<PathBuf>,
    #[arg(long, requires = "map")]
    pub sidecar: Option<PathBuf>,
    /// Take the map from a generated dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "dataset")]
    pub index: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingFlags {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PLMS steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Clamp x̂0 to the image range between sampler steps.
    #[arg(long)]
    pub clip_x0: bool,
    /// Region-free words appended to the prompt.
    #[arg(long)]
    pub caption: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Layout-free pairs for the prior-preservation term.
    #[arg(long)]
    pub lf_dataset: Option<PathBuf>,
    /// Variant row 1-8.
    #[arg(long)]
    pub variant: Option<u8>,
    #[arg(long)]
    pub layout: Option<LayoutMode>,
    #[arg(long)]
    pub adaptive_alpha: Option<bool>,
    #[arg(long)]
    pub sa: Option<bool>,
    #[arg(long)]
    pub lfp: Option<bool>,
    #[arg(long)]
    pub lambda_sa: Option<f64>,
    #[arg(long)]
    pub lambda_lfp: Option<f64>,
    #[arg(long)]
    pub fusion_domain: Option<FusionDomain>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lf_batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub caption_dropout: Option<f64>,
    /// Print progress every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: MapSource,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Also write the per-step x̂0 strip.
    #[arg(long)]
    pub dump_x0: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Score existing NNNN.ppm images instead of sampling.
    #[arg(long, conflicts_with = "checkpoint")]
    pub samples: Option<PathBuf>,
    /// Evaluate only the first N maps.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Downsampling factors for the layout fidelity report.
    #[arg(long, value_delimiter = ',')]
    pub fidelity_factors: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: MapSource,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Dump fusion maps every N sampler steps.
    #[arg(long, default_value_t = 10)]
    pub every: usize,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Bad configuration; reported with the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
