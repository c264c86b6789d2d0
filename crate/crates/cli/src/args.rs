use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Reference-based sketch extraction with mixed self-attention.
///
/// Parameters resolve in order: built-in defaults, the config file, then
/// command-line flags. Environment: MIXSA_CONFIG (config file),
/// MIXSA_BACKEND (backend id), MIXSA_WEIGHTS (checkpoint path or hub id used
/// by `--backend sd14`).
#[derive(Debug, Parser)]
#[command(name = "mixsa", version, about, long_about)]
pub struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true, env = "MIXSA_CONFIG")]
    pub config: Option<PathBuf>,

    /// Backend id: mock, mock-zero, mock-identity, mock-linear, sd14[:weights].
    #[arg(long, global = true, env = "MIXSA_BACKEND")]
    pub backend: Option<String>,

    /// Checkpoint path or hub id for the sd14 backend.
    #[arg(long, global = true, env = "MIXSA_WEIGHTS")]
    pub weights: Option<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract one sketch.
    Extract(ExtractArgs),
    /// Render a zeta × beta grid over shared attention banks.
    Grid(GridArgs),
    /// Run a manifest and write a metrics report.
    Eval(EvalArgs),
    /// Print the colour-averaging diagnostics.
    Diagnose(DiagnoseArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Colour image to sketch.
    #[arg(long)]
    pub color: PathBuf,
    /// Reference sketch whose style is borrowed.
    #[arg(long)]
    pub reference: PathBuf,
}

#[derive(Debug, Args, Default, Clone)]
pub struct MixFlags {
    /// Weight of the colour/contour query blend against the reference query.
    #[arg(long, visible_alias = "style-strength")]
    pub zeta: Option<f64>,
    /// Weight of the colour-image query against the contour query.
    #[arg(long, visible_alias = "texture")]
    pub beta: Option<f64>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct JobFlags {
    /// Stroke sparsity threshold for contour detection, in (0,1).
    #[arg(long, visible_alias = "sparse-threshold")]
    pub alpha: Option<f64>,
    /// Contour detector: canny or a configured adapter such as teed or hed.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated self-attention site indices that receive the mixture.
    #[arg(long)]
    pub target_sites: Option<String>,
    /// DDIM steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    /// Square working resolution.
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip post-processing.
    #[arg(long)]
    pub no_rcd: bool,
    /// Pixels above this become white.
    #[arg(long)]
    pub binarize_threshold: Option<u8>,
    /// `off` or `spatial,range` sigmas.
    #[arg(long)]
    pub bilateral: Option<String>,
    /// `off`, `on` or a stretch strength in [0,1].
    #[arg(long)]
    pub contrast: Option<String>,
    /// Invert the colour image directly instead of an edge map.
    #[arg(long)]
    pub no_initial: bool,
    /// Sample without mixed attention.
    #[arg(long)]
    pub no_msa: bool,
    /// Use only the contour query (beta forced to 0).
    #[arg(long)]
    pub no_dct: bool,
    /// Saliency adapter name for foreground isolation.
    #[arg(long)]
    pub foreground: Option<String>,
    /// Threshold the foreground mask at 0.5.
    #[arg(long)]
    pub hard_mask: bool,
    /// Fail instead of falling back when an adapter is missing.
    #[arg(long)]
    pub strict: bool,
    /// Bank every attention site, not just the targets.
    #[arg(long)]
    pub bank_all_sites: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub mix: MixFlags,
    #[command(flatten)]
    pub job: JobFlags,
    /// Results root; each run lands in a directory named by its descriptor hash.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also copy the sketch to this path.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub job: JobFlags,
    /// Comma-separated zeta values (rows).
    #[arg(long, visible_alias = "style-strength")]
    pub zeta: String,
    /// Comma-separated beta values (columns).
    #[arg(long, visible_alias = "texture")]
    pub beta: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV rows of `color,reference[,ground_truth]`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated subset of psnr,ssim,lpips,fid,kid.
    #[arg(long, default_value = "psnr,ssim")]
    pub metrics: String,
    /// Feature extractor for lpips/fid/kid; `mock` is built in.
    #[arg(long)]
    pub extractor: Option<String>,
    #[command(flatten)]
    pub mix: MixFlags,
    #[command(flatten)]
    pub job: JobFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Averaging steps for the mean-drift table.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Side of the synthetic test images.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    /// Comma-separated timesteps for the band table.
    #[arg(long, default_value = "1,20,100,250,500,750,1000")]
    pub timesteps: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Also persist results under this root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub mix: MixFlags,
    #[command(flatten)]
    pub job: JobFlags,
}
