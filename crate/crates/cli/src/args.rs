use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "osr", version, about = "Toy one-step diffusion super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset of HQ/LQ pairs with noun masks.
    GenData(GenDataArgs),
    /// Train the VAE and the base U-Net from scratch.
    Pretrain(PretrainArgs),
    /// Run stage 1 (adapters + LQ modulation) or stage 2 (cross-attention adapters).
    Train(TrainArgs),
    /// Restore LQ PNG images.
    Infer(InferArgs),
    /// Per-sample metrics of a dataset as CSV.
    Eval(EvalArgs),
    /// Mean metrics for a list of restoration timesteps.
    SweepTimestep(SweepArgs),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// HQ image side.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 4)]
    pub downscale: usize,
    #[arg(long, default_value_t = 0.03)]
    pub noise_sigma: f64,
    /// Block size of the LQ value quantisation.
    #[arg(long, default_value_t = 4)]
    pub quant_block: usize,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory receiving `model.safetensors`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub vae_width: usize,
    #[arg(long, default_value_t = 64)]
    pub unet_width: usize,
    #[arg(long, default_value_t = 128)]
    pub time_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub lqfm_hidden: usize,
    #[arg(long, default_value_t = 1500)]
    pub vae_steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub vae_lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub base_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to start from: a pretrained model for stage 1, a stage-1 model for
    /// stage 2. A checkpoint of the same stage is resumed.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Steps to run in this invocation.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stage-1 discriminator learning rate.
    #[arg(long)]
    pub disc_lr: Option<f64>,
    /// Stage-2 weight of the attention-mask loss.
    #[arg(long)]
    pub eta_pos: Option<f64>,
    #[arg(long)]
    pub t_min: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Stage 2 without the attention-mask loss.
    #[arg(long)]
    pub no_tmg: bool,
    /// Standard Gaussian latent noise instead of gradient-weighted noise.
    #[arg(long)]
    pub no_rgpa: bool,
    /// Disable LQ feature modulation.
    #[arg(long)]
    pub no_lqfm: bool,
    /// Defaults to the seed stored in a resumed checkpoint, else the stage default.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// LQ PNG images.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Directory for restored PNGs, named after the inputs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub timestep: usize,
    /// Nouns to condition on, e.g. "red circle and grid".
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The trained model at `--timestep`.
    Model,
    /// Bicubic upsampling of the LQ image.
    Bicubic,
    /// The HQ reference itself.
    Hq,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EvalArgs {
    /// Required for `--method model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Model)]
    pub method: Method,
    #[arg(long, default_value_t = 100)]
    pub timestep: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200,400")]
    pub timesteps: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
