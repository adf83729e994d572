//! `metamorph`: command-line front end for metamorphic image registration.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metamorph_core::{Error, MomentumUpdate, RegistrationConfig};

#[derive(Parser, Debug)]
#[command(name = "metamorph", version, about = "Metamorphic image registration with residual networks")]
pub struct Cli {
    /// Seed for every random draw (initialization, shuffling, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for dataset training.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic "C" dataset with its cut-C target.
    Synth(SynthArgs),
    /// Register one source image onto a target by per-pair optimization.
    Register(RegisterArgs),
    /// Learn one model aligning a whole dataset onto a target.
    Train(TrainArgs),
    /// Register an image with a trained model.
    Infer(InferArgs),
    /// Compute metrics for an existing registration output.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of deformed images.
    #[arg(long)]
    pub n: usize,
    /// Image side in pixels (at least 64).
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    /// Control-point spacing of the elastic deformation, in pixels.
    #[arg(long, default_value_t = 20)]
    pub spacing: usize,
    /// Largest control-point displacement, in pixels.
    #[arg(long, default_value_t = 8.0)]
    pub max_displacement: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model and energy settings shared by `register` and `train`.
#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Weight of the intensity channel (0 gives pure LDDMM).
    #[arg(long, allow_negative_numbers = true)]
    pub mu: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lambda: f64,
    /// Number of time steps.
    #[arg(long = "T", default_value_t = 20)]
    pub steps: usize,
    /// Kernel width in pixels [default: 3 at width 200, scaled with width].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Hidden channels of each convolution block.
    #[arg(long, default_value_t = 4)]
    pub hidden: usize,
    /// Momentum update: `resnet` (learned) or `pde` (explicit transport).
    #[arg(long, default_value = "resnet")]
    pub mode: MomentumUpdate,
}

impl ModelArgs {
    fn apply(&self, config: &mut RegistrationConfig) {
        config.mu = self.mu;
        config.lambda = self.lambda;
        config.steps = self.steps;
        config.sigma = self.sigma;
        config.learning_rate = self.lr;
        config.hidden_channels = self.hidden;
        config.mode = self.mode;
    }
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Mask restricting intensity changes (white = allowed).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    /// Also save every step's image, momentum and velocity.
    #[arg(long)]
    pub record: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (file or directory).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Directory of masks named like the dataset images.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Visit samples in file order instead of shuffling each epoch.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Continue from the optimizer state stored in the checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Target for metrics [default: the training target recorded in the checkpoint].
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub record: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Registered image.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Unregistered source, for the initial SSD and the reduction.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "ref_mask")]
    pub pred_mask: Option<PathBuf>,
    #[arg(long, requires = "pred_mask")]
    pub ref_mask: Option<PathBuf>,
    /// Directory for `metrics.txt` [default: print to stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for each error category; usage errors exit with 2.
pub fn exit_code(category: &str) -> u8 {
    match category {
        "shape" => 3,
        "config" => 4,
        "contract" => 5,
        "diverged" => 6,
        "io" => 7,
        "format" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err.downcast_ref::<Error>().map_or("internal", Error::category);
            eprintln!("error[{category}]: {err}");
            ExitCode::from(exit_code(category))
        }
    }
}
