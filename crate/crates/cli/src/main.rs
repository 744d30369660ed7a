//! Command-line surface of the engine.
//!
//! Every command accepts `--seed`, `--config` and `--out`; flags override
//! config-file values. Each run writes a fully resolved configuration echo
//! next to its primary output (`<out>.config.toml`), and re-running the same
//! command from that echo reproduces the outputs bit for bit.
//!
//! On failure the process exits non-zero after printing a single line of the
//! form `<error-class>: <message>` to stderr.

mod exec;
mod resolved;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ditail", version, about = "Deterministic desk-scale diffusion engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a deterministic styled shape dataset into a directory.
    Datagen(DatagenArgs),
    /// Train a model from scratch on a dataset directory.
    Train(TrainArgs),
    /// Fine-tune a base checkpoint on a built-in style.
    Finetune(FinetuneArgs),
    /// Guided generation from a seed, optionally capturing a trajectory.
    Generate(GenerateArgs),
    /// DDIM-invert an image into a trajectory.
    Invert(InvertArgs),
    /// Inject a captured trajectory into a target model's generation.
    Ditail(DitailArgs),
    /// Cross-transfer matrix over several models, emitted as one grid image.
    Matrix(MatrixArgs),
    /// Stylized editing: invert with caption prompts, denoise with edit prompts.
    Edit(EditArgs),
    /// Compliance / structure / style metrics, written as a report file.
    Metrics(MetricsArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Run seed (recorded in the echo even when a command is deterministic).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load a previously echoed configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Primary output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DatagenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// filled | outline | stripes | checker
    #[arg(long)]
    pub style: Option<String>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Image edge length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Patch the image size must divide by.
    #[arg(long)]
    pub patch: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory produced by `datagen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub cond_dim: Option<usize>,
    #[arg(long)]
    pub t_train: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    /// Seed of the vocabulary embedding table.
    #[arg(long)]
    pub embed_seed: Option<u64>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Base checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// filled | outline | stripes | checker
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub negative: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Override the checkpoint's sampling step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Capture the trajectory to this path.
    #[arg(long)]
    pub save_latents: Option<PathBuf>,
    /// latent | feature
    #[arg(long)]
    pub capture_mode: Option<String>,
}

#[derive(Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub negative: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Inversion step count (defaults to the checkpoint's sampling steps).
    #[arg(long)]
    pub inv_steps: Option<usize>,
    /// latent | feature
    #[arg(long)]
    pub capture_mode: Option<String>,
}

#[derive(Args)]
pub struct DitailArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Captured trajectory file.
    #[arg(long)]
    pub src_latents: Option<PathBuf>,
    /// Target model checkpoint.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub negative: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Grayscale mask image (255 = inject, 0 = keep).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// latent | feature; must match the trajectory.
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated residual injection layers.
    #[arg(long)]
    pub res_layers: Option<String>,
    /// Comma-separated attention injection layers.
    #[arg(long)]
    pub attn_layers: Option<String>,
    #[arg(long)]
    pub thresh_res: Option<f64>,
    #[arg(long)]
    pub thresh_attn: Option<f64>,
}

#[derive(Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model checkpoints, row/column order.
    #[arg(long, num_args = 1..)]
    pub models: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub negative: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
}

#[derive(Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Inversion model checkpoint.
    #[arg(long)]
    pub invert_with: Option<PathBuf>,
    /// Target style checkpoint.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Edit prompts.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub negative: Option<String>,
    /// Inversion prompts (caption of the source image, or empty).
    #[arg(long)]
    pub inv_prompt: Option<String>,
    #[arg(long)]
    pub inv_negative: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// compliance | structure | frechet
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub image_a: Option<PathBuf>,
    #[arg(long)]
    pub image_b: Option<PathBuf>,
    /// Directory of images for the A side of a Fréchet comparison.
    #[arg(long)]
    pub set_a: Option<PathBuf>,
    #[arg(long)]
    pub set_b: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Probe/vocabulary checkpoint.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub t_probe: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Datagen(a) => exec::datagen(a),
        Command::Train(a) => exec::train(a),
        Command::Finetune(a) => exec::finetune(a),
        Command::Generate(a) => exec::generate(a),
        Command::Invert(a) => exec::invert(a),
        Command::Ditail(a) => exec::ditail(a),
        Command::Matrix(a) => exec::matrix(a),
        Command::Edit(a) => exec::edit(a),
        Command::Metrics(a) => exec::metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.class(), e);
            ExitCode::FAILURE
        }
    }
}
