//! Argument surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "desca",
    version,
    about = "Dense self-correlation descriptors: compute, match, profile, bench"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Compute a dense descriptor field and its JSON sidecar.
    Compute(ComputeArgs),
    /// Dense stereo matching with winner-takes-all disparity.
    Stereo(StereoArgs),
    /// Scanline matching-cost profile as CSV (columns: x, cost).
    Profile(ProfileArgs),
    /// Time the fast path against the direct path.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Configuration file (JSON; TOML with a .toml extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Descriptor kind: lss|dasc|sisca|desca. `profile` accepts a
    /// comma-separated list.
    #[arg(long)]
    pub desc: Option<String>,
    /// Weighting scheme: uniform|guided.
    #[arg(long)]
    pub weights: Option<String>,
    /// Guided-filter smoothness parameter.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seed for the sampling pattern.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to DESCA_THREADS, then all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Compute route: fast|direct.
    #[arg(long)]
    pub path: Option<String>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ComputeArgs {
    /// Input image (PGM/PPM/PFM).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct StereoArgs {
    /// Left image.
    #[arg(long)]
    pub left: Option<PathBuf>,
    /// Right image.
    #[arg(long)]
    pub right: Option<PathBuf>,
    /// Ground-truth disparity (PFM) for evaluation.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Evaluation mask image (nonzero = evaluate).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Largest disparity candidate.
    #[arg(long)]
    pub max_disp: Option<usize>,
    /// Bad-pixel threshold in pixels.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct ProfileArgs {
    /// Left image.
    #[arg(long)]
    pub left: Option<PathBuf>,
    /// Right image.
    #[arg(long)]
    pub right: Option<PathBuf>,
    /// Reference pixel in the left image, as X,Y.
    #[arg(long)]
    pub pixel: String,
    /// Scanline in the right image (default: the pixel's row).
    #[arg(long)]
    pub row: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Input image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Side of the center crop used for the direct path (default 64).
    #[arg(long)]
    pub crop: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}
