use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "vslam", version, about = "Monocular keyframe SLAM with pluggable feature front-ends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run SLAM over a dataset directory.
    Run(RunArgs),
    /// Train a bag-of-words vocabulary from feature files or images.
    VocabBuild(VocabArgs),
    /// Apply an image distortion to every image of a directory.
    Distort(DistortArgs),
    /// Compare an estimated trajectory with ground truth.
    Evaluate(EvaluateArgs),
    /// Evaluate the descriptor, orientation and detector losses on a JSON input.
    Losses(LossesArgs),
    /// Generate a synthetic dataset on disk.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Kitti,
    Euroc,
    Synth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LoopMode {
    Off,
    Interleaved,
    Threaded,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset directory.
    pub path: PathBuf,
    #[arg(long, value_enum)]
    pub dataset: DatasetKind,
    /// `native`, `synthetic` or `files:<dir>`; defaults to `synthetic` for synth datasets, `native` otherwise.
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Adapt the matching thresholds to the tracking margin.
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub th_low: Option<f64>,
    #[arg(long)]
    pub th_high: Option<f64>,
    /// Lower bound for adaptive thresholds.
    #[arg(long, requires = "adaptive")]
    pub th_min: Option<f64>,
    /// Upper bound for adaptive thresholds.
    #[arg(long, requires = "adaptive")]
    pub th_max: Option<f64>,
    /// Defaults to `interleaved` when a vocabulary is given, `off` otherwise.
    #[arg(long, value_enum)]
    pub loop_closing: Option<LoopMode>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-frame trace.csv.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Directory of `.feat` files, or of images for the native detector.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub levels: usize,
    #[arg(long, default_value_t = 10)]
    pub branching: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuantileArg {
    Q1,
    Q3,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("distortion").required(true).args(["gamma", "truncate", "salt_pepper", "skip"])))]
pub struct DistortArgs {
    /// Directory of PNG or PGM images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Raise intensities to this power.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Clamp intensities to the given quartile.
    #[arg(long, value_enum)]
    pub truncate: Option<QuantileArg>,
    /// Corrupt each pixel with this probability.
    #[arg(long)]
    pub salt_pepper: Option<f64>,
    /// Keep every n-th image.
    #[arg(long)]
    pub skip: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrajectoryFormat {
    Tum,
    Kitti,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    Sim3,
    Se3,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = TrajectoryFormat::Tum)]
    pub format: TrajectoryFormat,
    #[arg(long, value_enum, default_value_t = AlignArg::Sim3)]
    pub align: AlignArg,
    /// Timestamp association window, seconds.
    #[arg(long, default_value_t = 0.02)]
    pub max_dt: f64,
    /// Use KITTI segment lengths (100..800 m) for RPE instead of consecutive frames.
    #[arg(long)]
    pub kitti_lengths: bool,
    /// Also write metrics.csv and trajectory.svg here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossesArgs {
    /// JSON file with `descriptor`, `orientation` and/or `detector` sections.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drift injected into the rendered views, per metre travelled.
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub pixel_sigma: Option<f64>,
    #[arg(long)]
    pub descriptor_sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}
