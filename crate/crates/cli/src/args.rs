use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[command(name = "photomask", version, about = "Masked photometric depth and ego-motion toolkit")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Format of report files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Render a synthetic scene with ground truth.
    Simulate(SimulateArgs),
    /// Recover depth and poses by direct optimization.
    Optimize(OptimizeArgs),
    /// Compare mask and scale-weighting variants on one scene.
    Ablate(AblateArgs),
    /// Export every mask and error map at given depth and poses.
    Masks(MasksArgs),
    /// Score predicted depth (and trajectories) against ground truth.
    Evaluate(EvaluateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Optimize(_) => "optimize",
            Command::Ablate(_) => "ablate",
            Command::Masks(_) => "masks",
            Command::Evaluate(_) => "evaluate",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Simulate(a) => Some(&a.out),
            Command::Optimize(a) => Some(&a.out),
            Command::Ablate(a) => Some(&a.out),
            Command::Masks(a) => Some(&a.out),
            Command::Evaluate(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Simulate(a) => a.out = dir,
            Command::Optimize(a) => a.out = dir,
            Command::Ablate(a) => a.out = dir,
            Command::Masks(a) => a.out = dir,
            Command::Evaluate(a) => a.out = dir,
            Command::Replay(_) => {}
        }
    }
}

/// Where a command's frames come from.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SceneSource {
    /// Built-in scene: static, co_dir, contra_dir, occlusion or mixed.
    #[arg(long, conflicts_with_all = ["spec", "scene"])]
    pub preset: Option<String>,
    /// Scene description (JSON) to render.
    #[arg(long, conflicts_with = "scene")]
    pub spec: Option<PathBuf>,
    /// Directory written by `simulate`.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: SceneSource,
    #[arg(long)]
    pub out: PathBuf,
}

/// Objective and mask settings shared by the optimizing commands.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct LossArgs {
    /// Per-scale photometric decay.
    #[arg(long, default_value_t = 0.25)]
    pub f: f64,
    /// Upper outlier threshold in standard deviations.
    #[arg(long, default_value_t = 0.5)]
    pub u: f64,
    /// Lower outlier threshold in standard deviations.
    #[arg(long, default_value_t = 1.0)]
    pub l: f64,
    /// Photometric weight.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// Smoothness weight.
    #[arg(long, default_value_t = 0.001)]
    pub lambda: f64,
    /// Per-scale smoothness decay.
    #[arg(long, default_value_t = 0.5)]
    pub e: f64,
    #[arg(long, default_value_t = 4)]
    pub scales: usize,
    #[arg(long)]
    pub no_outlier_mask: bool,
    #[arg(long)]
    pub no_principled_mask: bool,
    #[arg(long)]
    pub no_auto_mask: bool,
    #[arg(long)]
    pub no_min_reprojection: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Depth step size.
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    /// Translation step size.
    #[arg(long, default_value_t = 0.01)]
    pub pose_step: f64,
    /// Rotation step size.
    #[arg(long, default_value_t = 1e-4)]
    pub rotation_step: f64,
    #[arg(long, default_value_t = 0.25)]
    pub init_inv_depth: f64,
    /// Uniform jitter on the initial log inverse depth.
    #[arg(long, default_value_t = 0.0)]
    pub init_noise: f64,
    /// Hold poses at ground truth and optimize depth only.
    #[arg(long)]
    pub fix_pose: bool,
    /// Hold depth at ground truth and optimize poses only.
    #[arg(long)]
    pub fix_depth: bool,
    #[arg(long)]
    pub no_coarse_to_fine: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub source: SceneSource,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Write masks every this many iterations (0: final only).
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// Print a progress line every this many iterations (0: never).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub source: SceneSource,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Comma-separated: full, no-outlier, no-auto, no-min-reprojection,
    /// no-principled, no-masks, uniform-scale.
    #[arg(long, default_value = "full,no-outlier", value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Median-scale on background pixels only.
    #[arg(long, value_enum, default_value_t = Region::Background)]
    pub scaling_region: Region,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MasksArgs {
    #[command(flatten)]
    pub source: SceneSource,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Target depth (.pfm or 16-bit .png); ground truth when omitted.
    #[arg(long, conflicts_with = "background_depth")]
    pub depth: Option<PathBuf>,
    /// Use the background plane's distance as the depth of every pixel.
    #[arg(long)]
    pub background_depth: bool,
    /// Poses `T_{t->s}`, one `[R|t]` line per source; ground truth when omitted.
    #[arg(long, conflicts_with = "identity")]
    pub poses: Option<PathBuf>,
    /// Identity poses for every source.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    All,
    Background,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Predicted depth file or directory.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground-truth depth file or directory, matched to predictions by file stem.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Label map file or directory (8-bit PNG) for per-region metrics.
    #[arg(long, requires = "gt")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub no_median_scaling: bool,
    #[arg(long, value_enum, default_value_t = Region::All)]
    pub scaling_region: Region,
    /// Multiply predictions by this factor instead of median scaling.
    #[arg(long)]
    pub fixed_scale: Option<f64>,
    #[arg(long, default_value_t = 80.0)]
    pub cap: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub min_depth: f64,
    /// Crop as fractions `top,bottom,left,right`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub crop: Option<Vec<f64>>,
    /// Predicted trajectory (12 floats per line).
    #[arg(long, requires = "gt_traj")]
    pub pred_traj: Option<PathBuf>,
    #[arg(long, requires = "pred_traj")]
    pub gt_traj: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub snippet: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
