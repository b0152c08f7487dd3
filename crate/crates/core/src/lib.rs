//! Masked photometric supervision for monocular depth and ego-motion.
//!
//! The crate covers the whole pipeline at desk scale: pinhole geometry and
//! differentiable view synthesis, SSIM/L1 photometric error, outlier and
//! companion masks, the weighted multi-scale objective, a direct optimizer
//! that stands in for network training, a synthetic scene renderer with
//! exact ground truth, and the usual depth and trajectory metrics.

pub mod bundle;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod io;
pub mod masking;
pub mod objective;
pub mod optimizer;
pub mod photometric;
pub mod scenesim;
pub mod warp;

pub use bundle::SampleBundle;
pub use error::{Error, Result};
pub use evaluation::{
    ate_snippets, depth_metrics, region_metrics, AteReport, CropRect, DepthEvalConfig,
    MetricsReport, RegionReport, RegionSample, ScalingRegion,
};
pub use geometry::{principled_mask, project, DepthMap, Intrinsics, PixelCoord, Pose};
pub use image::{Grid, ImageBuffer, InverseDepthMap, MaskMap};
pub use masking::{
    auto_mask, combine_masks, error_stats, min_reprojection_mask, outlier_mask, scale_weights,
    total_loss, ErrorStats, LossConfig, MaskFlags, OutlierConfig, StatsScope,
};
pub use objective::{LossOutput, Objective};
pub use optimizer::{ablate, optimize, optimize_with, AblationReport, OptimConfig, OptimState, Truth, Variant};
pub use photometric::{photometric_error, smoothness_loss, ErrorMap, PhotometricConfig, SsimWindow};
pub use scenesim::{preset, preset_with_seed, render, MotionLabel, RenderedSample, SceneSpec};
pub use warp::{bilinear_sample, synthesize_view, warp_jacobians, WarpResult};
