//! Photometric-error masks and the masked, scale-weighted objective.
//!
//! Four masks gate each source's error map:
//!
//! - outlier: keeps errors strictly inside `(mu - l sigma, mu + u sigma)`,
//!   with `mu`, `sigma` pooled over every source view of the sample;
//! - principled: keeps pixels whose projection lands inside the source image;
//! - auto: keeps pixels where the reconstruction beats the unwarped source;
//! - minimum reprojection: keeps, per pixel, the source(s) with the least error.
//!
//! Their conjunction selects the pixels averaged into each `(scale, source)`
//! term, and terms are weighted by `f^r` across scales.

use serde::{Deserialize, Serialize};

use crate::bundle::SampleBundle;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::image::{Grid, InverseDepthMap, MaskMap};
use crate::objective::{LossOutput, Objective};
use crate::photometric::{ErrorMap, PhotometricConfig};

/// Which scale's error maps feed the outlier statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsScope {
    /// Recompute `(mu, sigma)` from each scale's own error maps.
    #[default]
    PerScale,
    /// Reuse the statistics of the finest evaluated scale at every scale.
    FinestScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierConfig {
    /// Lower threshold multiplier.
    pub l: f64,
    /// Upper threshold multiplier.
    pub u: f64,
    /// Below this sigma the error map is treated as constant and fully kept.
    pub sigma_floor: f64,
    #[serde(default)]
    pub stats_scope: StatsScope,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            l: 1.0,
            u: 0.5,
            sigma_floor: 1e-12,
            stats_scope: StatsScope::PerScale,
        }
    }
}

impl OutlierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l >= 0.0 && self.u >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "outlier thresholds must be non-negative (l = {}, u = {})",
                self.l, self.u
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidConfig("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Photometric weight.
    pub eta: f64,
    /// Smoothness weight.
    pub lambda: f64,
    /// Smoothness decay across scales.
    pub e: f64,
    /// Photometric decay across scales.
    pub f: f64,
    pub scales: usize,
    #[serde(default)]
    pub photometric: PhotometricConfig,
    /// Added to the unwarped error before auto-masking, so that exact ties
    /// (an identity warp) keep the reconstruction.
    #[serde(default = "default_tie_margin")]
    pub auto_tie_margin: f64,
}

fn default_tie_margin() -> f64 {
    1e-5
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 1.0,
            lambda: 0.001,
            e: 0.5,
            f: 0.25,
            scales: 4,
            photometric: PhotometricConfig::default(),
            auto_tie_margin: default_tie_margin(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.e > 0.0 && self.e <= 1.0) {
            return bad("e must lie in (0, 1]");
        }
        if !(self.f > 0.0 && self.f <= 1.0) {
            return bad("f must lie in (0, 1]");
        }
        if !(self.auto_tie_margin >= 0.0) {
            return bad("auto_tie_margin must be non-negative");
        }
        if self.scales == 0 {
            return bad("at least one scale is required");
        }
        self.photometric.validate()
    }
}

/// Which masks enter the conjunction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFlags {
    pub outlier: bool,
    pub principled: bool,
    pub auto: bool,
    pub min_reprojection: bool,
}

impl Default for MaskFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl MaskFlags {
    pub const fn all() -> Self {
        MaskFlags {
            outlier: true,
            principled: true,
            auto: true,
            min_reprojection: true,
        }
    }

    pub const fn none() -> Self {
        MaskFlags {
            outlier: false,
            principled: false,
            auto: false,
            min_reprojection: false,
        }
    }
}

/// Pooled mean and population standard deviation of photometric errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Statistics over the valid pixels of all maps taken together.
pub fn error_stats(errors: &[ErrorMap]) -> Result<ErrorStats> {
    let pooled = || {
        errors.iter().flat_map(|e| {
            e.values
                .as_slice()
                .iter()
                .zip(e.valid.as_slice())
                .filter_map(|(&v, &ok)| ok.then_some(v))
        })
    };
    let n = pooled().count();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let mu = pooled().sum::<f64>() / n as f64;
    let var = pooled().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    Ok(ErrorStats {
        mu,
        sigma: var.sqrt(),
    })
}

/// True where `mu - l sigma < e < mu + u sigma` on valid pixels.
///
/// A sigma below `sigma_floor` means a constant map, which keeps every valid pixel.
pub fn outlier_mask(err: &ErrorMap, stats: &ErrorStats, cfg: &OutlierConfig) -> MaskMap {
    if stats.sigma < cfg.sigma_floor {
        return err.valid.clone();
    }
    let lo = stats.mu - cfg.l * stats.sigma;
    let hi = stats.mu + cfg.u * stats.sigma;
    err.values.zip_map(&err.valid, |&e, &ok| ok && lo < e && e < hi)
}

/// True where the reconstruction error is strictly below the direct error.
pub fn auto_mask(err_recon: &ErrorMap, err_direct: &ErrorMap) -> Result<MaskMap> {
    if !err_recon.values.same_shape(&err_direct.values) {
        return Err(Error::ShapeMismatch("auto-mask error maps".into()));
    }
    Ok(Grid::from_fn(err_recon.width(), err_recon.height(), |x, y| {
        *err_recon.valid.get(x, y)
            && *err_direct.valid.get(x, y)
            && *err_recon.values.get(x, y) < *err_direct.values.get(x, y)
    }))
}

/// Per source, true where its error attains the per-pixel minimum over sources.
///
/// Ties keep every minimizer; invalid entries neither compete nor survive.
pub fn min_reprojection_mask(errors: &[ErrorMap]) -> Result<Vec<MaskMap>> {
    let first = errors
        .first()
        .ok_or_else(|| Error::InvalidConfig("minimum reprojection needs at least one map".into()))?;
    if errors.iter().any(|e| !e.values.same_shape(&first.values)) {
        return Err(Error::ShapeMismatch("minimum reprojection error maps".into()));
    }
    let (w, h) = (first.width(), first.height());
    let min = Grid::from_fn(w, h, |x, y| {
        errors
            .iter()
            .filter(|e| *e.valid.get(x, y))
            .map(|e| *e.values.get(x, y))
            .fold(f64::INFINITY, f64::min)
    });
    Ok(errors
        .iter()
        .map(|e| {
            Grid::from_fn(w, h, |x, y| {
                *e.valid.get(x, y) && *e.values.get(x, y) <= *min.get(x, y)
            })
        })
        .collect())
}

/// Pixelwise AND.
pub fn combine_masks(masks: &[&MaskMap]) -> Result<MaskMap> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidConfig("nothing to combine".into()))?;
    let mut out = (*first).clone();
    for m in &masks[1..] {
        if !m.same_shape(&out) {
            return Err(Error::ShapeMismatch("combined masks".into()));
        }
        out.as_mut_slice()
            .iter_mut()
            .zip(m.as_slice())
            .for_each(|(o, &b)| *o = *o && b);
    }
    Ok(out)
}

/// `[f^0, f^1, ...]`, one weight per scale.
pub fn scale_weights(cfg: &LossConfig) -> Vec<f64> {
    (0..cfg.scales).map(|r| cfg.f.powi(r as i32)).collect()
}

/// The masked multi-scale objective at the given per-scale inverse depths and
/// per-source poses `T_{t->s}`.
pub fn total_loss(
    bundle: &SampleBundle,
    inv_depths: &[InverseDepthMap],
    poses: &[Pose],
    cfg: &LossConfig,
    ocfg: &OutlierConfig,
    flags: MaskFlags,
) -> Result<LossOutput> {
    Objective::new(bundle, *cfg, *ocfg, flags)?.evaluate(inv_depths, poses)
}
