//! Evaluation of the masked objective and its gradient with respect to
//! per-scale log inverse depth and per-source pose increments.
//!
//! Masks are recomputed on every evaluation but enter the gradient as
//! constants; pass frozen masks to evaluate the piecewise-smooth function the
//! gradient actually differentiates.

use serde::Serialize;

use crate::bundle::SampleBundle;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};
use crate::image::{Grid, InverseDepthMap, MaskMap};
use crate::masking::{
    auto_mask, combine_masks, error_stats, min_reprojection_mask, outlier_mask, ErrorStats,
    LossConfig, MaskFlags, OutlierConfig, StatsScope,
};
use crate::photometric::{
    photometric_error, photometric_error_backward, smoothness_with_gradient, ErrorMap,
};
use crate::warp::{synthesize_view, synthesize_with_jacobians};

/// Individual masks of one `(scale, source)` error map.
#[derive(Clone, Debug)]
pub struct SourceMasks {
    pub outlier: MaskMap,
    pub principled: MaskMap,
    pub auto: MaskMap,
    pub min_reprojection: MaskMap,
    /// Conjunction of the enabled masks.
    pub combined: MaskMap,
}

#[derive(Clone, Debug)]
pub struct ScaleOutput {
    pub scale: usize,
    /// `None` when no source pixel projects inside its image.
    pub stats: Option<ErrorStats>,
    pub errors: Vec<ErrorMap>,
    pub masks: Vec<SourceMasks>,
    /// Unweighted masked mean error per source.
    pub photometric: Vec<f64>,
    /// Kept pixels over all pixels, per source.
    pub kept_fraction: Vec<f64>,
    /// Unweighted smoothness term.
    pub smoothness: f64,
}

/// One row of the loss breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerm {
    pub scale: usize,
    pub source: usize,
    pub photometric: f64,
    pub kept_fraction: f64,
    pub smoothness: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Weighted photometric part of `loss`.
    pub photometric: f64,
    /// Weighted smoothness part of `loss`.
    pub smoothness: f64,
    pub scales: Vec<ScaleOutput>,
    /// `(scale, source)` terms whose combined mask kept no pixel.
    pub fully_masked: Vec<(usize, usize)>,
}

impl LossOutput {
    pub fn breakdown(&self) -> Vec<LossTerm> {
        self.scales
            .iter()
            .flat_map(|s| {
                (0..s.photometric.len()).map(move |i| LossTerm {
                    scale: s.scale,
                    source: i,
                    photometric: s.photometric[i],
                    kept_fraction: s.kept_fraction[i],
                    smoothness: s.smoothness,
                })
            })
            .collect()
    }

    /// Combined masks indexed `[scale][source]`, for freezing.
    pub fn combined_masks(&self) -> Vec<Vec<MaskMap>> {
        self.scales
            .iter()
            .map(|s| s.masks.iter().map(|m| m.combined.clone()).collect())
            .collect()
    }

    /// Fraction of pixels kept, averaged over every `(scale, source)` term.
    pub fn mean_kept_fraction(&self) -> f64 {
        let all: Vec<f64> = self
            .scales
            .iter()
            .flat_map(|s| s.kept_fraction.iter().copied())
            .collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// Gradient of the objective.
#[derive(Clone, Debug)]
pub struct Gradient {
    /// `dL / d log(inverse depth)`, one grid per evaluated scale.
    pub log_inv_depth: Vec<Grid<f64>>,
    /// `dL / d delta` for the increment of [`Pose::retract`], per source.
    pub pose: Vec<[f64; 6]>,
}

/// The objective bound to one sample and configuration.
pub struct Objective<'a> {
    bundle: &'a SampleBundle,
    loss: LossConfig,
    outlier: OutlierConfig,
    flags: MaskFlags,
    /// Error of the unwarped source against the target, `[scale][source]`.
    direct: Vec<Vec<ErrorMap>>,
}

impl<'a> Objective<'a> {
    pub fn new(
        bundle: &'a SampleBundle,
        loss: LossConfig,
        outlier: OutlierConfig,
        flags: MaskFlags,
    ) -> Result<Self> {
        loss.validate()?;
        outlier.validate()?;
        if loss.scales > bundle.scales() {
            return Err(Error::InvalidConfig(format!(
                "{} loss scales but the sample has {} pyramid levels",
                loss.scales,
                bundle.scales()
            )));
        }
        let direct = if flags.auto {
            (0..loss.scales)
                .map(|r| {
                    (0..bundle.num_sources())
                        .map(|s| {
                            let mut e = photometric_error(bundle.target(r), bundle.source(s, r), &loss.photometric)?;
                            e.values.as_mut_slice().iter_mut().for_each(|v| *v += loss.auto_tie_margin);
                            Ok(e)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Objective {
            bundle,
            loss,
            outlier,
            flags,
            direct,
        })
    }

    pub fn bundle(&self) -> &SampleBundle {
        self.bundle
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// Full objective over all configured scales; `inv_depths[r]` is scale `r`.
    pub fn evaluate(&self, inv_depths: &[InverseDepthMap], poses: &[Pose]) -> Result<LossOutput> {
        self.run(0, inv_depths, poses, None, false).map(|(o, _)| o)
    }

    pub fn evaluate_with_gradient(
        &self,
        inv_depths: &[InverseDepthMap],
        poses: &[Pose],
    ) -> Result<(LossOutput, Gradient)> {
        self.run(0, inv_depths, poses, None, true)
            .map(|(o, g)| (o, g.expect("gradient requested")))
    }

    /// Objective restricted to scales `first..scales`, divided by `f^first`.
    ///
    /// `inv_depths[i]` is scale `first + i`. Combined masks may be frozen,
    /// indexed the same way.
    pub fn evaluate_from(
        &self,
        first: usize,
        inv_depths: &[InverseDepthMap],
        poses: &[Pose],
        frozen: Option<&[Vec<MaskMap>]>,
        with_gradient: bool,
    ) -> Result<(LossOutput, Option<Gradient>)> {
        self.run(first, inv_depths, poses, frozen, with_gradient)
    }

    fn run(
        &self,
        first: usize,
        inv_depths: &[InverseDepthMap],
        poses: &[Pose],
        frozen: Option<&[Vec<MaskMap>]>,
        with_gradient: bool,
    ) -> Result<(LossOutput, Option<Gradient>)> {
        let bundle = self.bundle;
        let n_src = bundle.num_sources();
        let scales = self.loss.scales;
        if first >= scales {
            return Err(Error::InvalidConfig(format!("first scale {first} >= {scales}")));
        }
        if inv_depths.len() != scales - first {
            return Err(Error::InvalidConfig(format!(
                "{} inverse depth maps for scales {first}..{scales}",
                inv_depths.len()
            )));
        }
        if poses.len() != n_src {
            return Err(Error::InvalidConfig(format!(
                "{} poses for {n_src} source frames",
                poses.len()
            )));
        }
        let pcfg = &self.loss.photometric;
        let norm = self.loss.f.powi(first as i32);

        let mut out_scales = Vec::with_capacity(scales - first);
        let mut fully_masked = Vec::new();
        let mut photometric_total = 0.0;
        let mut smooth_total = 0.0;
        let mut grad_depth = Vec::new();
        let mut grad_pose = vec![[0.0f64; 6]; n_src];
        let mut finest_stats: Option<ErrorStats> = None;

        for (i, inv) in inv_depths.iter().enumerate() {
            let r = first + i;
            let k = bundle.intrinsics(r);
            let target = bundle.target(r);
            if inv.width() != k.width || inv.height() != k.height {
                return Err(Error::ShapeMismatch(format!(
                    "inverse depth {}x{} at scale {r}, expected {}x{}",
                    inv.width(),
                    inv.height(),
                    k.width,
                    k.height
                )));
            }
            let depth = DepthMap::from_inverse(inv);

            let mut warped = Vec::with_capacity(n_src);
            let mut jacobians = Vec::with_capacity(n_src);
            let mut errors = Vec::with_capacity(n_src);
            for (s, pose) in poses.iter().enumerate() {
                let source = bundle.source(s, r);
                let wr = if with_gradient {
                    let (wr, j) = synthesize_with_jacobians(source, &depth, pose, k)?;
                    jacobians.push(j);
                    wr
                } else {
                    synthesize_view(source, &depth, pose, k)?
                };
                let pe = photometric_error(target, &wr.image, pcfg)?;
                errors.push(ErrorMap::with_valid(pe.values, wr.in_bounds.clone())?);
                warped.push(wr);
            }

            let stats = match (self.outlier.stats_scope, finest_stats) {
                (StatsScope::FinestScale, Some(s)) => Some(s),
                _ => error_stats(&errors).ok(),
            };
            if finest_stats.is_none() {
                finest_stats = stats;
            }
            let mr = min_reprojection_mask(&errors)?;
            let (w, h) = (k.width, k.height);
            let mut masks = Vec::with_capacity(n_src);
            for s in 0..n_src {
                let ol = match &stats {
                    Some(st) => outlier_mask(&errors[s], st, &self.outlier),
                    None => Grid::filled(w, h, false),
                };
                let auto = if self.flags.auto {
                    auto_mask(&errors[s], &self.direct[r][s])?
                } else {
                    errors[s].valid.clone()
                };
                let principled = warped[s].in_bounds.clone();
                let mut enabled: Vec<&MaskMap> = Vec::new();
                if self.flags.outlier {
                    enabled.push(&ol);
                }
                if self.flags.principled {
                    enabled.push(&principled);
                }
                if self.flags.auto {
                    enabled.push(&auto);
                }
                if self.flags.min_reprojection {
                    enabled.push(&mr[s]);
                }
                let combined = match frozen {
                    Some(f) => f[i][s].clone(),
                    None if enabled.is_empty() => Grid::filled(w, h, true),
                    None => combine_masks(&enabled)?,
                };
                masks.push(SourceMasks {
                    outlier: ol,
                    principled,
                    auto,
                    min_reprojection: mr[s].clone(),
                    combined,
                });
            }

            let weight = self.loss.eta * self.loss.f.powi(r as i32) / norm;
            let mut photometric = Vec::with_capacity(n_src);
            let mut kept_fraction = Vec::with_capacity(n_src);
            let mut g_log = Grid::filled(w, h, 0.0);
            for s in 0..n_src {
                let mask = &masks[s].combined;
                let kept = mask.count_true();
                kept_fraction.push(kept as f64 / (w * h) as f64);
                if kept == 0 {
                    photometric.push(0.0);
                    fully_masked.push((r, s));
                    continue;
                }
                // fixed summation order keeps results reproducible
                let sum: f64 = errors[s]
                    .values
                    .as_slice()
                    .iter()
                    .zip(mask.as_slice())
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| v)
                    .sum();
                let mean = sum / kept as f64;
                photometric.push(mean);
                photometric_total += weight * mean;

                if with_gradient {
                    let per_pixel = weight / kept as f64;
                    let upstream = mask.map(|&m| if m { per_pixel } else { 0.0 });
                    let g_img = photometric_error_backward(target, &warped[s].image, pcfg, &upstream)?;
                    let jac = &jacobians[s];
                    let ch = target.channels();
                    let jd = jac.depth_slice();
                    let jp = jac.pose_slice();
                    for p in 0..w * h {
                        let mut gd = 0.0;
                        for c in 0..ch {
                            let g = g_img[p * ch + c];
                            if g == 0.0 {
                                continue;
                            }
                            gd += g * jd[p * ch + c];
                            let base = (p * ch + c) * 6;
                            for (acc, j) in grad_pose[s].iter_mut().zip(&jp[base..base + 6]) {
                                *acc += g * j;
                            }
                        }
                        if gd != 0.0 {
                            // D = exp(-rho): dD/drho = -D
                            let d = depth.values.as_slice()[p];
                            g_log.as_mut_slice()[p] -= gd * d;
                        }
                    }
                }
            }

            let smooth_weight = self.loss.lambda * self.loss.e.powi(r as i32) / norm;
            let (smoothness, g_smooth) = smoothness_with_gradient(inv, target)?;
            smooth_total += smooth_weight * smoothness;
            if with_gradient && smooth_weight > 0.0 {
                for ((g, gs), d) in g_log
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g_smooth.as_slice())
                    .zip(inv.as_slice())
                {
                    // inverse depth = exp(rho)
                    *g += smooth_weight * gs * d;
                }
            }
            if with_gradient {
                grad_depth.push(g_log);
            }

            out_scales.push(ScaleOutput {
                scale: r,
                stats,
                errors,
                masks,
                photometric,
                kept_fraction,
                smoothness,
            });
        }

        let output = LossOutput {
            loss: photometric_total + smooth_total,
            photometric: photometric_total,
            smoothness: smooth_total,
            scales: out_scales,
            fully_masked,
        };
        let gradient = with_gradient.then(|| Gradient {
            log_inv_depth: grad_depth,
            pose: grad_pose,
        });
        Ok((output, gradient))
    }
}
