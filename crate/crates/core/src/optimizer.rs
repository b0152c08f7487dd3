//! Direct recovery of inverse depth and relative poses by gradient descent on
//! the masked objective.
//!
//! Depth is a single full-resolution log-inverse-depth field; the coarser
//! scales see its 2x2 box averages. With coarse-to-fine enabled the field's
//! average at the coarsest level is optimized against the coarse scales only;
//! the update is upsampled onto the field and refinement continues one level
//! finer at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::SampleBundle;
use crate::error::{Error, Result};
use crate::evaluation::{depth_metrics, region_metrics, DepthEvalConfig, MetricsReport, RegionReport, RegionSample};
use crate::geometry::{DepthMap, Pose};
use crate::image::{Grid, InverseDepthMap};
use crate::masking::{LossConfig, MaskFlags, OutlierConfig};
use crate::objective::Objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Step on log inverse depth, in units of the per-pixel gradient.
    pub step_size: f64,
    /// Step on the translation part of the pose tangent.
    pub pose_step_size: f64,
    /// Step on the rotation part of the pose tangent.
    pub rotation_step_size: f64,
    /// Fractions of `max_iters` after which both steps are divided by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Initial inverse depth, used everywhere unless `init_depth` is given.
    pub init_inv_depth: f64,
    /// Full-resolution initial inverse depth.
    #[serde(default)]
    pub init_depth: Option<InverseDepthMap>,
    /// Initial `T_{t->s}` per source; identity when absent.
    #[serde(default)]
    pub pose_init: Option<Vec<Pose>>,
    pub optimize_depth: bool,
    pub optimize_pose: bool,
    pub coarse_to_fine: bool,
    /// Share of `max_iters` given to each coarse level.
    pub coarse_share: f64,
    pub flags: MaskFlags,
    pub loss: LossConfig,
    pub outlier: OutlierConfig,
    pub seed: u64,
    /// Amplitude of seeded uniform jitter added to the initial log inverse depth.
    pub init_noise: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iters: 500,
            step_size: 0.5,
            pose_step_size: 0.01,
            rotation_step_size: 1e-4,
            decay_at: vec![0.75, 0.9],
            decay_factor: 5.0,
            init_inv_depth: 0.25,
            init_depth: None,
            pose_init: None,
            optimize_depth: true,
            optimize_pose: true,
            coarse_to_fine: true,
            coarse_share: 0.125,
            flags: MaskFlags::all(),
            loss: LossConfig::default(),
            outlier: OutlierConfig::default(),
            seed: 42,
            init_noise: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.step_size > 0.0 && self.pose_step_size > 0.0 && self.rotation_step_size > 0.0) {
            return bad("step sizes must be positive".into());
        }
        if !(self.init_inv_depth > 0.0 && self.init_inv_depth.is_finite()) {
            return bad("initial inverse depth must be positive".into());
        }
        if !(self.decay_factor >= 1.0) {
            return bad("decay factor must be at least 1".into());
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("decay points are fractions of max_iters".into());
        }
        if !(0.0..=1.0).contains(&self.coarse_share) || !(self.init_noise >= 0.0) {
            return bad("coarse_share must lie in [0, 1] and init_noise be non-negative".into());
        }
        self.loss.validate()?;
        self.outlier.validate()
    }

    /// Multiplier applied to both step sizes at global iteration `it`.
    pub fn decay(&self, it: usize) -> f64 {
        let passed = self
            .decay_at
            .iter()
            .filter(|&&f| it as f64 >= f * self.max_iters as f64)
            .count();
        self.decay_factor.powi(-(passed as i32))
    }

    /// Iterations per coarse-to-fine stage, coarsest first, summing to `max_iters`.
    pub fn stage_iters(&self) -> Vec<(usize, usize)> {
        let scales = self.loss.scales;
        if !self.coarse_to_fine || scales == 1 {
            return vec![(0, self.max_iters)];
        }
        let coarse = (self.max_iters as f64 * self.coarse_share).floor() as usize;
        let mut left = self.max_iters;
        let mut out: Vec<(usize, usize)> = (1..scales)
            .rev()
            .map(|s| {
                let n = coarse.min(left);
                left -= n;
                (s, n)
            })
            .collect();
        out.push((0, left));
        out
    }
}

/// The optimizer's iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    /// Inverse depth seen by each scale, finest first.
    pub inv_depth: Vec<InverseDepthMap>,
    /// `T_{t->s}` per source.
    pub poses: Vec<Pose>,
    pub iteration: usize,
    /// Objective of the active stage, one entry per iteration.
    pub loss_history: Vec<f64>,
    /// Full objective at the initialization.
    pub initial_loss: f64,
    /// Full objective at the returned iterate.
    pub final_loss: f64,
    /// Mean kept-pixel fraction of the full objective at the returned iterate.
    pub kept_fraction: f64,
}

impl OptimState {
    pub fn depth(&self) -> DepthMap {
        DepthMap::from_inverse(&self.inv_depth[0])
    }

    pub fn pose_tangents(&self) -> Vec<[f64; 6]> {
        self.poses.iter().map(Pose::tangent).collect()
    }
}

/// One progress report per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress<'a> {
    pub iteration: usize,
    pub stage: usize,
    pub loss: f64,
    pub kept_fraction: f64,
    /// Poses at which `loss` was evaluated.
    pub poses: &'a [Pose],
    /// Log inverse depth at the stage's level, before this iteration's step.
    pub log_inv_depth: &'a Grid<f64>,
}

pub fn optimize(bundle: &SampleBundle, cfg: &OptimConfig) -> Result<OptimState> {
    optimize_with(bundle, cfg, |_| {})
}

fn downsample_to(field: &Grid<f64>, levels: usize) -> Result<Grid<f64>> {
    (0..levels).try_fold(field.clone(), |g, _| g.downsample2())
}

/// Log inverse depth at `level` and every coarser scale, exponentiated.
fn pyramid_from(field: &Grid<f64>, count: usize) -> Result<Vec<InverseDepthMap>> {
    let mut out = Vec::with_capacity(count);
    let mut cur = field.clone();
    for i in 0..count {
        if i > 0 {
            cur = cur.downsample2()?;
        }
        out.push(cur.map(|r| r.exp()));
    }
    Ok(out)
}

/// Adjoint of [`pyramid_from`]'s downsampling chain: folds per-scale
/// gradients back onto the finest field.
fn pull_back(mut grads: Vec<Grid<f64>>) -> Grid<f64> {
    let mut acc = grads.pop().expect("at least one scale");
    while let Some(mut finer) = grads.pop() {
        let up = acc.upsample2();
        for (f, u) in finer.as_mut_slice().iter_mut().zip(up.as_slice()) {
            *f += 0.25 * u;
        }
        acc = finer;
    }
    acc
}

/// Runs the optimizer, calling `observer` after every evaluated iteration.
pub fn optimize_with(
    bundle: &SampleBundle,
    cfg: &OptimConfig,
    mut observer: impl FnMut(&Progress<'_>),
) -> Result<OptimState> {
    cfg.validate()?;
    let scales = cfg.loss.scales;
    let objective = Objective::new(bundle, cfg.loss, cfg.outlier, cfg.flags)?;
    let (w, h) = (bundle.width(), bundle.height());

    let mut rho = match &cfg.init_depth {
        Some(inv) => {
            if inv.width() != w || inv.height() != h {
                return Err(Error::ShapeMismatch(format!(
                    "initial depth {}x{} for a {w}x{h} sample",
                    inv.width(),
                    inv.height()
                )));
            }
            if inv.as_slice().iter().any(|&d| !(d > 0.0 && d.is_finite())) {
                return Err(Error::InvalidConfig("initial inverse depth must be positive".into()));
            }
            inv.map(|d| d.ln())
        }
        None => Grid::filled(w, h, cfg.init_inv_depth.ln()),
    };
    if cfg.init_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for r in rho.as_mut_slice() {
            *r += cfg.init_noise * rng.gen_range(-1.0..=1.0);
        }
    }
    let mut poses = match &cfg.pose_init {
        Some(p) if p.len() != bundle.num_sources() => {
            return Err(Error::InvalidConfig(format!(
                "{} initial poses for {} sources",
                p.len(),
                bundle.num_sources()
            )))
        }
        Some(p) => p.clone(),
        None => vec![Pose::identity(); bundle.num_sources()],
    };

    let full = |rho: &Grid<f64>, poses: &[Pose]| -> Result<(Vec<InverseDepthMap>, f64, f64)> {
        let inv = pyramid_from(rho, scales)?;
        let out = objective.evaluate(&inv, poses)?;
        Ok((inv, out.loss, out.mean_kept_fraction()))
    };
    let (_, initial_loss, _) = full(&rho, &poses)?;

    let start = (rho.clone(), poses.clone());
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut it = 0usize;
    let mut last_good: Option<(Grid<f64>, Vec<Pose>)> = None;
    for (stage, iters) in cfg.stage_iters() {
        // the active parameter is the field's average at the stage's level
        let base = downsample_to(&rho, stage)?;
        let mut param = base.clone();
        let pixels = (param.width() * param.height()) as f64;
        for _ in 0..iters {
            let inv = pyramid_from(&param, scales - stage)?;
            let evaluated = match objective.evaluate_from(stage, &inv, &poses, None, true) {
                Err(e) if e.is_numerical() && last_good.is_some() => None,
                other => Some(other?),
            };
            let Some((out, grad)) = evaluated.filter(|(out, _)| out.loss.is_finite()) else {
                return Err(diverged(&objective, cfg, last_good, &start, it, history, initial_loss));
            };
            last_good = Some((lift(&rho, &base, &param, stage), poses.clone()));
            history.push(out.loss);
            observer(&Progress {
                iteration: it,
                stage,
                loss: out.loss,
                kept_fraction: out.mean_kept_fraction(),
                poses: &poses,
                log_inv_depth: &param,
            });
            let grad = grad.expect("gradient requested");
            let decay = cfg.decay(it);
            if cfg.optimize_depth {
                let g = pull_back(grad.log_inv_depth);
                let step = cfg.step_size * decay * pixels;
                for (p, g) in param.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *p -= step * g;
                }
            }
            if cfg.optimize_pose {
                let (rot, trans) = (cfg.rotation_step_size * decay, cfg.pose_step_size * decay);
                for (pose, g) in poses.iter_mut().zip(&grad.pose) {
                    let mut delta = [0.0; 6];
                    for (i, d) in delta.iter_mut().enumerate() {
                        *d = -g[i] * if i < 3 { rot } else { trans };
                    }
                    *pose = pose.retract(&delta);
                }
            }
            it += 1;
            let finite = param.as_slice().iter().all(|r| r.abs() < MAX_LOG_INV_DEPTH)
                && poses.iter().all(|p| p.tangent().iter().all(|v| v.is_finite()));
            if !finite {
                return Err(diverged(&objective, cfg, last_good, &start, it, history, initial_loss));
            }
        }
        if cfg.optimize_depth {
            rho = lift(&rho, &base, &param, stage);
        }
    }
    finish(&objective, cfg, rho, poses, it, history, initial_loss)
}

/// Beyond this the inverse depth over- or underflows.
const MAX_LOG_INV_DEPTH: f64 = 300.0;

/// Adds a coarse-level update back onto the full-resolution field, so detail
/// below the stage's resolution survives.
fn lift(rho: &Grid<f64>, base: &Grid<f64>, param: &Grid<f64>, stage: usize) -> Grid<f64> {
    let mut delta = param.zip_map(base, |p, b| p - b);
    for _ in 0..stage {
        delta = delta.upsample2();
    }
    rho.zip_map(&delta, |r, d| r + d)
}

fn diverged(
    objective: &Objective<'_>,
    cfg: &OptimConfig,
    last_good: Option<(Grid<f64>, Vec<Pose>)>,
    start: &(Grid<f64>, Vec<Pose>),
    iteration: usize,
    history: Vec<f64>,
    initial_loss: f64,
) -> Error {
    let (field, poses) = last_good.unwrap_or_else(|| start.clone());
    match finish(objective, cfg, field, poses, iteration, history, initial_loss) {
        Ok(state) => Error::Diverged {
            iteration,
            state: Box::new(state),
        },
        Err(e) => e,
    }
}

fn finish(
    objective: &Objective<'_>,
    cfg: &OptimConfig,
    rho: Grid<f64>,
    poses: Vec<Pose>,
    iteration: usize,
    loss_history: Vec<f64>,
    initial_loss: f64,
) -> Result<OptimState> {
    let inv_depth = pyramid_from(&rho, cfg.loss.scales)?;
    let out = objective.evaluate(&inv_depth, &poses)?;
    Ok(OptimState {
        inv_depth,
        poses,
        iteration,
        loss_history,
        initial_loss,
        final_loss: out.loss,
        kept_fraction: out.mean_kept_fraction(),
    })
}

/// One configuration of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub flags: MaskFlags,
    /// Overrides the photometric scale decay.
    #[serde(default)]
    pub f: Option<f64>,
    /// Overrides the outlier upper multiplier.
    #[serde(default)]
    pub u: Option<f64>,
}

impl Variant {
    pub fn new(name: impl Into<String>, flags: MaskFlags) -> Self {
        Variant {
            name: name.into(),
            flags,
            f: None,
            u: None,
        }
    }

    pub fn with_f(mut self, f: f64) -> Self {
        self.f = Some(f);
        self
    }

    fn apply(&self, cfg: &OptimConfig) -> OptimConfig {
        let mut c = cfg.clone();
        c.flags = self.flags;
        if let Some(f) = self.f {
            c.loss.f = f;
        }
        if let Some(u) = self.u {
            c.outlier.u = u;
        }
        c
    }
}

/// Ground truth an ablation is scored against.
#[derive(Clone, Copy, Debug)]
pub struct Truth<'a> {
    pub depth: &'a DepthMap,
    pub labels: &'a Grid<u8>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub poses: Vec<[f64; 12]>,
    /// Metrics over every evaluated pixel.
    pub overall: MetricsReport,
    /// Per motion label, background-scaled.
    pub regions: RegionReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.variant.name == name)
    }
}

/// Optimizes once per variant with a shared seed and scores each result.
pub fn ablate(
    bundle: &SampleBundle,
    truth: Truth<'_>,
    variants: &[Variant],
    cfg: &OptimConfig,
    eval: &DepthEvalConfig,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("an ablation needs at least one variant".into()));
    }
    let reports = variants
        .par_iter()
        .map(|v| {
            let state = optimize(bundle, &v.apply(cfg))?;
            let pred = state.depth();
            let mask = truth.depth.valid.clone();
            let overall = depth_metrics(&pred, truth.depth, &mask, eval)?;
            let regions = region_metrics(
                &[RegionSample {
                    pred: &pred,
                    gt: truth.depth,
                    labels: truth.labels,
                }],
                eval,
            )?;
            Ok(VariantReport {
                variant: v.clone(),
                initial_loss: state.initial_loss,
                final_loss: state.final_loss,
                poses: state.poses.iter().map(Pose::to_row_major).collect(),
                overall,
                regions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        seed: cfg.seed,
        variants: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_schedule() {
        let cfg = OptimConfig {
            max_iters: 100,
            ..Default::default()
        };
        assert_eq!(cfg.decay(0), 1.0);
        assert_eq!(cfg.decay(74), 1.0);
        assert_eq!(cfg.decay(75), 0.2);
        assert!((cfg.decay(95) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn stage_budget_sums_to_max_iters() {
        for n in [0, 1, 7, 100, 500] {
            let cfg = OptimConfig {
                max_iters: n,
                ..Default::default()
            };
            let st = cfg.stage_iters();
            assert_eq!(st.iter().map(|s| s.1).sum::<usize>(), n);
            assert_eq!(st.last().unwrap().0, 0);
        }
        let cfg = OptimConfig {
            coarse_to_fine: false,
            ..Default::default()
        };
        assert_eq!(cfg.stage_iters(), vec![(0, 500)]);
    }

    #[test]
    fn pull_back_is_adjoint_of_downsampling() {
        let f = Grid::from_fn(8, 4, |x, y| ((x * 7 + y * 3) % 5) as f64 * 0.1);
        let g1 = Grid::from_fn(4, 2, |x, y| (x as f64 - y as f64) * 0.3);
        let g0 = Grid::filled(8, 4, 0.0);
        // <down(f), g1> == <f, pull_back([0, g1])>
        let lhs: f64 = f
            .downsample2()
            .unwrap()
            .as_slice()
            .iter()
            .zip(g1.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let back = pull_back(vec![g0, g1]);
        let rhs: f64 = f.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
