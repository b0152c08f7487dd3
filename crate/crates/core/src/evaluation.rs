//! Depth metrics with capping and median scaling, per-motion-label metrics
//! weighted by pixel count, and snippet ATE for trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};
use crate::image::{Grid, MaskMap};
use crate::scenesim::MotionLabel;

/// Which pixels determine the median scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingRegion {
    #[default]
    All,
    /// Background-labelled pixels; only meaningful with labels.
    Background,
}

/// Evaluation window as fractions of the image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl CropRect {
    /// Pixels whose centre lies inside the window.
    pub fn mask(&self, width: usize, height: usize) -> MaskMap {
        Grid::from_fn(width, height, |x, y| {
            let (fx, fy) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            fx >= self.left && fx <= self.right && fy >= self.top && fy <= self.bottom
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalConfig {
    pub cap: f64,
    pub min_depth: f64,
    pub median_scaling: bool,
    #[serde(default)]
    pub scaling_region: ScalingRegion,
    #[serde(default)]
    pub crop: Option<CropRect>,
    /// External scale applied instead of the median ratio.
    #[serde(default)]
    pub fixed_scale: Option<f64>,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        DepthEvalConfig {
            cap: 80.0,
            min_depth: 1e-3,
            median_scaling: true,
            scaling_region: ScalingRegion::All,
            crop: None,
            fixed_scale: None,
        }
    }
}

impl DepthEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.cap) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < min_depth < cap, got {} and {}",
                self.min_depth, self.cap
            )));
        }
        if let Some(s) = self.fixed_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig("fixed scale must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 8] = [
        "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3", "pixel_count",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.pixel_count as f64,
        ]
    }
}

/// Median as in numpy: mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Pixels that take part in evaluation: selected, gt valid and inside the cap range, inside the crop.
fn eligible(gt: &DepthMap, mask: &MaskMap, cfg: &DepthEvalConfig) -> MaskMap {
    let crop = cfg.crop.map(|c| c.mask(gt.width(), gt.height()));
    Grid::from_fn(gt.width(), gt.height(), |x, y| {
        *mask.get(x, y)
            && crop.as_ref().map_or(true, |c| *c.get(x, y))
            && gt
                .at(x, y)
                .is_some_and(|g| g >= cfg.min_depth && g <= cfg.cap)
    })
}

fn check_shapes(pred: &DepthMap, gt: &DepthMap, mask: &MaskMap) -> Result<()> {
    if !pred.values.same_shape(&gt.values) || !mask.same_shape(&gt.values) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}, ground truth {}x{}, mask {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Ratio of medians gt/pred over `region`, or the configured fixed scale, or 1.
fn scale_over(pred: &DepthMap, gt: &DepthMap, region: &MaskMap, cfg: &DepthEvalConfig) -> Result<f64> {
    if let Some(s) = cfg.fixed_scale {
        return Ok(s);
    }
    if !cfg.median_scaling {
        return Ok(1.0);
    }
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (i, &m) in region.as_slice().iter().enumerate() {
        if m {
            p.push(pred.values.as_slice()[i]);
            g.push(gt.values.as_slice()[i]);
        }
    }
    match (median(&mut g), median(&mut p)) {
        (Some(mg), Some(mp)) if mp > 0.0 => Ok(mg / mp),
        (Some(_), Some(_)) => Err(Error::DegenerateDepth),
        _ => Err(Error::EmptyRegion),
    }
}

fn metrics_with_scale(pred: &DepthMap, gt: &DepthMap, region: &MaskMap, scale: f64, cfg: &DepthEvalConfig) -> Result<MetricsReport> {
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (i, &m) in region.as_slice().iter().enumerate() {
        if !m {
            continue;
        }
        let g = gt.values.as_slice()[i];
        let p = (pred.values.as_slice()[i] * scale).clamp(cfg.min_depth, cfg.cap);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        let dl = p.ln() - g.ln();
        sle += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (sle / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        pixel_count: n,
    })
}

/// Standard depth metrics on the selected pixels.
///
/// Median scaling (if enabled) uses the same pixels, whatever `scaling_region` says;
/// background-only scaling needs labels and is handled by [`region_metrics`].
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &MaskMap, cfg: &DepthEvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    check_shapes(pred, gt, mask)?;
    let region = eligible(gt, mask, cfg);
    let scale = scale_over(pred, gt, &region, cfg)?;
    metrics_with_scale(pred, gt, &region, scale, cfg)
}

/// One labelled prediction.
#[derive(Clone, Copy, Debug)]
pub struct RegionSample<'a> {
    pub pred: &'a DepthMap,
    pub gt: &'a DepthMap,
    pub labels: &'a Grid<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub label: u8,
    pub name: String,
    pub pixel_count: usize,
    /// Share of all evaluated pixels, in percent.
    pub percent: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub regions: Vec<RegionEntry>,
    pub notes: Vec<String>,
}

impl RegionReport {
    pub fn get(&self, label: u8) -> Option<&RegionEntry> {
        self.regions.iter().find(|r| r.label == label)
    }

    pub fn motion(&self, label: MotionLabel) -> Option<&MetricsReport> {
        self.get(label.id()).map(|r| &r.metrics)
    }
}

fn label_name(id: u8) -> String {
    MotionLabel::from_id(id).map_or_else(|| format!("label_{id}"), |l| l.name().to_string())
}

/// Per-label metrics over several samples, each sample weighted by its pixel count for that label.
pub fn region_metrics(samples: &[RegionSample<'_>], cfg: &DepthEvalConfig) -> Result<RegionReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyRegion);
    }
    // label -> per-sample (count, metrics)
    let mut per_label: BTreeMap<u8, Vec<MetricsReport>> = BTreeMap::new();
    let mut notes = Vec::new();
    let mut total = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if !s.labels.same_shape(&s.gt.values) {
            return Err(Error::ShapeMismatch(format!("labels of sample {i}")));
        }
        let everything = Grid::filled(s.gt.width(), s.gt.height(), true);
        check_shapes(s.pred, s.gt, &everything)?;
        let region = eligible(s.gt, &everything, cfg);
        total += region.count_true();
        let scaling = match cfg.scaling_region {
            ScalingRegion::All => region.clone(),
            ScalingRegion::Background => {
                let bg = region.zip_map(s.labels, |&r, &l| r && l == MotionLabel::Background.id());
                if bg.count_true() == 0 {
                    notes.push(format!("sample {i}: no background pixels, scaled over all pixels"));
                    region.clone()
                } else {
                    bg
                }
            }
        };
        let scale = match scale_over(s.pred, s.gt, &scaling, cfg) {
            Err(Error::EmptyRegion) => continue,
            other => other?,
        };
        let mut present: Vec<u8> = region
            .as_slice()
            .iter()
            .zip(s.labels.as_slice())
            .filter_map(|(&r, &l)| r.then_some(l))
            .collect();
        present.sort_unstable();
        present.dedup();
        for label in present {
            let m = region.zip_map(s.labels, |&r, &l| r && l == label);
            per_label
                .entry(label)
                .or_default()
                .push(metrics_with_scale(s.pred, s.gt, &m, scale, cfg)?);
        }
    }
    for l in MotionLabel::ALL {
        if !per_label.contains_key(&l.id()) {
            notes.push(format!("{} absent from every sample", l.name()));
        }
    }
    let regions = per_label
        .into_iter()
        .map(|(label, reports)| {
            let metrics = combine_weighted(&reports);
            RegionEntry {
                label,
                name: label_name(label),
                pixel_count: metrics.pixel_count,
                percent: 100.0 * metrics.pixel_count as f64 / total as f64,
                metrics,
            }
        })
        .collect();
    Ok(RegionReport { regions, notes })
}

/// Pixel-count weighted average; a lone contributor is returned untouched.
pub fn combine_weighted(reports: &[MetricsReport]) -> MetricsReport {
    if let [only] = reports {
        return *only;
    }
    let n: usize = reports.iter().map(|r| r.pixel_count).sum();
    let avg = |f: fn(&MetricsReport) -> f64| {
        reports.iter().map(|r| r.pixel_count as f64 * f(r)).sum::<f64>() / n as f64
    };
    MetricsReport {
        abs_rel: avg(|r| r.abs_rel),
        sq_rel: avg(|r| r.sq_rel),
        rmse: avg(|r| r.rmse),
        rmse_log: avg(|r| r.rmse_log),
        delta1: avg(|r| r.delta1),
        delta2: avg(|r| r.delta2),
        delta3: avg(|r| r.delta3),
        pixel_count: n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub mean: f64,
    pub std: f64,
    pub snippets: usize,
}

/// Translation error over every `snippet`-frame window after anchoring both
/// trajectories at the window's first pose and fitting one scale to the
/// predicted translations. Poses are camera-to-world.
pub fn ate_snippets(pred: &[Pose], gt: &[Pose], snippet: usize) -> Result<AteReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted and {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    if snippet == 0 || pred.len() < snippet {
        return Err(Error::TooShort {
            len: pred.len(),
            snippet,
        });
    }
    let errors: Vec<f64> = (0..=pred.len() - snippet)
        .map(|start| {
            let rel = |traj: &[Pose]| {
                let anchor = traj[start].inverse();
                (start..start + snippet)
                    .map(|i| *anchor.compose(&traj[i]).translation())
                    .collect::<Vec<_>>()
            };
            let (p, g) = (rel(pred), rel(gt));
            let num: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
            let den: f64 = p.iter().map(|a| a.dot(a)).sum();
            let scale = if den > 1e-300 { num / den } else { 1.0 };
            p.iter().zip(&g).map(|(a, b)| (a * scale - b).norm()).sum::<f64>() / snippet as f64
        })
        .collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(AteReport {
        mean,
        std: var.sqrt(),
        snippets: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dm(w: usize, h: usize, f: impl FnMut(usize, usize) -> f64) -> DepthMap {
        DepthMap::new(Grid::from_fn(w, h, f))
    }

    fn no_scaling() -> DepthEvalConfig {
        DepthEvalConfig {
            median_scaling: false,
            ..Default::default()
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt = dm(6, 4, |x, y| 1.0 + x as f64 + 0.5 * y as f64);
        let all = Grid::filled(6, 4, true);
        let m = depth_metrics(&gt, &gt, &all, &DepthEvalConfig::default()).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn median_scaling_cancels_half() {
        let gt = dm(5, 3, |x, y| 2.0 + x as f64 * 0.7 + y as f64);
        let half = DepthMap::new(gt.values.map(|g| 0.5 * g));
        let all = Grid::filled(5, 3, true);
        let cfg = DepthEvalConfig::default();
        let a = depth_metrics(&half, &gt, &all, &cfg).unwrap();
        let b = depth_metrics(&gt, &gt, &all, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn twenty_percent_overestimate() {
        let gt = dm(4, 4, |x, y| 3.0 + (x * y) as f64);
        let pred = DepthMap::new(gt.values.map(|g| 1.2 * g));
        let m = depth_metrics(&pred, &gt, &Grid::filled(4, 4, true), &no_scaling()).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(m.delta1, 1.0);
        assert!((m.rmse_log - 1.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn delta_threshold_is_strict() {
        let gt = dm(1, 1, |_, _| 4.0);
        let pred = dm(1, 1, |_, _| 5.0);
        let m = depth_metrics(&pred, &gt, &Grid::filled(1, 1, true), &no_scaling()).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
    }

    #[test]
    fn cap_excludes_far_ground_truth() {
        let gt = dm(2, 1, |x, _| if x == 0 { 10.0 } else { 100.0 });
        let m = depth_metrics(&gt, &gt, &Grid::filled(2, 1, true), &DepthEvalConfig::default()).unwrap();
        assert_eq!(m.pixel_count, 1);
    }

    #[test]
    fn empty_region_errors() {
        let gt = dm(2, 2, |_, _| 1.0);
        let none = Grid::filled(2, 2, false);
        assert!(matches!(
            depth_metrics(&gt, &gt, &none, &DepthEvalConfig::default()),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn numpy_median() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn weighted_hand_example() {
        let mk = |abs_rel, n| MetricsReport {
            abs_rel,
            sq_rel: 0.0,
            rmse: 0.0,
            rmse_log: 0.0,
            delta1: 1.0,
            delta2: 1.0,
            delta3: 1.0,
            pixel_count: n,
        };
        let c = combine_weighted(&[mk(0.1, 10), mk(0.3, 30)]);
        assert_eq!(c.abs_rel, (10.0 * 0.1 + 30.0 * 0.3) / 40.0);
        assert_eq!(c.pixel_count, 40);
    }

    #[test]
    fn ate_examples() {
        let gt: Vec<Pose> = (0..7)
            .map(|i| Pose::from_translation([0.1 * i as f64, 0.02 * i as f64, 0.5 * i as f64]))
            .collect();
        let r = ate_snippets(&gt, &gt, 5).unwrap();
        assert_eq!((r.mean, r.std, r.snippets), (0.0, 0.0, 3));

        let doubled: Vec<Pose> = gt
            .iter()
            .map(|p| Pose::new(*p.rotation(), p.translation() * 2.0).unwrap())
            .collect();
        assert!(ate_snippets(&doubled, &gt, 5).unwrap().mean < 1e-12);

        assert!(matches!(ate_snippets(&gt[..3], &gt[..3], 5), Err(Error::TooShort { .. })));
    }

    proptest! {
        #[test]
        fn rmse_log_symmetric_abs_rel_not(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = dm(4, 4, |_, _| rng.gen_range(1.0..20.0));
            let b = dm(4, 4, |_, _| rng.gen_range(1.0..20.0));
            let all = Grid::filled(4, 4, true);
            let cfg = no_scaling();
            let ab = depth_metrics(&a, &b, &all, &cfg).unwrap();
            let ba = depth_metrics(&b, &a, &all, &cfg).unwrap();
            prop_assert!((ab.rmse_log - ba.rmse_log).abs() < 1e-12);
            prop_assert!(ab.abs_rel != ba.abs_rel);
            prop_assert!(ab.delta1 <= ab.delta2 && ab.delta2 <= ab.delta3);
        }
    }
}
