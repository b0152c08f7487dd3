use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use photomask::evaluation::{region_metrics, RegionReport};
use photomask::io::{
    read_depth, read_gray_png, read_trajectory, write_depth_png16, write_heatmap_png,
    write_mask_png, write_pfm, write_trajectory,
};
use photomask::{
    ablate, ate_snippets, depth_metrics, optimize_with, render, AblationReport, CropRect,
    DepthEvalConfig, DepthMap, Error, Grid, InverseDepthMap, LossConfig, LossOutput, MaskFlags,
    MetricsReport, Objective, OptimConfig, OptimState, OutlierConfig, Pose,
    RegionSample, SampleBundle, ScalingRegion, Truth, Variant,
};
use serde::Serialize;

use crate::args::{
    AblateArgs, EvaluateArgs, Format, LossArgs, MasksArgs, OptimizeArgs, Region, SimulateArgs,
    SolverArgs,
};
use crate::output::{num, Failure, Outputs};
use crate::scene::{self, Scene};

fn loss_settings(a: &LossArgs) -> (LossConfig, OutlierConfig, MaskFlags) {
    let loss = LossConfig {
        eta: a.eta,
        lambda: a.lambda,
        e: a.e,
        f: a.f,
        scales: a.scales,
        ..LossConfig::default()
    };
    let outlier = OutlierConfig {
        l: a.l,
        u: a.u,
        ..OutlierConfig::default()
    };
    let flags = MaskFlags {
        outlier: !a.no_outlier_mask,
        principled: !a.no_principled_mask,
        auto: !a.no_auto_mask,
        min_reprojection: !a.no_min_reprojection,
    };
    (loss, outlier, flags)
}

fn optim_config(scene: &Scene, loss: &LossArgs, solver: &SolverArgs, seed: u64) -> Result<OptimConfig, Failure> {
    let (loss, outlier, flags) = loss_settings(loss);
    let mut cfg = OptimConfig {
        max_iters: solver.iters,
        step_size: solver.step,
        pose_step_size: solver.pose_step,
        rotation_step_size: solver.rotation_step,
        init_inv_depth: solver.init_inv_depth,
        init_noise: solver.init_noise,
        coarse_to_fine: !solver.no_coarse_to_fine,
        flags,
        loss,
        outlier,
        seed,
        ..OptimConfig::default()
    };
    if solver.fix_pose {
        cfg.pose_init = Some(scene.require_poses()?.to_vec());
        cfg.optimize_pose = false;
    }
    if solver.fix_depth {
        cfg.init_depth = Some(scene.require_depth()?.values.map(|d| 1.0 / d));
        cfg.optimize_depth = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_config(region: Region) -> DepthEvalConfig {
    DepthEvalConfig {
        scaling_region: match region {
            Region::All => ScalingRegion::All,
            Region::Background => ScalingRegion::Background,
        },
        ..DepthEvalConfig::default()
    }
}

fn metrics_row(name: &str, region: &str, m: &MetricsReport) -> Vec<String> {
    let mut row = vec![name.to_string(), region.to_string()];
    row.extend(m.values()[..7].iter().map(|&v| num(v)));
    row.push(m.pixel_count.to_string());
    row
}

fn metrics_header<'a>(first: &'a str) -> Vec<&'a str> {
    let mut h = vec![first, "region"];
    h.extend(MetricsReport::FIELDS);
    h
}

fn region_rows(name: &str, report: &RegionReport) -> Vec<Vec<String>> {
    report
        .regions
        .iter()
        .map(|r| metrics_row(name, &r.name, &r.metrics))
        .collect()
}

pub fn simulate(a: &SimulateArgs, seed: u64, out: &mut Outputs) -> Result<(), Failure> {
    if a.source.scene.is_some() {
        return Err(Failure::Input("simulate renders a --preset or --spec".into()));
    }
    let sample = render(&scene::load_spec(&a.source, seed)?)?;
    scene::write_sample(&sample, out)
}

/// Inverse depth pyramid built like the optimizer's: box averages of log inverse depth.
fn pyramid(inv: &InverseDepthMap, scales: usize) -> Result<Vec<InverseDepthMap>, Failure> {
    let mut log = inv.map(|d| d.ln());
    let mut out = vec![inv.clone()];
    for _ in 1..scales {
        log = log.downsample2()?;
        out.push(log.map(|r| r.exp()));
    }
    Ok(out)
}

fn evaluate_at(
    bundle: &SampleBundle,
    loss: LossConfig,
    outlier: OutlierConfig,
    flags: MaskFlags,
    inv: &InverseDepthMap,
    poses: &[Pose],
) -> Result<LossOutput, Failure> {
    let objective = Objective::new(bundle, loss, outlier, flags)?;
    Ok(objective.evaluate(&pyramid(inv, loss.scales)?, poses)?)
}

#[derive(Serialize)]
struct PoseError {
    source: usize,
    translation_error: f64,
    relative_translation_error: f64,
}

#[derive(Serialize)]
struct OptimizeReport {
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    kept_fraction: f64,
    diverged: bool,
    pose_tangents: Vec<[f64; 6]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    regions: Option<RegionReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    poses: Vec<PoseError>,
}

pub fn optimize(a: &OptimizeArgs, seed: u64, format: Format, out: &mut Outputs) -> Result<(), Failure> {
    let scene = scene::load(&a.source, seed)?;
    let bundle = scene.bundle(a.loss.scales)?;
    let cfg = optim_config(&scene, &a.loss, &a.solver, seed)?;

    let mut checkpoints: Vec<(usize, Grid<f64>, Vec<Pose>)> = Vec::new();
    let result = optimize_with(&bundle, &cfg, |p| {
        if a.log_every > 0 && p.iteration % a.log_every == 0 {
            println!(
                "iter {:>5} scale {} loss {:.6} kept {:.4}",
                p.iteration, p.stage, p.loss, p.kept_fraction
            );
        }
        if a.checkpoint_every > 0 && p.stage == 0 && p.iteration % a.checkpoint_every == 0 {
            checkpoints.push((p.iteration, p.log_inv_depth.clone(), p.poses.to_vec()));
        }
    });
    let (state, diverged) = match result {
        Ok(s) => (s, None),
        Err(Error::Diverged { iteration, state }) => (*state, Some(iteration)),
        Err(e) => return Err(e.into()),
    };

    write_state(&state, out)?;
    let (loss, outlier, flags) = loss_settings(&a.loss);
    let mut snapshots: Vec<(String, InverseDepthMap, Vec<Pose>)> = checkpoints
        .into_iter()
        .map(|(it, field, poses)| (format!("iter_{it:05}"), field.map(|r| r.exp()), poses))
        .collect();
    snapshots.push(("final".into(), state.inv_depth[0].clone(), state.poses.clone()));
    for (tag, inv, poses) in &snapshots {
        let lo = evaluate_at(&bundle, loss, outlier, flags, inv, poses)?;
        for (s, m) in lo.scales[0].masks.iter().enumerate() {
            write_mask_png(&out.path(&format!("masks/{tag}_src{s}.png"))?, &m.combined)?;
        }
    }

    let pred = state.depth();
    let mut report = OptimizeReport {
        iterations: state.iteration,
        initial_loss: state.initial_loss,
        final_loss: state.final_loss,
        kept_fraction: state.kept_fraction,
        diverged: diverged.is_some(),
        pose_tangents: state.pose_tangents(),
        depth: None,
        regions: None,
        poses: Vec::new(),
    };
    if let Some(gt) = &scene.gt_depth {
        report.depth = Some(depth_metrics(&pred, gt, &gt.valid, &DepthEvalConfig::default())?);
        if let Some(labels) = &scene.labels {
            let sample = RegionSample { pred: &pred, gt, labels };
            report.regions = Some(region_metrics(&[sample], &eval_config(Region::Background))?);
        }
    }
    if let Some(gt) = &scene.gt_poses {
        report.poses = state
            .poses
            .iter()
            .zip(gt)
            .enumerate()
            .map(|(source, (p, g))| {
                let err = (p.translation() - g.translation()).norm();
                PoseError {
                    source,
                    translation_error: err,
                    relative_translation_error: err / g.translation().norm(),
                }
            })
            .collect();
    }
    match format {
        Format::Json => out.json("metrics.json", &report)?,
        Format::Csv => {
            let mut rows = Vec::new();
            if let Some(m) = &report.depth {
                rows.push(metrics_row("depth", "all", m));
            }
            if let Some(r) = &report.regions {
                rows.extend(region_rows("depth", r));
            }
            out.csv("metrics.csv", &metrics_header("metric"), &rows)?;
        }
    }
    match diverged {
        Some(it) => Err(Failure::Numerical(format!(
            "optimization diverged at iteration {it}; last finite state written to {}",
            out.dir().display()
        ))),
        None => Ok(()),
    }
}

fn write_state(state: &OptimState, out: &mut Outputs) -> Result<(), Failure> {
    let depth = state.depth();
    write_pfm(&out.path("depth.pfm")?, &depth.values)?;
    write_depth_png16(&out.path("depth.png")?, &depth)?;
    write_pfm(&out.path("inv_depth.pfm")?, &state.inv_depth[0])?;
    write_trajectory(&out.path("poses.txt")?, &state.poses)?;
    let rows: Vec<Vec<String>> = state
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), num(*l)])
        .collect();
    out.csv("loss.csv", &["iteration", "loss"], &rows)
}

fn parse_variant(name: &str) -> Result<Variant, Failure> {
    let all = MaskFlags::all();
    let v = match name {
        "full" => Variant::new(name, all),
        "no-outlier" => Variant::new(name, MaskFlags { outlier: false, ..all }),
        "no-auto" => Variant::new(name, MaskFlags { auto: false, ..all }),
        "no-min-reprojection" => Variant::new(name, MaskFlags { min_reprojection: false, ..all }),
        "no-principled" => Variant::new(name, MaskFlags { principled: false, ..all }),
        "no-masks" => Variant::new(name, MaskFlags::none()),
        "uniform-scale" => Variant::new(name, all).with_f(1.0),
        other => return Err(Failure::Input(format!("unknown variant `{other}`"))),
    };
    Ok(v)
}

pub fn ablate_cmd(a: &AblateArgs, seed: u64, format: Format, out: &mut Outputs) -> Result<(), Failure> {
    let scene = scene::load(&a.source, seed)?;
    let variants = a
        .variants
        .iter()
        .map(|v| parse_variant(v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let (Some(depth), Some(labels)) = (&scene.gt_depth, &scene.labels) else {
        return Err(Failure::Input("ablation needs ground-truth depth and labels".into()));
    };
    let cfg = optim_config(&scene, &a.loss, &a.solver, seed)?;
    let bundle = scene.bundle(a.loss.scales)?;
    let report: AblationReport = ablate(&bundle, Truth { depth, labels }, &variants, &cfg, &eval_config(a.scaling_region))?;
    match format {
        Format::Json => out.json("ablation.json", &report),
        Format::Csv => {
            let mut rows = Vec::new();
            for v in &report.variants {
                rows.push(metrics_row(&v.variant.name, "all", &v.overall));
                rows.extend(region_rows(&v.variant.name, &v.regions));
            }
            out.csv("ablation.csv", &metrics_header("variant"), &rows)
        }
    }
}

#[derive(Serialize)]
struct MaskSummary {
    scale: usize,
    source: usize,
    mu: Option<f64>,
    sigma: Option<f64>,
    outlier: f64,
    principled: f64,
    auto: f64,
    min_reprojection: f64,
    combined: f64,
}

pub fn masks(a: &MasksArgs, seed: u64, format: Format, out: &mut Outputs) -> Result<(), Failure> {
    let scene = scene::load(&a.source, seed)?;
    let (w, h) = (scene.intrinsics.width, scene.intrinsics.height);
    let depth = if let Some(p) = &a.depth {
        read_depth(p)?
    } else if a.background_depth {
        let d = scene
            .background_distance
            .ok_or_else(|| Failure::Input("the scene has no background distance".into()))?;
        DepthMap::constant(w, h, d)
    } else {
        scene.require_depth()?.clone()
    };
    if depth.width() != w || depth.height() != h {
        return Err(Failure::Input(format!("depth is {}x{}, frames are {w}x{h}", depth.width(), depth.height())));
    }
    let poses = if let Some(p) = &a.poses {
        read_trajectory(p)?
    } else if a.identity {
        vec![Pose::identity(); scene.sources.len()]
    } else {
        scene.require_poses()?.to_vec()
    };
    let bundle = scene.bundle(a.loss.scales)?;
    let (loss, outlier, flags) = loss_settings(&a.loss);
    let inv = depth.values.map(|d| 1.0 / d);
    let lo = evaluate_at(&bundle, loss, outlier, flags, &inv, &poses)?;

    let mut summary = Vec::new();
    for sc in &lo.scales {
        for (s, m) in sc.masks.iter().enumerate() {
            let r = sc.scale;
            for (kind, mask) in [
                ("outlier", &m.outlier),
                ("principled", &m.principled),
                ("auto", &m.auto),
                ("min_reprojection", &m.min_reprojection),
                ("combined", &m.combined),
            ] {
                write_mask_png(&out.path(&format!("masks/{kind}_src{s}_scale{r}.png"))?, mask)?;
            }
            write_heatmap_png(&out.path(&format!("errors/error_src{s}_scale{r}.png"))?, &sc.errors[s].values, None)?;
            summary.push(MaskSummary {
                scale: r,
                source: s,
                mu: sc.stats.map(|st| st.mu),
                sigma: sc.stats.map(|st| st.sigma),
                outlier: m.outlier.fraction_true(),
                principled: m.principled.fraction_true(),
                auto: m.auto.fraction_true(),
                min_reprojection: m.min_reprojection.fraction_true(),
                combined: m.combined.fraction_true(),
            });
        }
    }
    match format {
        Format::Json => out.json("masks.json", &summary),
        Format::Csv => {
            let rows: Vec<Vec<String>> = summary
                .iter()
                .map(|m| {
                    vec![
                        m.scale.to_string(),
                        m.source.to_string(),
                        m.mu.map(num).unwrap_or_default(),
                        m.sigma.map(num).unwrap_or_default(),
                        num(m.outlier),
                        num(m.principled),
                        num(m.auto),
                        num(m.min_reprojection),
                        num(m.combined),
                    ]
                })
                .collect();
            out.csv(
                "masks.csv",
                &["scale", "source", "mu", "sigma", "outlier", "principled", "auto", "min_reprojection", "combined"],
                &rows,
            )
        }
    }
}

/// Depth files keyed by stem; a single file maps to its own stem.
fn depth_files(path: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let is_depth = |p: &Path| matches!(p.extension().and_then(|e| e.to_str()), Some("pfm" | "png"));
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.is_file() {
        return Ok(BTreeMap::from([(stem(path), path.to_path_buf())]));
    }
    let entries = fs::read_dir(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let p = entry.map_err(|e| Failure::Input(e.to_string()))?.path();
        if p.is_file() && is_depth(&p) {
            let key = stem(&p);
            // prefer the lossless PFM when both encodings exist
            if out.get(&key).is_none() || p.extension().is_some_and(|e| e == "pfm") {
                out.insert(key, p);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FileMetrics {
    name: String,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct EvaluationReport {
    files: Vec<FileMetrics>,
    /// Per-file metrics averaged over files.
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    regions: Option<RegionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ate: Option<photomask::AteReport>,
}

fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    (!reports.is_empty()).then(|| MetricsReport {
        abs_rel: avg(|m| m.abs_rel),
        sq_rel: avg(|m| m.sq_rel),
        rmse: avg(|m| m.rmse),
        rmse_log: avg(|m| m.rmse_log),
        delta1: avg(|m| m.delta1),
        delta2: avg(|m| m.delta2),
        delta3: avg(|m| m.delta3),
        pixel_count: reports.iter().map(|m| m.pixel_count).sum(),
    })
}

pub fn evaluate(a: &EvaluateArgs, out: &mut Outputs) -> Result<(), Failure> {
    if a.gt.is_none() && a.gt_traj.is_none() {
        return Err(Failure::Input("nothing to evaluate: give --pred/--gt or --pred-traj/--gt-traj".into()));
    }
    let cfg = DepthEvalConfig {
        cap: a.cap,
        min_depth: a.min_depth,
        median_scaling: !a.no_median_scaling,
        scaling_region: eval_config(a.scaling_region).scaling_region,
        crop: a.crop.as_ref().map(|c| CropRect {
            top: c[0],
            bottom: c[1],
            left: c[2],
            right: c[3],
        }),
        fixed_scale: a.fixed_scale,
    };
    cfg.validate()?;

    let mut report = EvaluationReport {
        files: Vec::new(),
        mean: None,
        regions: None,
        ate: None,
    };
    if let (Some(pred_path), Some(gt_path)) = (&a.pred, &a.gt) {
        let preds = depth_files(pred_path)?;
        let gts = depth_files(gt_path)?;
        if gts.is_empty() {
            return Err(Failure::Input(format!("{}: no depth files", gt_path.display())));
        }
        let single = pred_path.is_file() && gt_path.is_file();
        let mut pairs = Vec::new();
        for (name, gp) in &gts {
            let pp = if single { preds.values().next() } else { preds.get(name) };
            let pp = pp.ok_or_else(|| Failure::Input(format!("no prediction for ground truth {}", gp.display())))?;
            pairs.push((name.clone(), read_depth(pp)?, read_depth(gp)?, pp.clone()));
        }
        if !single {
            if let Some(extra) = preds.keys().find(|k| !gts.contains_key(*k)) {
                return Err(Failure::Input(format!("no ground truth for prediction {}", preds[extra].display())));
            }
        }
        let mut labels = Vec::new();
        if let Some(lp) = &a.labels {
            for (name, _, gt, _) in &pairs {
                let file = if lp.is_file() { lp.clone() } else { lp.join(format!("{name}.png")) };
                let l = read_gray_png(&file)?;
                if l.width() != gt.width() || l.height() != gt.height() {
                    return Err(Failure::Input(format!("{}: label map shape differs from depth", file.display())));
                }
                labels.push(l);
            }
        }
        for (name, pred, gt, pp) in &pairs {
            if pred.width() != gt.width() || pred.height() != gt.height() {
                return Err(Failure::Input(format!(
                    "{}: {}x{} prediction for {}x{} ground truth",
                    pp.display(),
                    pred.width(),
                    pred.height(),
                    gt.width(),
                    gt.height()
                )));
            }
            let metrics = depth_metrics(pred, gt, &gt.valid, &cfg)?;
            report.files.push(FileMetrics {
                name: name.clone(),
                metrics,
            });
        }
        let all: Vec<MetricsReport> = report.files.iter().map(|f| f.metrics).collect();
        report.mean = mean_report(&all);
        if !labels.is_empty() {
            let samples: Vec<RegionSample<'_>> = pairs
                .iter()
                .zip(&labels)
                .map(|((_, pred, gt, _), labels)| RegionSample { pred, gt, labels })
                .collect();
            report.regions = Some(region_metrics(&samples, &cfg)?);
        }
    }
    if let (Some(p), Some(g)) = (&a.pred_traj, &a.gt_traj) {
        report.ate = Some(ate_snippets(&read_trajectory(p)?, &read_trajectory(g)?, a.snippet)?);
    }

    out.json("report.json", &report)?;
    let mut rows: Vec<Vec<String>> = report
        .files
        .iter()
        .map(|f| metrics_row(&f.name, "all", &f.metrics))
        .collect();
    if let Some(m) = &report.mean {
        rows.push(metrics_row("mean", "all", m));
    }
    if let Some(r) = &report.regions {
        rows.extend(region_rows("regions", r));
    }
    out.csv("report.csv", &metrics_header("file"), &rows)?;
    if let Some(ate) = &report.ate {
        out.csv(
            "ate.csv",
            &["mean", "std", "snippets"],
            &[vec![num(ate.mean), num(ate.std), ate.snippets.to_string()]],
        )?;
    }
    Ok(())
}
