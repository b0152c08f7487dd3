//! Scene loading and the on-disk layout written by `simulate`.

use std::fs;
use std::path::{Path, PathBuf};

use photomask::io::{
    read_depth, read_gray_png, read_image_png, read_trajectory, write_depth_png16, write_gray_png,
    write_image_png, write_mask_png, write_pfm, write_trajectory,
};
use photomask::{
    preset_with_seed, render, DepthMap, Grid, ImageBuffer, Intrinsics, MotionLabel, Pose,
    RenderedSample, SampleBundle, SceneSpec,
};
use serde::{Deserialize, Serialize};

use crate::args::SceneSource;
use crate::output::{Failure, Outputs};

/// Index file of a scene directory.
#[derive(Serialize, Deserialize)]
pub struct SceneIndex {
    pub intrinsics: Intrinsics,
    pub frames: Vec<i32>,
    pub target_index: usize,
    pub source_indices: Vec<usize>,
    /// Distance of the background plane, when known.
    pub background_distance: Option<f64>,
}

#[derive(Serialize)]
struct LabelLegend {
    id: u8,
    name: &'static str,
}

/// Frames plus whatever ground truth accompanies them.
pub struct Scene {
    pub target: ImageBuffer,
    pub sources: Vec<ImageBuffer>,
    pub intrinsics: Intrinsics,
    pub gt_depth: Option<DepthMap>,
    pub gt_poses: Option<Vec<Pose>>,
    pub labels: Option<Grid<u8>>,
    pub background_distance: Option<f64>,
}

impl Scene {
    pub fn bundle(&self, scales: usize) -> Result<SampleBundle, Failure> {
        Ok(SampleBundle::new(
            self.target.clone(),
            self.sources.clone(),
            self.intrinsics,
            scales,
        )?)
    }

    pub fn require_depth(&self) -> Result<&DepthMap, Failure> {
        self.gt_depth
            .as_ref()
            .ok_or_else(|| Failure::Input("the scene has no ground-truth depth".into()))
    }

    pub fn require_poses(&self) -> Result<&[Pose], Failure> {
        self.gt_poses
            .as_deref()
            .ok_or_else(|| Failure::Input("the scene has no ground-truth poses".into()))
    }

    fn from_sample(r: RenderedSample) -> Self {
        Scene {
            target: r.target_image().clone(),
            sources: r.source_images(),
            intrinsics: r.spec.intrinsics,
            gt_depth: Some(r.target_depth().clone()),
            gt_poses: Some(r.gt_poses.clone()),
            labels: Some(r.labels.clone()),
            background_distance: Some(r.spec.background.distance),
        }
    }
}

pub fn load_spec(source: &SceneSource, seed: u64) -> Result<SceneSpec, Failure> {
    match (&source.preset, &source.spec) {
        (Some(name), _) => Ok(preset_with_seed(name, seed)?),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            Ok(SceneSpec::from_json(&text)?)
        }
        (None, None) => Err(Failure::Input("give one of --preset, --spec or --scene".into())),
    }
}

/// Renders presets and specs in memory; reads scene directories from disk.
pub fn load(source: &SceneSource, seed: u64) -> Result<Scene, Failure> {
    match &source.scene {
        Some(dir) if source.preset.is_none() && source.spec.is_none() => read_dir(dir),
        _ => Ok(Scene::from_sample(render(&load_spec(source, seed)?)?)),
    }
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i}.png"))
}

fn read_dir(dir: &Path) -> Result<Scene, Failure> {
    let index_path = dir.join("scene.json");
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Failure::Input(format!("{}: {e}", index_path.display())))?;
    let index: SceneIndex = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", index_path.display())))?;
    let target = read_image_png(&frame_path(dir, index.target_index))?;
    let sources = index
        .source_indices
        .iter()
        .map(|&i| read_image_png(&frame_path(dir, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let optional = |name: String| Some(dir.join(name)).filter(|p| p.exists());
    let gt_depth = optional(format!("depth_{}.pfm", index.target_index))
        .map(|p| read_depth(&p))
        .transpose()?;
    let gt_poses = optional("gt_poses.txt".into()).map(|p| read_trajectory(&p)).transpose()?;
    let labels = optional("labels.png".into()).map(|p| read_gray_png(&p)).transpose()?;
    Ok(Scene {
        target,
        sources,
        intrinsics: index.intrinsics,
        gt_depth,
        gt_poses,
        labels,
        background_distance: index.background_distance,
    })
}

/// Writes every frame, its depth, the labels, occlusion masks and poses.
pub fn write_sample(r: &RenderedSample, out: &mut Outputs) -> Result<(), Failure> {
    let index = SceneIndex {
        intrinsics: r.spec.intrinsics,
        frames: r.frames.clone(),
        target_index: r.target_index,
        source_indices: r.source_indices.clone(),
        background_distance: Some(r.spec.background.distance),
    };
    out.json("scene.json", &index)?;
    out.json("spec.json", &r.spec)?;
    for (i, (img, depth)) in r.images.iter().zip(&r.depths).enumerate() {
        write_image_png(&out.path(&format!("frame_{i}.png"))?, img)?;
        write_pfm(&out.path(&format!("depth_{i}.pfm"))?, &depth.values)?;
        write_depth_png16(&out.path(&format!("depth_{i}.png"))?, depth)?;
    }
    write_gray_png(&out.path("labels.png")?, &r.labels)?;
    let legend: Vec<LabelLegend> = MotionLabel::ALL
        .iter()
        .map(|&l| LabelLegend {
            id: l.id(),
            name: l.name(),
        })
        .collect();
    out.json("labels.json", &legend)?;
    for (s, occ) in r.occlusion.iter().enumerate() {
        write_mask_png(&out.path(&format!("occlusion_{s}.png"))?, occ)?;
    }
    write_trajectory(&out.path("gt_poses.txt")?, &r.gt_poses)?;
    Ok(())
}
