//! Synthetic scenes with exact ground truth: a textured background plane,
//! fronto-parallel sprites that may move, and a camera with constant
//! per-frame ego-motion. Rendering is per-pixel ray casting at pixel centres.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::SampleBundle;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, PixelCoord, Pose, BEHIND_CAMERA_Z};
use crate::image::{Grid, ImageBuffer, MaskMap};

/// Relative depth tolerance of the occlusion z-test.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

/// Preset names accepted by [`preset`].
pub const PRESETS: [&str; 5] = ["static", "co_dir", "contra_dir", "occlusion", "mixed"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Constant { value: f64 },
    /// Four seeded sinusoids per axis; `frequency` is the base rate in cycles per meter.
    Procedural { seed: u64, frequency: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Distance of the fronto-parallel plane along world z (meters).
    pub distance: f64,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rectangle { width: f64, height: f64 },
    Disk { radius: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Rectangle { width, height } => dx.abs() <= 0.5 * width && dy.abs() <= 0.5 * height,
            Shape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

/// Motion pattern of the surface seen at a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MotionLabel {
    Background = 0,
    CoDir = 1,
    ContraDir = 2,
    Slow = 3,
    StaticObject = 4,
}

impl MotionLabel {
    pub const ALL: [MotionLabel; 5] = [
        MotionLabel::Background,
        MotionLabel::CoDir,
        MotionLabel::ContraDir,
        MotionLabel::Slow,
        MotionLabel::StaticObject,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionLabel::Background => "background",
            MotionLabel::CoDir => "co_dir",
            MotionLabel::ContraDir => "contra_dir",
            MotionLabel::Slow => "slow",
            MotionLabel::StaticObject => "static_object",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// World `(x, y)` of the sprite centre at frame 0 (meters).
    pub center: [f64; 2],
    /// World z of the sprite plane at frame 0 (meters).
    pub depth: f64,
    /// Meters per frame.
    pub velocity: [f64; 3],
    pub label: MotionLabel,
    pub texture: Texture,
}

impl SceneObject {
    fn center_at(&self, k: f64) -> Vector3<f64> {
        Vector3::new(
            self.center[0] + self.velocity[0] * k,
            self.center[1] + self.velocity[1] * k,
            self.depth + self.velocity[2] * k,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    pub objects: Vec<SceneObject>,
    /// Pose of camera `k + 1` expressed in camera `k`.
    pub camera_motion: Pose,
    pub intrinsics: Intrinsics,
    /// Frame time indices; camera `0` is the world frame.
    pub frames: Vec<i32>,
    #[serde(default)]
    pub target_frame: i32,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec =
            serde_json::from_str(text).map_err(|e| Error::BadSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serializes")
    }

    /// Camera-to-world pose of frame `k`.
    pub fn camera_pose(&self, k: i32) -> Pose {
        let step = if k >= 0 {
            self.camera_motion
        } else {
            self.camera_motion.inverse()
        };
        (0..k.unsigned_abs()).fold(Pose::identity(), |acc, _| acc.compose(&step))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        self.intrinsics
            .validate()
            .map_err(|e| Error::BadSpec(e.to_string()))?;
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.frames.is_empty() || !self.frames.contains(&self.target_frame) {
            return bad(format!("target frame {} not among {:?}", self.target_frame, self.frames));
        }
        let check_texture = |t: &Texture, what: &str| match *t {
            Texture::Constant { value } if !(0.0..=1.0).contains(&value) => {
                bad(format!("{what} texture value {value} outside [0, 1]"))
            }
            Texture::Procedural { frequency, .. } if !(frequency > 0.0 && frequency.is_finite()) => {
                bad(format!("{what} texture frequency must be positive"))
            }
            _ => Ok(()),
        };
        check_texture(&self.background.texture, "background")?;
        if !(self.background.distance > 0.0) {
            return bad("background distance must be positive".into());
        }
        for &k in &self.frames {
            let cam_z = self.camera_pose(k).translation().z;
            if !(self.background.distance - cam_z > BEHIND_CAMERA_Z) {
                return bad(format!("camera passes the background plane at frame {k}"));
            }
            for (i, o) in self.objects.iter().enumerate() {
                let z = o.center_at(k as f64).z;
                if !(z < self.background.distance) {
                    return bad(format!("object {i} lies behind the background at frame {k}"));
                }
                if !(z - cam_z > BEHIND_CAMERA_Z) {
                    return bad(format!("object {i} is behind the camera at frame {k}"));
                }
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            check_texture(&o.texture, &format!("object {i}"))?;
            let ok = match o.shape {
                Shape::Rectangle { width, height } => width > 0.0 && height > 0.0,
                Shape::Disk { radius } => radius > 0.0,
            };
            if !ok {
                return bad(format!("object {i} has a non-positive size"));
            }
        }
        Ok(())
    }
}

/// Band-limited texture with each channel normalized to `[0.1, 0.9]`.
struct CompiledTexture {
    constant: Option<f64>,
    /// Per channel: 4 x-terms then 4 y-terms of (amplitude, cycles/m, phase).
    terms: Vec<[(f64, f64, f64); 8]>,
}

impl CompiledTexture {
    fn new(t: &Texture, channels: usize) -> Self {
        match *t {
            Texture::Constant { value } => CompiledTexture {
                constant: Some(value),
                terms: Vec::new(),
            },
            Texture::Procedural { seed, frequency } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let terms = (0..channels)
                    .map(|_| {
                        let mut t = [(0.0, 0.0, 0.0); 8];
                        for term in t.iter_mut() {
                            *term = (
                                rng.gen_range(0.5..1.0),
                                frequency * rng.gen_range(0.6..1.6),
                                rng.gen_range(0.0..std::f64::consts::TAU),
                            );
                        }
                        t
                    })
                    .collect();
                CompiledTexture {
                    constant: None,
                    terms,
                }
            }
        }
    }

    fn eval(&self, x: f64, y: f64, c: usize) -> f64 {
        if let Some(v) = self.constant {
            return v;
        }
        let terms = &self.terms[c];
        let mut sum = 0.0;
        let mut amp = 0.0;
        for (i, &(a, f, p)) in terms.iter().enumerate() {
            let coord = if i < 4 { x } else { y };
            sum += a * (std::f64::consts::TAU * f * coord + p).sin();
            amp += a;
        }
        0.5 + 0.4 * sum / amp
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Background,
    Object(usize),
}

struct Hit {
    surface: Surface,
    /// World point.
    point: Vector3<f64>,
    /// Depth along the camera's optical axis.
    depth: f64,
}

/// All frames of a rendered scene plus ground truth relative to the target.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub spec: SceneSpec,
    pub frames: Vec<i32>,
    pub target_index: usize,
    pub images: Vec<ImageBuffer>,
    pub depths: Vec<DepthMap>,
    /// Camera-to-world pose per frame.
    pub camera_poses: Vec<Pose>,
    /// Frame indices (into `frames`) of the sources, in order.
    pub source_indices: Vec<usize>,
    /// `T_{t->s}` per source.
    pub gt_poses: Vec<Pose>,
    /// Target pixels hidden from each source.
    pub occlusion: Vec<MaskMap>,
    /// Target-frame [`MotionLabel`] ids.
    pub labels: Grid<u8>,
}

impl RenderedSample {
    pub fn target_image(&self) -> &ImageBuffer {
        &self.images[self.target_index]
    }

    pub fn target_depth(&self) -> &DepthMap {
        &self.depths[self.target_index]
    }

    pub fn source_images(&self) -> Vec<ImageBuffer> {
        self.source_indices.iter().map(|&i| self.images[i].clone()).collect()
    }

    pub fn bundle(&self, scales: usize) -> Result<SampleBundle> {
        SampleBundle::new(
            self.target_image().clone(),
            self.source_images(),
            self.spec.intrinsics,
            scales,
        )
    }

    /// Pixels of the target carrying `label`.
    pub fn label_mask(&self, label: MotionLabel) -> MaskMap {
        self.labels.map(|&l| l == label.id())
    }
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    background: CompiledTexture,
    objects: Vec<CompiledTexture>,
}

impl<'a> Scene<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        Scene {
            spec,
            background: CompiledTexture::new(&spec.background.texture, spec.channels),
            objects: spec
                .objects
                .iter()
                .map(|o| CompiledTexture::new(&o.texture, spec.channels))
                .collect(),
        }
    }

    /// Nearest surface along the ray through `p` of camera `cam` at time `k`.
    fn cast(&self, cam: &Pose, k: f64, p: PixelCoord) -> Option<Hit> {
        let origin = *cam.translation();
        let dir = cam.rotation() * self.spec.intrinsics.ray(p);
        let inv_cam = cam.inverse();
        let mut best: Option<(f64, Surface, Vector3<f64>)> = None;
        let mut consider = |z_plane: f64, surface: Surface, inside: &dyn Fn(&Vector3<f64>) -> bool| {
            if dir.z.abs() < 1e-12 {
                return;
            }
            let t = (z_plane - origin.z) / dir.z;
            if t <= 0.0 {
                return;
            }
            let point = origin + dir * t;
            if !inside(&point) {
                return;
            }
            if best.as_ref().map_or(true, |(bt, _, _)| t < *bt) {
                best = Some((t, surface, point));
            }
        };
        consider(self.spec.background.distance, Surface::Background, &|_| true);
        for (i, o) in self.spec.objects.iter().enumerate() {
            let c = o.center_at(k);
            consider(c.z, Surface::Object(i), &|pt: &Vector3<f64>| {
                o.shape.contains(pt.x - c.x, pt.y - c.y)
            });
        }
        best.map(|(_, surface, point)| Hit {
            surface,
            point,
            depth: inv_cam.transform(&point).z,
        })
    }

    fn shade(&self, hit: &Hit, k: f64, c: usize) -> f64 {
        match hit.surface {
            Surface::Background => self.background.eval(hit.point.x, hit.point.y, c),
            Surface::Object(i) => {
                let centre = self.spec.objects[i].center_at(k);
                self.objects[i].eval(hit.point.x - centre.x, hit.point.y - centre.y, c)
            }
        }
    }

    fn velocity(&self, surface: Surface) -> Vector3<f64> {
        match surface {
            Surface::Background => Vector3::zeros(),
            Surface::Object(i) => Vector3::from(self.spec.objects[i].velocity),
        }
    }
}

/// Ray-casts every frame and derives occlusion and motion labels for the target.
pub fn render(spec: &SceneSpec) -> Result<RenderedSample> {
    spec.validate()?;
    let scene = Scene::new(spec);
    let k = &spec.intrinsics;
    let (w, h, ch) = (k.width, k.height, spec.channels);
    let camera_poses: Vec<Pose> = spec.frames.iter().map(|&f| spec.camera_pose(f)).collect();
    let target_index = spec
        .frames
        .iter()
        .position(|&f| f == spec.target_frame)
        .expect("validated");

    let mut images = Vec::with_capacity(spec.frames.len());
    let mut depths = Vec::with_capacity(spec.frames.len());
    let mut target_hits = Vec::new();
    for (fi, (&frame, cam)) in spec.frames.iter().zip(&camera_poses).enumerate() {
        let t = frame as f64;
        let mut img = ImageBuffer::filled(w, h, ch, 0.0);
        let mut depth = Grid::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let hit = scene
                    .cast(cam, t, PixelCoord::new(x as f64, y as f64))
                    .ok_or_else(|| Error::BadSpec(format!("pixel ({x}, {y}) sees nothing")))?;
                for c in 0..ch {
                    img.set(x, y, c, scene.shade(&hit, t, c));
                }
                *depth.get_mut(x, y) = hit.depth;
                if fi == target_index {
                    target_hits.push(hit);
                }
            }
        }
        images.push(img);
        let valid = Grid::filled(w, h, true);
        depths.push(DepthMap::with_mask(depth, valid)?);
    }

    let labels = Grid::from_fn(w, h, |x, y| match target_hits[y * w + x].surface {
        Surface::Background => MotionLabel::Background.id(),
        Surface::Object(i) => spec.objects[i].label.id(),
    });

    let target_cam = camera_poses[target_index];
    let source_indices: Vec<usize> = (0..spec.frames.len()).filter(|&i| i != target_index).collect();
    let gt_poses = source_indices
        .iter()
        .map(|&i| camera_poses[i].inverse().compose(&target_cam))
        .collect();
    let occlusion = source_indices
        .iter()
        .map(|&si| {
            let cam = &camera_poses[si];
            let inv_cam = cam.inverse();
            let dt = (spec.frames[si] - spec.target_frame) as f64;
            let ts = spec.frames[si] as f64;
            Grid::from_fn(w, h, |x, y| {
                let hit = &target_hits[y * w + x];
                let moved = hit.point + scene.velocity(hit.surface) * dt;
                let in_source = inv_cam.transform(&moved);
                let Some(p) = k.project_point(&in_source) else {
                    return false;
                };
                if !k.contains(p) {
                    return false;
                }
                match scene.cast(cam, ts, p) {
                    Some(first) => first.depth < in_source.z * (1.0 - OCCLUSION_TOLERANCE),
                    None => false,
                }
            })
        })
        .collect();

    Ok(RenderedSample {
        spec: spec.clone(),
        frames: spec.frames.clone(),
        target_index,
        images,
        depths,
        camera_poses,
        source_indices,
        gt_poses,
        occlusion,
        labels,
    })
}

/// Intrinsics shared by every preset: 128x96, roughly 65 degree field of view.
pub fn preset_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 63.5,
        cy: 47.5,
        width: 128,
        height: 96,
    }
}

/// Per-frame camera motion of the presets other than `occlusion` (meters).
pub const PRESET_CAMERA_STEP: [f64; 3] = [0.05, 0.0, 0.1];

/// Named scene with the default seed.
pub fn preset(name: &str) -> Result<SceneSpec> {
    preset_with_seed(name, 42)
}

/// Named scene; `seed` drives every texture.
pub fn preset_with_seed(name: &str, seed: u64) -> Result<SceneSpec> {
    let tex = |i: u64, frequency: f64| Texture::Procedural {
        seed: seed.wrapping_mul(1_000_003).wrapping_add(i),
        frequency,
    };
    let step = PRESET_CAMERA_STEP;
    let object = |shape, center, depth, velocity, label, i| SceneObject {
        shape,
        center,
        depth,
        velocity,
        label,
        texture: tex(i, 2.0),
    };
    let mut camera_step = step;
    let objects = match name {
        "static" => vec![
            object(Shape::Disk { radius: 0.35 }, [-0.8, 0.25], 3.0, [0.0; 3], MotionLabel::StaticObject, 1),
            object(
                Shape::Rectangle { width: 0.6, height: 0.5 },
                [0.9, -0.35],
                3.5,
                [0.0; 3],
                MotionLabel::StaticObject,
                2,
            ),
        ],
        "co_dir" => vec![object(
            Shape::Rectangle { width: 0.8, height: 0.6 },
            [0.3, 0.2],
            3.0,
            step,
            MotionLabel::CoDir,
            1,
        )],
        "contra_dir" => vec![object(
            Shape::Rectangle { width: 0.8, height: 0.6 },
            [0.3, 0.2],
            3.5,
            [-step[0], -step[1], -step[2]],
            MotionLabel::ContraDir,
            1,
        )],
        "occlusion" => {
            camera_step = [0.0, 0.0, 0.15];
            vec![object(Shape::Disk { radius: 0.3 }, [0.1, 0.0], 1.5, [0.0; 3], MotionLabel::StaticObject, 1)]
        }
        "mixed" => vec![
            object(
                Shape::Rectangle { width: 0.6, height: 0.45 },
                [-0.9, -0.4],
                3.0,
                step,
                MotionLabel::CoDir,
                1,
            ),
            object(
                Shape::Rectangle { width: 0.6, height: 0.45 },
                [0.8, -0.3],
                3.5,
                [-step[0], -step[1], -step[2]],
                MotionLabel::ContraDir,
                2,
            ),
            object(Shape::Disk { radius: 0.25 }, [-0.6, 0.55], 3.2, [0.0, 0.0, 0.02], MotionLabel::Slow, 3),
            object(Shape::Disk { radius: 0.25 }, [0.9, 0.6], 2.8, [0.0; 3], MotionLabel::StaticObject, 4),
        ],
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    let spec = SceneSpec {
        background: Background {
            distance: 5.0,
            texture: tex(0, 1.0),
        },
        objects,
        camera_motion: Pose::from_translation(camera_step),
        intrinsics: preset_intrinsics(),
        frames: vec![-1, 0, 1],
        target_frame: 0,
        channels: 3,
    };
    spec.validate()?;
    Ok(spec)
}
