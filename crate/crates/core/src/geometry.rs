//! Pinhole camera model, rigid poses, and target-to-source pixel projection.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, MaskMap};

/// Transformed depths at or below this are treated as behind the camera.
pub const BEHIND_CAMERA_Z: f64 = 1e-9;

/// Below this rotation angle the exponential map uses its first-order form.
const SMALL_ANGLE: f64 = 1e-8;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Shared pinhole intrinsics `K` of one camera at one resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidIntrinsics(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive: {}, {}", self.fx, self.fy));
        }
        if self.width < 2 || self.height < 2 {
            return bad(format!("image must be at least 2x2, got {}x{}", self.width, self.height));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64) {
            return bad(format!("cx = {} outside [0, {})", self.cx, self.width));
        }
        if !(0.0 <= self.cy && self.cy < self.height as f64) {
            return bad(format!("cy = {} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Intrinsics after `level` rounds of 2x2 box downsampling.
    ///
    /// Pixel centres sit at integer coordinates, so the principal point maps
    /// as `(c + 0.5) / 2^level - 0.5`.
    pub fn at_level(&self, level: usize) -> Result<Self> {
        let s = (1usize << level) as f64;
        if self.width % (1 << level) != 0 || self.height % (1 << level) != 0 {
            return Err(Error::BadShape(format!(
                "{}x{} not divisible by 2^{level}",
                self.width, self.height
            )));
        }
        Intrinsics::new(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            self.width >> level,
            self.height >> level,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Viewing ray `K^-1 [u, v, 1]` with unit z.
    #[inline]
    pub fn ray(&self, p: PixelCoord) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point; `None` behind the camera.
    #[inline]
    pub fn project_point(&self, point: &Vector3<f64>) -> Option<PixelCoord> {
        if point.z <= BEHIND_CAMERA_Z {
            return None;
        }
        Some(PixelCoord::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    /// Closed image box `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn contains(&self, p: PixelCoord) -> bool {
        p.u >= 0.0
            && p.u <= (self.width - 1) as f64
            && p.v >= 0.0
            && p.v <= (self.height - 1) as f64
    }
}

/// Continuous pixel coordinate; pixel centres are at integers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    #[inline]
    pub const fn new(u: f64, v: f64) -> Self {
        PixelCoord { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Rigid transform `x -> R x + t`, used as `T_{t->s}` from target to source camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let r = p.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Pose::new(m, Vector3::from(r.translation))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Exactly the identity transform.
    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// Validates `R^T R = I` and `det R = +1` to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (err {err:e})")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Axis-angle rotation followed by translation: `[wx, wy, wz, tx, ty, tz]`.
    pub fn from_tangent(xi: &[f64; 6]) -> Self {
        Pose {
            rotation: so3_exp(&Vector3::new(xi[0], xi[1], xi[2])),
            translation: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    /// Inverse of [`Pose::from_tangent`].
    pub fn tangent(&self) -> [f64; 6] {
        let w = so3_log(&self.rotation);
        let t = self.translation;
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Pose::from_tangent(&[0.0, 0.0, angle, 0.0, 0.0, 0.0])
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies a tangent increment `[dw, dt]`: `R <- exp(dw) R`, `t <- t + dt`.
    ///
    /// This is the perturbation the warp Jacobians are taken against.
    pub fn retract(&self, delta: &[f64; 6]) -> Pose {
        let dr = so3_exp(&Vector3::new(delta[0], delta[1], delta[2]));
        Pose {
            rotation: dr * self.rotation,
            translation: self.translation + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }

    /// Row-major `[R | t]` as 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    /// Parses row-major `[R | t]`, re-orthonormalizing text-rounded rotations.
    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if !(err < 1e-3) || !(m.determinant() > 0.0) {
            return Err(Error::InvalidPose(format!("rotation block is not a rotation (err {err:e})")));
        }
        let r = Rotation3::from_matrix(&m);
        Pose::new(*r.matrix(), t)
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// Rodrigues exponential map with a first-order branch for tiny angles.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + wx;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + wx * a + wx * wx * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

#[inline]
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Depth clamps applied when deciding validity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCaps {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthCaps {
    fn default() -> Self {
        DepthCaps {
            min: 0.1,
            max: 100.0,
        }
    }
}

impl DepthCaps {
    #[inline]
    pub fn admits(&self, d: f64) -> bool {
        d.is_finite() && d >= self.min && d <= self.max
    }
}

/// Metric depth in meters with per-pixel validity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub values: Grid<f64>,
    pub valid: MaskMap,
}

impl DepthMap {
    /// Marks pixels valid where the value falls inside the default caps.
    pub fn new(values: Grid<f64>) -> Self {
        Self::with_caps(values, DepthCaps::default())
    }

    pub fn with_caps(values: Grid<f64>, caps: DepthCaps) -> Self {
        let valid = values.map(|&d| caps.admits(d));
        DepthMap { values, valid }
    }

    /// Uses an explicit validity mask; invalid entries are left as given.
    pub fn with_mask(values: Grid<f64>, valid: MaskMap) -> Result<Self> {
        if !values.same_shape(&valid) {
            return Err(Error::ShapeMismatch("depth values and validity mask".into()));
        }
        Ok(DepthMap { values, valid })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self::new(Grid::filled(width, height, depth))
    }

    /// Depth from inverse depth; non-positive inverse depth is invalid.
    pub fn from_inverse(inv: &Grid<f64>) -> Self {
        Self::new(inv.map(|&d| if d > 0.0 { 1.0 / d } else { f64::INFINITY }))
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.values.get(x, y))
        } else {
            None
        }
    }
}

/// Projects target pixel `p_t` at `depth` into the source view of `pose`.
///
/// The returned coordinate may fall outside the image.
pub fn project(p_t: PixelCoord, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<PixelCoord> {
    project_with_depth(p_t, depth, pose, k).map(|(p, _)| p)
}

/// As [`project`], also returning the point's depth in the source camera.
pub fn project_with_depth(
    p_t: PixelCoord,
    depth: f64,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<(PixelCoord, f64)> {
    let x_s = pose.transform(&(k.ray(p_t) * depth));
    // the identity maps every pixel to itself without rounding
    if pose.is_identity() && x_s.z > BEHIND_CAMERA_Z {
        return Ok((p_t, x_s.z));
    }
    match k.project_point(&x_s) {
        Some(p) if p.is_finite() => Ok((p, x_s.z)),
        _ => Err(Error::BehindCamera { z: x_s.z }),
    }
}

/// `[p_s within image box]` for every target pixel.
pub fn principled_mask(depth: &DepthMap, pose: &Pose, k: &Intrinsics) -> MaskMap {
    Grid::from_fn(depth.width(), depth.height(), |x, y| match depth.at(x, y) {
        Some(d) => project(PixelCoord::new(x as f64, y as f64), d, pose, k)
            .map(|p| k.contains(p))
            .unwrap_or(false),
        None => false,
    })
}
