//! Inverse warping of a source frame into the target view, with analytic
//! derivatives of the synthesized intensities.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, PixelCoord, Pose};
use crate::image::{Grid, ImageBuffer, MaskMap};

/// Source view resampled onto the target pixel grid.
#[derive(Clone, Debug)]
pub struct WarpResult {
    pub image: ImageBuffer,
    pub in_bounds: MaskMap,
    /// Sampling locations `p_s`; NaN where the point is behind the camera.
    pub coords: Grid<PixelCoord>,
}

/// Per-pixel derivatives of the synthesized image.
///
/// Pose derivatives are against the increment of [`Pose::retract`],
/// ordered `[wx, wy, wz, tx, ty, tz]`.
#[derive(Clone, Debug)]
pub struct WarpJacobians {
    width: usize,
    height: usize,
    channels: usize,
    d_depth: Vec<f64>,
    d_pose: Vec<f64>,
}

impl WarpJacobians {
    #[inline]
    pub fn d_intensity_d_depth(&self, x: usize, y: usize, c: usize) -> f64 {
        self.d_depth[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn d_intensity_d_pose(&self, x: usize, y: usize, c: usize) -> [f64; 6] {
        let i = ((y * self.width + x) * self.channels + c) * 6;
        let mut out = [0.0; 6];
        out.copy_from_slice(&self.d_pose[i..i + 6]);
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Flat `H*W*C` buffer of depth derivatives.
    pub fn depth_slice(&self) -> &[f64] {
        &self.d_depth
    }

    /// Flat `H*W*C*6` buffer of pose derivatives.
    pub fn pose_slice(&self) -> &[f64] {
        &self.d_pose
    }
}

/// Bilinear interpolation cell; `x1 == x0` on the last column (likewise rows).
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Cell {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub a: f64,
    pub b: f64,
}

impl Cell {
    #[inline]
    pub fn locate(width: usize, height: usize, p: PixelCoord) -> Option<Cell> {
        let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
        if !(p.u >= 0.0 && p.u <= wmax && p.v >= 0.0 && p.v <= hmax) {
            return None;
        }
        let x0 = (p.u.floor() as usize).min(width - 1);
        let y0 = (p.v.floor() as usize).min(height - 1);
        Some(Cell {
            x0,
            y0,
            x1: (x0 + 1).min(width - 1),
            y1: (y0 + 1).min(height - 1),
            a: p.u - x0 as f64,
            b: p.v - y0 as f64,
        })
    }

    #[inline]
    pub fn sample(&self, img: &ImageBuffer, c: usize) -> f64 {
        let (a, b) = (self.a, self.b);
        (1.0 - a) * (1.0 - b) * img.get(self.x0, self.y0, c)
            + a * (1.0 - b) * img.get(self.x1, self.y0, c)
            + (1.0 - a) * b * img.get(self.x0, self.y1, c)
            + a * b * img.get(self.x1, self.y1, c)
    }

    /// `(dI/du, dI/dv)` with the cell held fixed.
    #[inline]
    pub fn gradient(&self, img: &ImageBuffer, c: usize) -> (f64, f64) {
        let (a, b) = (self.a, self.b);
        let i00 = img.get(self.x0, self.y0, c);
        let i10 = img.get(self.x1, self.y0, c);
        let i01 = img.get(self.x0, self.y1, c);
        let i11 = img.get(self.x1, self.y1, c);
        let du = if self.x1 == self.x0 {
            0.0
        } else {
            (1.0 - b) * (i10 - i00) + b * (i11 - i01)
        };
        let dv = if self.y1 == self.y0 {
            0.0
        } else {
            (1.0 - a) * (i01 - i00) + a * (i11 - i10)
        };
        (du, dv)
    }
}

/// Four-neighbour bilinear interpolation on the closed box `[0, W-1] x [0, H-1]`.
pub fn bilinear_sample(img: &ImageBuffer, p: PixelCoord) -> Result<Vec<f64>> {
    let cell = Cell::locate(img.width(), img.height(), p).ok_or(Error::OutOfBounds {
        u: p.u,
        v: p.v,
        width: img.width(),
        height: img.height(),
    })?;
    Ok((0..img.channels()).map(|c| cell.sample(img, c)).collect())
}

fn check_shapes(source: &ImageBuffer, depth: &DepthMap, k: &Intrinsics) -> Result<()> {
    if source.width() != k.width || source.height() != k.height {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{} vs intrinsics {}x{}",
            source.width(),
            source.height(),
            k.width,
            k.height
        )));
    }
    if depth.width() != k.width || depth.height() != k.height {
        return Err(Error::ShapeMismatch(format!(
            "depth {}x{} vs intrinsics {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    Ok(())
}

/// Geometry of one target pixel after projection.
struct PixelWarp {
    coord: PixelCoord,
    cell: Option<Cell>,
    /// Source-camera point `R D r + t`.
    point: Vector3<f64>,
    /// Rotated ray `R r`.
    rotated_ray: Vector3<f64>,
    depth: f64,
}

#[inline]
fn warp_pixel(x: usize, y: usize, depth: &DepthMap, pose: &Pose, k: &Intrinsics) -> Option<PixelWarp> {
    let d = depth.at(x, y)?;
    let p_t = PixelCoord::new(x as f64, y as f64);
    let ray = k.ray(p_t);
    let rotated_ray = pose.rotation() * ray;
    // same operation order as geometry::project so masks agree bit-for-bit
    let point = pose.transform(&(ray * d));
    let coord = k.project_point(&point)?;
    let coord = if pose.is_identity() { p_t } else { coord };
    if !coord.is_finite() {
        return None;
    }
    Some(PixelWarp {
        coord,
        cell: Cell::locate(k.width, k.height, coord),
        point,
        rotated_ray,
        depth: d,
    })
}

/// Synthesizes the target view by sampling `source` at projected locations.
///
/// Out-of-bounds pixels carry intensity 0 and `in_bounds = false`.
pub fn synthesize_view(
    source: &ImageBuffer,
    depth: &DepthMap,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<WarpResult> {
    check_shapes(source, depth, k)?;
    let (w, h, ch) = (k.width, k.height, source.channels());
    let mut image = vec![0.0; w * h * ch];
    let mut in_bounds = vec![false; w * h];
    let mut coords = vec![PixelCoord::new(f64::NAN, f64::NAN); w * h];
    image
        .par_chunks_mut(w * ch)
        .zip(in_bounds.par_chunks_mut(w))
        .zip(coords.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((img_row, mask_row), coord_row))| {
            for x in 0..w {
                let Some(pw) = warp_pixel(x, y, depth, pose, k) else {
                    continue;
                };
                coord_row[x] = pw.coord;
                if let Some(cell) = pw.cell {
                    mask_row[x] = true;
                    for c in 0..ch {
                        img_row[x * ch + c] = cell.sample(source, c);
                    }
                }
            }
        });
    Ok(WarpResult {
        image: ImageBuffer::new(w, h, ch, image)?,
        in_bounds: Grid::from_vec(w, h, in_bounds)?,
        coords: Grid::from_vec(w, h, coords)?,
    })
}

/// Analytic `dI/dD` and `dI/dxi` by the chain rule through projection and
/// the bilinear weights, holding each pixel's interpolation cell fixed.
pub fn warp_jacobians(
    source: &ImageBuffer,
    depth: &DepthMap,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<WarpJacobians> {
    synthesize_with_jacobians(source, depth, pose, k).map(|(_, j)| j)
}

/// One pass producing both the warped view and its Jacobians.
pub fn synthesize_with_jacobians(
    source: &ImageBuffer,
    depth: &DepthMap,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<(WarpResult, WarpJacobians)> {
    check_shapes(source, depth, k)?;
    let (w, h, ch) = (k.width, k.height, source.channels());
    let mut image = vec![0.0; w * h * ch];
    let mut in_bounds = vec![false; w * h];
    let mut coords = vec![PixelCoord::new(f64::NAN, f64::NAN); w * h];
    let mut d_depth = vec![0.0; w * h * ch];
    let mut d_pose = vec![0.0; w * h * ch * 6];
    image
        .par_chunks_mut(w * ch)
        .zip(in_bounds.par_chunks_mut(w))
        .zip(coords.par_chunks_mut(w))
        .zip(d_depth.par_chunks_mut(w * ch))
        .zip(d_pose.par_chunks_mut(w * ch * 6))
        .enumerate()
        .for_each(|(y, ((((img_row, mask_row), coord_row), dd_row), dp_row))| {
            for x in 0..w {
                let Some(pw) = warp_pixel(x, y, depth, pose, k) else {
                    continue;
                };
                coord_row[x] = pw.coord;
                let Some(cell) = pw.cell else {
                    continue;
                };
                mask_row[x] = true;

                let p = pw.point;
                let iz = 1.0 / p.z;
                // d(u, v) / d(source point)
                let du = Vector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz);
                let dv = Vector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz);
                let du_dd = du.dot(&pw.rotated_ray);
                let dv_dd = dv.dot(&pw.rotated_ray);
                // d(point)/d(omega) = -[R X]_x, with R X = point - t
                let q = pw.rotated_ray * pw.depth;
                let du_dw = q.cross(&du);
                let dv_dw = q.cross(&dv);

                for c in 0..ch {
                    img_row[x * ch + c] = cell.sample(source, c);
                    let (gu, gv) = cell.gradient(source, c);
                    dd_row[x * ch + c] = gu * du_dd + gv * dv_dd;
                    let j = &mut dp_row[(x * ch + c) * 6..(x * ch + c) * 6 + 6];
                    for i in 0..3 {
                        j[i] = gu * du_dw[i] + gv * dv_dw[i];
                        j[3 + i] = gu * du[i] + gv * dv[i];
                    }
                }
            }
        });

    Ok((
        WarpResult {
            image: ImageBuffer::new(w, h, ch, image)?,
            in_bounds: Grid::from_vec(w, h, in_bounds)?,
            coords: Grid::from_vec(w, h, coords)?,
        },
        WarpJacobians {
            width: w,
            height: h,
            channels: ch,
            d_depth,
            d_pose,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::principled_mask;

    fn smooth_image(w: usize, h: usize, ch: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, ch, |x, y, c| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (0.31 * x + 0.7 * c as f64).sin() + 0.2 * (0.23 * y + 0.4 * x * 0.1).cos()
        })
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let img = smooth_image(8, 10, 2);
        let s = bilinear_sample(&img, PixelCoord::new(3.0, 7.0)).unwrap();
        assert_eq!(s, img.pixel(3, 7).to_vec());
    }

    #[test]
    fn hand_interpolation() {
        let img = ImageBuffer::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&img, PixelCoord::new(0.5, 0.0)).unwrap(), vec![0.5]);
        // last column uses the degenerate cell
        assert_eq!(bilinear_sample(&img, PixelCoord::new(1.0, 1.0)).unwrap(), vec![1.0]);
    }

    #[test]
    fn constant_image_samples_constant() {
        let img = ImageBuffer::filled(5, 4, 3, 0.37);
        for &(u, v) in &[(0.0, 0.0), (1.3, 2.9), (4.0, 3.0), (3.99, 0.01)] {
            let s = bilinear_sample(&img, PixelCoord::new(u, v)).unwrap();
            assert!(s.iter().all(|&x| (x - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn out_of_support_is_an_error() {
        let img = ImageBuffer::filled(5, 4, 1, 0.0);
        assert!(matches!(
            bilinear_sample(&img, PixelCoord::new(4.0001, 1.0)),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(bilinear_sample(&img, PixelCoord::new(-1e-12, 1.0)).is_err());
    }

    #[test]
    fn identity_pose_reproduces_source() {
        let k = Intrinsics::new(30.0, 30.0, 11.5, 7.5, 24, 16).unwrap();
        let src = smooth_image(24, 16, 3);
        let depth = DepthMap::new(Grid::from_fn(24, 16, |x, y| 2.0 + 0.1 * (x + y) as f64));
        let wr = synthesize_view(&src, &depth, &Pose::identity(), &k).unwrap();
        assert_eq!(wr.image, src);
        assert_eq!(wr.in_bounds.count_true(), 24 * 16);
    }

    #[test]
    fn in_bounds_equals_principled_mask() {
        let k = Intrinsics::new(30.0, 30.0, 11.5, 7.5, 24, 16).unwrap();
        let src = smooth_image(24, 16, 1);
        let depth = DepthMap::new(Grid::from_fn(24, 16, |x, y| 1.5 + 0.05 * (x * y) as f64));
        let pose = Pose::from_tangent(&[0.02, -0.05, 0.01, 0.3, -0.1, 0.2]);
        let wr = synthesize_view(&src, &depth, &pose, &k).unwrap();
        assert_eq!(wr.in_bounds, principled_mask(&depth, &pose, &k));
        for (i, &inb) in wr.in_bounds.as_slice().iter().enumerate() {
            if !inb {
                assert_eq!(wr.image.as_slice()[i], 0.0);
            }
        }
    }

    #[test]
    fn plane_translation_is_a_horizontal_shift() {
        let (w, h) = (40usize, 20usize);
        let k = Intrinsics::new(50.0, 50.0, 19.5, 9.5, w, h).unwrap();
        let d = 5.0;
        let tx = 0.23;
        let shift = k.fx * tx / d;
        let f = |u: f64, v: f64| 0.5 + 0.3 * (0.2 * u).sin() * (0.3 * v).cos();
        let src = ImageBuffer::from_fn(w, h, 1, |x, y, _| f(x as f64, y as f64));
        let depth = DepthMap::constant(w, h, d);
        let wr = synthesize_view(&src, &depth, &Pose::from_translation([tx, 0.0, 0.0]), &k).unwrap();
        // the oracle shifts the lattice directly, interpolating linearly along x only
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 + shift;
                if u > (w - 1) as f64 {
                    assert!(!*wr.in_bounds.get(x, y));
                    continue;
                }
                let x0 = u.floor() as usize;
                let a = u - x0 as f64;
                let expect = (1.0 - a) * src.get(x0, y, 0) + a * src.get((x0 + 1).min(w - 1), y, 0);
                assert!((wr.image.get(x, y, 0) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_source_has_zero_jacobians() {
        let k = Intrinsics::new(30.0, 30.0, 11.5, 7.5, 24, 16).unwrap();
        let src = ImageBuffer::filled(24, 16, 2, 0.6);
        let depth = DepthMap::constant(24, 16, 3.0);
        let pose = Pose::from_tangent(&[0.01, 0.02, -0.01, 0.1, 0.0, 0.05]);
        let j = warp_jacobians(&src, &depth, &pose, &k).unwrap();
        assert!(j.depth_slice().iter().all(|&v| v == 0.0));
        assert!(j.pose_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn principal_point_ignores_forward_motion() {
        let k = Intrinsics::new(30.0, 30.0, 12.0, 8.0, 24, 16).unwrap();
        let src = smooth_image(24, 16, 1);
        let depth = DepthMap::constant(24, 16, 3.0);
        let j = warp_jacobians(&src, &depth, &Pose::identity(), &k).unwrap();
        assert_eq!(j.d_intensity_d_pose(12, 8, 0)[5], 0.0);
    }
}
