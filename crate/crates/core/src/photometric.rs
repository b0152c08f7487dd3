//! SSIM + L1 photometric error, edge-aware smoothness, and image pyramids.
//!
//! Each differentiable quantity comes with a `*_backward` companion that
//! maps an upstream per-pixel weight to a gradient on its second argument.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, ImageBuffer, InverseDepthMap, MaskMap};

/// Local window weighting for SSIM statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SsimWindow {
    Uniform,
    Gaussian { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricConfig {
    /// Weight of the SSIM term against L1.
    pub alpha: f64,
    /// Odd window side length.
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            alpha: 0.85,
            ssim_window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: SsimWindow::Uniform,
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {} not in [0, 1]", self.alpha)));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ssim_window = {} must be odd and >= 3",
                self.ssim_window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidConfig("SSIM constants must be positive".into()));
        }
        if let SsimWindow::Gaussian { sigma } = self.window {
            if !(sigma > 0.0) {
                return Err(Error::InvalidConfig("gaussian sigma must be positive".into()));
            }
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let n = self.ssim_window;
        let r = (n / 2) as f64;
        let mut w: Vec<f64> = (0..n * n)
            .map(|i| match self.window {
                SsimWindow::Uniform => 1.0,
                SsimWindow::Gaussian { sigma } => {
                    let (dx, dy) = ((i % n) as f64 - r, (i / n) as f64 - r);
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }
}

/// Per-pixel photometric error with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub values: Grid<f64>,
    pub valid: MaskMap,
}

impl ErrorMap {
    pub fn all_valid(values: Grid<f64>) -> Self {
        let valid = Grid::filled(values.width(), values.height(), true);
        ErrorMap { values, valid }
    }

    pub fn with_valid(values: Grid<f64>, valid: MaskMap) -> Result<Self> {
        if !values.same_shape(&valid) {
            return Err(Error::ShapeMismatch("error values and validity mask".into()));
        }
        Ok(ErrorMap { values, valid })
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }
}

/// Mirror index for reflective padding (edge pixel not repeated).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j.clamp(0, n - 1) as usize
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Window statistics of one pixel and channel, raw second moments.
#[derive(Clone, Copy, Default)]
struct Moments {
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn gather(a: &ImageBuffer, b: &ImageBuffer, x: usize, y: usize, c: usize, n: usize, w: &[f64]) -> Self {
        let r = (n / 2) as isize;
        let mut m = Moments::default();
        for j in 0..n {
            let yy = reflect(y as isize + j as isize - r, a.height());
            for i in 0..n {
                let xx = reflect(x as isize + i as isize - r, a.width());
                let wt = w[j * n + i];
                let (va, vb) = (a.get(xx, yy, c), b.get(xx, yy, c));
                m.mx += wt * va;
                m.my += wt * vb;
                m.sxx += wt * va * va;
                m.syy += wt * vb * vb;
                m.sxy += wt * va * vb;
            }
        }
        m
    }

    fn ssim(&self, c1: f64, c2: f64) -> f64 {
        let (n1, n2, d1, d2) = self.terms(c1, c2);
        n1 * n2 / (d1 * d2)
    }

    fn terms(&self, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
        let vx = self.sxx - self.mx * self.mx;
        let vy = self.syy - self.my * self.my;
        let cov = self.sxy - self.mx * self.my;
        (
            2.0 * self.mx * self.my + c1,
            2.0 * cov + c2,
            self.mx * self.mx + self.my * self.my + c1,
            vx + vy + c2,
        )
    }

    /// SSIM and its partials with respect to `(my, syy, sxy)`.
    fn ssim_partials(&self, c1: f64, c2: f64) -> (f64, [f64; 3]) {
        let (n1, n2, d1, d2) = self.terms(c1, c2);
        let s = n1 * n2 / (d1 * d2);
        let (mx, my) = (self.mx, self.my);
        // d(n1, n2, d1, d2)/d(my); syy enters only d2, sxy only n2
        let dn1 = 2.0 * mx;
        let dn2 = -2.0 * mx;
        let dd1 = 2.0 * my;
        let dd2 = -2.0 * my;
        let d_my = (dn1 * n2 + n1 * dn2) / (d1 * d2) - s * (dd1 * d2 + d1 * dd2) / (d1 * d2);
        let d_syy = -s / d2;
        let d_sxy = 2.0 * n1 / (d1 * d2);
        (s, [d_my, d_syy, d_sxy])
    }
}

/// Local-window SSIM, channel-averaged, with reflective borders.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer, cfg: &PhotometricConfig) -> Result<Grid<f64>> {
    check_pair(a, b)?;
    cfg.validate()?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let weights = cfg.weights();
    let inv_ch = 1.0 / ch as f64;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..ch {
                s += Moments::gather(a, b, x, y, c, cfg.ssim_window, &weights).ssim(cfg.c1, cfg.c2);
            }
            *v = s * inv_ch;
        }
    });
    Grid::from_vec(w, h, out)
}

/// `alpha (1 - SSIM) / 2 + (1 - alpha) |a - b|`, L1 averaged over channels.
pub fn photometric_error(a: &ImageBuffer, b: &ImageBuffer, cfg: &PhotometricConfig) -> Result<ErrorMap> {
    let ssim = ssim_map(a, b, cfg)?;
    let ch = a.channels();
    let inv_ch = 1.0 / ch as f64;
    let values = Grid::from_fn(a.width(), a.height(), |x, y| {
        let l1: f64 = a
            .pixel(x, y)
            .iter()
            .zip(b.pixel(x, y))
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            * inv_ch;
        let dssim = ((1.0 - *ssim.get(x, y)) * 0.5).clamp(0.0, 1.0);
        cfg.alpha * dssim + (1.0 - cfg.alpha) * l1
    });
    Ok(ErrorMap::all_valid(values))
}

/// Gradient of `sum_p upstream(p) * PE(a, b)(p)` with respect to `b`,
/// as a flat `H*W*C` buffer.
pub fn photometric_error_backward(
    a: &ImageBuffer,
    b: &ImageBuffer,
    cfg: &PhotometricConfig,
    upstream: &Grid<f64>,
) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    cfg.validate()?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if upstream.width() != w || upstream.height() != h {
        return Err(Error::ShapeMismatch("upstream weights vs image".into()));
    }
    let n = cfg.ssim_window;
    let r = (n / 2) as isize;
    let weights = cfg.weights();
    let inv_ch = 1.0 / ch as f64;

    // per pixel and channel: (d/dmy, d/dsyy, d/dsxy) scaled by the upstream weight
    let mut coef = vec![[0.0f64; 3]; w * h * ch];
    coef.par_chunks_mut(w * ch).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let g = *upstream.get(x, y);
            if g == 0.0 {
                continue;
            }
            let mut partials = Vec::with_capacity(ch);
            let mut s_mean = 0.0;
            for c in 0..ch {
                let (s, d) = Moments::gather(a, b, x, y, c, n, &weights).ssim_partials(cfg.c1, cfg.c2);
                s_mean += s * inv_ch;
                partials.push(d);
            }
            let raw = (1.0 - s_mean) * 0.5;
            if !(0.0..=1.0).contains(&raw) {
                continue; // clamped
            }
            let scale = -0.5 * cfg.alpha * g * inv_ch;
            for (c, d) in partials.into_iter().enumerate() {
                row[x * ch + c] = [scale * d[0], scale * d[1], scale * d[2]];
            }
        }
    });

    let mut grad = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let [g_my, g_syy, g_sxy] = coef[(y * w + x) * ch + c];
                if g_my == 0.0 && g_syy == 0.0 && g_sxy == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let yy = reflect(y as isize + j as isize - r, h);
                    for i in 0..n {
                        let xx = reflect(x as isize + i as isize - r, w);
                        let wt = weights[j * n + i];
                        let vb = b.get(xx, yy, c);
                        let va = a.get(xx, yy, c);
                        grad[(yy * w + xx) * ch + c] += wt * (g_my + 2.0 * g_syy * vb + g_sxy * va);
                    }
                }
            }
        }
    }

    let l1_scale = (1.0 - cfg.alpha) * inv_ch;
    for y in 0..h {
        for x in 0..w {
            let g = *upstream.get(x, y);
            if g == 0.0 {
                continue;
            }
            for c in 0..ch {
                let diff = b.get(x, y, c) - a.get(x, y, c);
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[(y * w + x) * ch + c] += g * l1_scale * sign;
            }
        }
    }
    Ok(grad)
}

/// Edge-aware smoothness of mean-normalized inverse depth.
///
/// Forward differences; the last column (row) has no x (y) term. The sum is
/// averaged over all `H*W` pixels.
pub fn smoothness_loss(inv_depth: &InverseDepthMap, image: &ImageBuffer) -> Result<f64> {
    smoothness_with_gradient(inv_depth, image).map(|(l, _)| l)
}

/// Smoothness loss and its gradient with respect to the inverse depth.
pub fn smoothness_with_gradient(
    inv_depth: &InverseDepthMap,
    image: &ImageBuffer,
) -> Result<(f64, Grid<f64>)> {
    let (w, h) = (inv_depth.width(), inv_depth.height());
    if image.width() != w || image.height() != h {
        return Err(Error::ShapeMismatch("inverse depth vs image".into()));
    }
    let mean = inv_depth.mean();
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::DegenerateDepth);
    }
    let n = (w * h) as f64;
    let inv_ch = 1.0 / image.channels() as f64;
    let edge = |x0: usize, y0: usize, x1: usize, y1: usize| {
        let g: f64 = image
            .pixel(x0, y0)
            .iter()
            .zip(image.pixel(x1, y1))
            .map(|(p, q)| (q - p).abs())
            .sum::<f64>()
            * inv_ch;
        (-g).exp()
    };
    let norm = inv_depth.map(|&d| d / mean);
    let mut loss = 0.0;
    let mut g_norm = Grid::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let here = *norm.get(x, y);
            if x + 1 < w {
                let diff = *norm.get(x + 1, y) - here;
                let wt = edge(x, y, x + 1, y);
                loss += diff.abs() * wt;
                let s = diff.signum() * wt / n;
                if diff != 0.0 {
                    *g_norm.get_mut(x + 1, y) += s;
                    *g_norm.get_mut(x, y) -= s;
                }
            }
            if y + 1 < h {
                let diff = *norm.get(x, y + 1) - here;
                let wt = edge(x, y, x, y + 1);
                loss += diff.abs() * wt;
                let s = diff.signum() * wt / n;
                if diff != 0.0 {
                    *g_norm.get_mut(x, y + 1) += s;
                    *g_norm.get_mut(x, y) -= s;
                }
            }
        }
    }
    loss /= n;
    // d(norm_j)/d(d_k) = (delta_jk - norm_j / n) / mean
    let coupling: f64 = g_norm
        .as_slice()
        .iter()
        .zip(norm.as_slice())
        .map(|(g, s)| g * s)
        .sum::<f64>()
        / n;
    let grad = g_norm.map(|&g| (g - coupling) / mean);
    Ok((loss, grad))
}

/// `levels` images, level `r` downsampled `r` times by 2x2 box averaging.
pub fn build_pyramid(img: &ImageBuffer, levels: usize) -> Result<Vec<ImageBuffer>> {
    if levels == 0 {
        return Err(Error::BadShape("pyramid needs at least one level".into()));
    }
    let div = 1usize << (levels - 1);
    if img.width() % div != 0 || img.height() % div != 0 {
        return Err(Error::BadShape(format!(
            "{}x{} not divisible by {div} for {levels} levels",
            img.width(),
            img.height()
        )));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").downsample2()?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, ch: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, ch, |_, _, _| rng.gen::<f64>())
    }

    fn cfg() -> PhotometricConfig {
        PhotometricConfig::default()
    }

    #[test]
    fn self_similarity_is_one() {
        let a = random_image(9, 7, 3, 1);
        let s = ssim_map(&a, &a, &cfg()).unwrap();
        assert!(s.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_images_hand_value() {
        let a = ImageBuffer::filled(6, 5, 1, 0.3);
        let b = ImageBuffer::filled(6, 5, 1, 0.7);
        let c1 = cfg().c1;
        let expect = (2.0 * 0.3 * 0.7 + c1) / (0.3f64.powi(2) + 0.7f64.powi(2) + c1);
        let s = ssim_map(&a, &b, &cfg()).unwrap();
        assert!(s.as_slice().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn complement_is_dissimilar() {
        let a = random_image(10, 8, 1, 3);
        let b = ImageBuffer::from_fn(10, 8, 1, |x, y, c| 1.0 - a.get(x, y, c));
        let s = ssim_map(&a, &b, &cfg()).unwrap();
        assert!(s.as_slice().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn error_of_identical_images_is_zero() {
        let a = random_image(8, 8, 3, 4);
        let e = photometric_error(&a, &a, &cfg()).unwrap();
        assert!(e.values.as_slice().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn alpha_zero_is_plain_l1() {
        let a = random_image(8, 6, 3, 5);
        let b = random_image(8, 6, 3, 6);
        let c = PhotometricConfig { alpha: 0.0, ..cfg() };
        let e = photometric_error(&a, &b, &c).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let l1: f64 = (0..3).map(|k| (a.get(x, y, k) - b.get(x, y, k)).abs()).sum::<f64>() / 3.0;
                assert!((*e.values.get(x, y) - l1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn black_white_hand_value() {
        let a = ImageBuffer::filled(5, 5, 1, 0.0);
        let b = ImageBuffer::filled(5, 5, 1, 1.0);
        let c1 = cfg().c1;
        let expect = 0.85 * (1.0 - c1 / (1.0 + c1)) / 2.0 + 0.15;
        let e = photometric_error(&a, &b, &cfg()).unwrap();
        assert!(e.values.as_slice().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_config() {
        let a = ImageBuffer::filled(5, 5, 1, 0.0);
        for bad in [
            PhotometricConfig { alpha: 1.5, ..cfg() },
            PhotometricConfig { ssim_window: 4, ..cfg() },
            PhotometricConfig { c1: 0.0, ..cfg() },
        ] {
            assert!(ssim_map(&a, &a, &bad).is_err());
        }
    }

    #[test]
    fn smoothness_constant_is_zero() {
        let d = Grid::filled(6, 4, 0.3);
        let img = random_image(6, 4, 3, 7);
        assert_eq!(smoothness_loss(&d, &img).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_hand_example() {
        let d = Grid::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let img = ImageBuffer::filled(2, 1, 1, 0.5);
        assert_eq!(smoothness_loss(&d, &img).unwrap(), 0.5);
    }

    #[test]
    fn smoothness_rejects_zero_depth() {
        let d = Grid::filled(3, 3, 0.0);
        let img = ImageBuffer::filled(3, 3, 1, 0.5);
        assert!(matches!(smoothness_loss(&d, &img), Err(Error::DegenerateDepth)));
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Grid::from_fn(7, 5, |_, _| 0.2 + rng.gen::<f64>());
        let img = random_image(7, 5, 3, 12);
        let (_, g) = smoothness_with_gradient(&d, &img).unwrap();
        let h = 1e-6;
        for (i, &ga) in g.as_slice().iter().enumerate() {
            let mut p = d.clone();
            p.as_mut_slice()[i] += h;
            let mut m = d.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (smoothness_loss(&p, &img).unwrap() - smoothness_loss(&m, &img).unwrap()) / (2.0 * h);
            assert!((ga - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {ga} vs {fd}");
        }
    }

    #[test]
    fn error_gradient_matches_finite_differences() {
        let a = random_image(6, 5, 2, 21);
        let b = random_image(6, 5, 2, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let up = Grid::from_fn(6, 5, |_, _| rng.gen::<f64>());
        for window in [SsimWindow::Uniform, SsimWindow::Gaussian { sigma: 1.0 }] {
            let c = PhotometricConfig { window, ..cfg() };
            let objective = |img: &ImageBuffer| {
                let e = photometric_error(&a, img, &c).unwrap();
                e.values.as_slice().iter().zip(up.as_slice()).map(|(p, q)| p * q).sum::<f64>()
            };
            let g = photometric_error_backward(&a, &b, &c, &up).unwrap();
            let h = 1e-7;
            for i in 0..g.len() {
                let mut p = b.clone();
                p.as_mut_slice()[i] += h;
                let mut m = b.clone();
                m.as_mut_slice()[i] -= h;
                let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "{i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn pyramid_shapes_and_values() {
        let img = random_image(8, 4, 2, 9);
        assert_eq!(build_pyramid(&img, 1).unwrap(), vec![img.clone()]);
        let p = build_pyramid(&img, 3).unwrap();
        assert_eq!((p[2].width(), p[2].height()), (2, 1));
        let c = ImageBuffer::filled(8, 8, 1, 0.25);
        assert!(build_pyramid(&c, 4).unwrap().iter().all(|l| l.as_slice().iter().all(|&v| v == 0.25)));
        let two = ImageBuffer::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(build_pyramid(&two, 2).unwrap()[1].as_slice(), &[0.5]);
        assert!(matches!(build_pyramid(&random_image(12, 6, 1, 0), 3), Err(Error::BadShape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn error_is_symmetric_and_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let a = random_image(7, 6, 3, seed_a);
            let b = random_image(7, 6, 3, seed_b + 5000);
            let ab = photometric_error(&a, &b, &cfg()).unwrap();
            let ba = photometric_error(&b, &a, &cfg()).unwrap();
            for (p, q) in ab.values.as_slice().iter().zip(ba.values.as_slice()) {
                prop_assert!((p - q).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(p));
            }
            let s = ssim_map(&a, &b, &cfg()).unwrap();
            prop_assert!(s.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn smoothness_is_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Grid::from_fn(6, 5, |_, _| 0.1 + rng.gen::<f64>());
            let img = random_image(6, 5, 1, seed);
            let a = smoothness_loss(&d, &img).unwrap();
            let b = smoothness_loss(&d.map(|v| v * k), &img).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
