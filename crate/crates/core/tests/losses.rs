use photomask::image::InverseDepthMap;
use photomask::photometric::photometric_error;
use photomask::{
    preset, preset_with_seed, render, scale_weights, total_loss, ImageBuffer, Intrinsics,
    LossConfig, MaskFlags, OutlierConfig, PhotometricConfig, Pose, SampleBundle,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Independent re-implementation: plain loops, no shared helpers.
mod brute {
    use super::*;

    fn reflect(i: isize, n: usize) -> usize {
        let n = n as isize;
        (if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i }) as usize
    }

    pub fn pe(a: &ImageBuffer, b: &ImageBuffer, x: usize, y: usize) -> f64 {
        let (c1, c2, alpha) = (1e-4, 9e-4, 0.85);
        let ch = a.channels();
        let mut ssim = 0.0;
        let mut l1 = 0.0;
        for c in 0..ch {
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let xx = reflect(x as isize + dx, a.width());
                    let yy = reflect(y as isize + dy, a.height());
                    pa.push(a.get(xx, yy, c));
                    pb.push(b.get(xx, yy, c));
                }
            }
            let ma = pa.iter().sum::<f64>() / 9.0;
            let mb = pb.iter().sum::<f64>() / 9.0;
            let va = pa.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / 9.0;
            let vb = pb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / 9.0;
            let cov = pa.iter().zip(&pb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 9.0;
            ssim += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            l1 += (a.get(x, y, c) - b.get(x, y, c)).abs();
        }
        ssim /= ch as f64;
        l1 /= ch as f64;
        alpha * ((1.0 - ssim) / 2.0).clamp(0.0, 1.0) + (1.0 - alpha) * l1
    }

    pub fn warp(src: &ImageBuffer, inv: &InverseDepthMap, pose: &Pose, k: &Intrinsics) -> ImageBuffer {
        let (w, h, ch) = (src.width(), src.height(), src.channels());
        let r = pose.rotation();
        let t = pose.translation();
        let mut out = ImageBuffer::filled(w, h, ch, 0.0);
        for y in 0..h {
            for x in 0..w {
                let d = 1.0 / inv.get(x, y);
                let p = [(x as f64 - k.cx) / k.fx * d, (y as f64 - k.cy) / k.fy * d, d];
                let q: Vec<f64> = (0..3)
                    .map(|i| r[(i, 0)] * p[0] + r[(i, 1)] * p[1] + r[(i, 2)] * p[2] + t[i])
                    .collect();
                if q[2] <= 1e-9 {
                    continue;
                }
                let u = k.fx * q[0] / q[2] + k.cx;
                let v = k.fy * q[1] / q[2] + k.cy;
                if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
                    continue;
                }
                let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (a, b) = (u - x0 as f64, v - y0 as f64);
                for c in 0..ch {
                    let val = (1.0 - a) * (1.0 - b) * src.get(x0, y0, c)
                        + a * (1.0 - b) * src.get(x1, y0, c)
                        + (1.0 - a) * b * src.get(x0, y1, c)
                        + a * b * src.get(x1, y1, c);
                    out.set(x, y, c, val);
                }
            }
        }
        out
    }

    pub fn smoothness(inv: &InverseDepthMap, img: &ImageBuffer) -> f64 {
        let (w, h) = (inv.width(), inv.height());
        let mean = inv.as_slice().iter().sum::<f64>() / (w * h) as f64;
        let g = |x0: usize, y0: usize, x1: usize, y1: usize| {
            let mut s = 0.0;
            for c in 0..img.channels() {
                s += (img.get(x1, y1, c) - img.get(x0, y0, c)).abs();
            }
            (-(s / img.channels() as f64)).exp()
        };
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let here = inv.get(x, y) / mean;
                if x + 1 < w {
                    total += (inv.get(x + 1, y) / mean - here).abs() * g(x, y, x + 1, y);
                }
                if y + 1 < h {
                    total += (inv.get(x, y + 1) / mean - here).abs() * g(x, y, x, y + 1);
                }
            }
        }
        total / (w * h) as f64
    }

    /// Unmasked multi-scale objective with weights f^r and e^r.
    pub fn loss(bundle: &SampleBundle, inv: &[InverseDepthMap], poses: &[Pose], cfg: &LossConfig) -> f64 {
        let mut total = 0.0;
        for (r, d) in inv.iter().enumerate() {
            let k = bundle.intrinsics(r);
            let target = bundle.target(r);
            for (s, pose) in poses.iter().enumerate() {
                let warped = warp(bundle.source(s, r), d, pose, k);
                let mut sum = 0.0;
                for y in 0..k.height {
                    for x in 0..k.width {
                        sum += pe(target, &warped, x, y);
                    }
                }
                total += cfg.eta * cfg.f.powi(r as i32) * sum / (k.width * k.height) as f64;
            }
            total += cfg.lambda * cfg.e.powi(r as i32) * smoothness(d, target);
        }
        total
    }
}

fn random_state(name: &str, seed: u64, scales: usize) -> (SampleBundle, Vec<InverseDepthMap>, Vec<Pose>) {
    let sample = render(&preset_with_seed(name, seed).unwrap()).unwrap();
    let bundle = sample.bundle(scales).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inv = vec![sample.target_depth().values.map(|d| 1.0 / d * rng.gen_range(0.9..1.1))];
    for _ in 1..scales {
        let next = inv.last().unwrap().downsample2().unwrap();
        inv.push(next);
    }
    let poses = sample
        .gt_poses
        .iter()
        .map(|p| p.retract(&[0.0, 0.001, 0.0, 0.02, 0.0, 0.0]))
        .collect();
    (bundle, inv, poses)
}

#[test]
fn scale_weights_are_exact_powers() {
    let cfg = |f, scales| LossConfig {
        f,
        scales,
        ..LossConfig::default()
    };
    assert_eq!(scale_weights(&cfg(0.25, 4)), vec![1.0, 0.25, 0.0625, 0.015625]);
    assert_eq!(scale_weights(&cfg(1.0, 4)), vec![1.0; 4]);
    assert_eq!(scale_weights(&cfg(0.5, 2)), vec![1.0, 0.5]);
}

#[test]
fn unmasked_uniform_loss_equals_brute_force() {
    for (name, seed) in [("static", 3), ("mixed", 8)] {
        let (bundle, inv, poses) = random_state(name, seed, 4);
        for lambda in [0.0, 1e-3] {
            let cfg = LossConfig {
                f: 1.0,
                lambda,
                scales: 4,
                ..LossConfig::default()
            };
            let ours = total_loss(&bundle, &inv, &poses, &cfg, &OutlierConfig::default(), MaskFlags::none())
                .unwrap()
                .loss;
            let oracle = brute::loss(&bundle, &inv, &poses, &cfg);
            assert!((ours - oracle).abs() < 1e-12, "{name} lambda {lambda}: {ours} vs {oracle}");
        }
    }
}

#[test]
fn weighted_loss_equals_brute_force() {
    let (bundle, inv, poses) = random_state("occlusion", 11, 3);
    let cfg = LossConfig {
        f: 0.25,
        e: 0.5,
        scales: 3,
        ..LossConfig::default()
    };
    let ours = total_loss(&bundle, &inv, &poses, &cfg, &OutlierConfig::default(), MaskFlags::none())
        .unwrap()
        .loss;
    assert!((ours - brute::loss(&bundle, &inv, &poses, &cfg)).abs() < 1e-12);
}

#[test]
fn constant_error_examples() {
    let k = Intrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
    let target = ImageBuffer::filled(8, 8, 1, 0.5);
    let source = ImageBuffer::filled(8, 8, 1, 0.6);
    let c = *photometric_error(&target, &source, &PhotometricConfig::default())
        .unwrap()
        .values
        .get(0, 0);
    assert!(c > 0.0);

    let one = SampleBundle::new(target.clone(), vec![source.clone()], k, 1).unwrap();
    let cfg = LossConfig {
        eta: 1.0,
        lambda: 0.0,
        scales: 1,
        ..LossConfig::default()
    };
    let inv = vec![InverseDepthMap::filled(8, 8, 0.5)];
    let loss = total_loss(&one, &inv, &[Pose::identity()], &cfg, &OutlierConfig::default(), MaskFlags::none())
        .unwrap()
        .loss;
    assert!((loss - c).abs() < 1e-15);

    let two = SampleBundle::new(target, vec![source], k, 2).unwrap();
    let cfg = LossConfig {
        scales: 2,
        f: 0.25,
        ..cfg
    };
    let inv = vec![InverseDepthMap::filled(8, 8, 0.5), InverseDepthMap::filled(4, 4, 0.5)];
    let loss = total_loss(&two, &inv, &[Pose::identity()], &cfg, &OutlierConfig::default(), MaskFlags::none())
        .unwrap()
        .loss;
    assert!((loss - 1.25 * c).abs() < 1e-15);
}

#[test]
fn loss_is_invariant_to_source_order() {
    let (bundle, inv, poses) = random_state("mixed", 5, 4);
    let cfg = LossConfig {
        scales: 4,
        ..LossConfig::default()
    };
    let o = OutlierConfig::default();
    let a = total_loss(&bundle, &inv, &poses, &cfg, &o, MaskFlags::all()).unwrap().loss;
    let swapped = bundle.permuted(&[1, 0]);
    let b = total_loss(&swapped, &inv, &[poses[1], poses[0]], &cfg, &o, MaskFlags::all())
        .unwrap()
        .loss;
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn integer_shift_plane_has_vanishing_loss() {
    // plane at 5 m, fx = 100, 0.4 m sideways: exactly 8, 4, 2, 1 px per scale
    let mut spec = preset("static").unwrap();
    spec.objects.clear();
    spec.camera_motion = Pose::from_translation([0.4, 0.0, 0.0]);
    let sample = render(&spec).unwrap();
    let bundle = sample.bundle(4).unwrap();
    let mut inv = vec![sample.target_depth().values.map(|d| 1.0 / d)];
    for _ in 1..4 {
        let next = inv.last().unwrap().downsample2().unwrap();
        inv.push(next);
    }
    let cfg = LossConfig {
        lambda: 0.0,
        scales: 4,
        ..LossConfig::default()
    };
    let out = total_loss(&bundle, &inv, &sample.gt_poses, &cfg, &OutlierConfig::default(), MaskFlags::all()).unwrap();
    assert!(out.loss < 1e-6, "loss {}", out.loss);
    assert!(out.fully_masked.is_empty());
}

#[test]
fn fully_masked_term_contributes_nothing() {
    let k = Intrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
    let img = ImageBuffer::filled(8, 8, 1, 0.5);
    let bundle = SampleBundle::new(img.clone(), vec![img], k, 1).unwrap();
    let cfg = LossConfig {
        lambda: 0.0,
        scales: 1,
        ..LossConfig::default()
    };
    // every pixel projects far outside the source
    let out = total_loss(
        &bundle,
        &[InverseDepthMap::filled(8, 8, 0.5)],
        &[Pose::from_translation([100.0, 0.0, 0.0])],
        &cfg,
        &OutlierConfig::default(),
        MaskFlags::all(),
    )
    .unwrap();
    assert_eq!(out.loss, 0.0);
    assert_eq!(out.fully_masked, vec![(0, 0)]);
}
