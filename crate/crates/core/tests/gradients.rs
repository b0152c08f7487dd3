// Central finite differences against the analytic derivatives, on random
// states around each scene's ground truth. Probes whose interpolation cell or
// in-bounds status flips under the perturbation are skipped: the bilinear
// sampler is only piecewise smooth.

use photomask::image::{InverseDepthMap, MaskMap};
use photomask::warp::{synthesize_view, warp_jacobians};
use photomask::{
    preset_with_seed, render, DepthMap, LossConfig, MaskFlags, Objective, OutlierConfig, Pose,
    SampleBundle,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCENES: [(&str, u64); 5] = [
    ("static", 1),
    ("co_dir", 2),
    ("contra_dir", 3),
    ("occlusion", 4),
    ("mixed", 5),
];
const TOL: f64 = 1e-3;

struct Case {
    bundle: SampleBundle,
    inv: Vec<InverseDepthMap>,
    poses: Vec<Pose>,
    rng: ChaCha8Rng,
}

fn case(name: &str, seed: u64, scales: usize) -> Case {
    let sample = render(&preset_with_seed(name, seed).unwrap()).unwrap();
    let bundle = sample.bundle(scales).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho = sample.target_depth().values.map(|d| -d.ln());
    for r in rho.as_mut_slice() {
        *r += rng.gen_range(-0.05..0.05);
    }
    let mut inv = Vec::new();
    let mut cur = rho;
    for i in 0..scales {
        if i > 0 {
            cur = cur.downsample2().unwrap();
        }
        inv.push(cur.map(|r| r.exp()));
    }
    let poses = sample
        .gt_poses
        .iter()
        .map(|p| {
            let mut d = [0.0; 6];
            for (i, v) in d.iter_mut().enumerate() {
                let a = if i < 3 { 2e-3 } else { 1e-2 };
                *v = rng.gen_range(-a..a);
            }
            p.retract(&d)
        })
        .collect();
    Case {
        bundle,
        inv,
        poses,
        rng,
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs())
}

/// Interpolation cell and in-bounds status of every pixel.
fn cells(source: &photomask::ImageBuffer, depth: &DepthMap, pose: &Pose, k: &photomask::Intrinsics) -> Vec<(i64, i64, bool)> {
    let wr = synthesize_view(source, depth, pose, k).unwrap();
    wr.coords
        .as_slice()
        .iter()
        .zip(wr.in_bounds.as_slice())
        .map(|(c, &b)| {
            if c.is_finite() {
                (c.u.floor() as i64, c.v.floor() as i64, b)
            } else {
                (i64::MIN, i64::MIN, b)
            }
        })
        .collect()
}

#[test]
fn warp_jacobians_match_finite_differences() {
    let h = 1e-6;
    let mut checked = 0;
    for (name, seed) in SCENES {
        let mut c = case(name, seed, 1);
        let k = *c.bundle.intrinsics(0);
        let depth = DepthMap::from_inverse(&c.inv[0]);
        for (s, pose) in c.poses.clone().iter().enumerate() {
            let src = c.bundle.source(s, 0).clone();
            let jac = warp_jacobians(&src, &depth, pose, &k).unwrap();

            // depth probes: one pixel at a time
            let mut n = 0;
            while n < 15 {
                let x = c.rng.gen_range(0..k.width);
                let y = c.rng.gen_range(0..k.height);
                let d0 = *depth.values.get(x, y);
                let bump = |delta: f64| {
                    let mut v = depth.values.clone();
                    *v.get_mut(x, y) = d0 + delta;
                    DepthMap::new(v)
                };
                let (dp, dm) = (bump(h * d0), bump(-h * d0));
                let base = cells(&src, &depth, pose, &k)[y * k.width + x];
                if cells(&src, &dp, pose, &k)[y * k.width + x] != base
                    || cells(&src, &dm, pose, &k)[y * k.width + x] != base
                    || !base.2
                {
                    continue;
                }
                let ip = synthesize_view(&src, &dp, pose, &k).unwrap().image;
                let im = synthesize_view(&src, &dm, pose, &k).unwrap().image;
                let num = (ip.get(x, y, 0) - im.get(x, y, 0)) / (2.0 * h * d0);
                let ana = jac.d_intensity_d_depth(x, y, 0);
                if ana.abs().max(num.abs()) < 1e-8 {
                    continue;
                }
                assert!(rel_err(ana, num) < TOL, "{name} depth ({x},{y}): {ana} vs {num}");
                n += 1;
                checked += 1;
            }

            // pose probes: every coordinate, at a handful of stable pixels
            let base = cells(&src, &depth, pose, &k);
            for i in 0..6 {
                let mut d = [0.0; 6];
                d[i] = h;
                let pp = pose.retract(&d);
                d[i] = -h;
                let pm = pose.retract(&d);
                let (cp, cm) = (cells(&src, &depth, &pp, &k), cells(&src, &depth, &pm, &k));
                let ip = synthesize_view(&src, &depth, &pp, &k).unwrap().image;
                let im = synthesize_view(&src, &depth, &pm, &k).unwrap().image;
                let mut n = 0;
                for _ in 0..200 {
                    if n == 3 {
                        break;
                    }
                    let x = c.rng.gen_range(0..k.width);
                    let y = c.rng.gen_range(0..k.height);
                    let p = y * k.width + x;
                    if !base[p].2 || cp[p] != base[p] || cm[p] != base[p] {
                        continue;
                    }
                    let num = (ip.get(x, y, 0) - im.get(x, y, 0)) / (2.0 * h);
                    let ana = jac.d_intensity_d_pose(x, y, 0)[i];
                    if ana.abs().max(num.abs()) < 1e-8 {
                        continue;
                    }
                    assert!(rel_err(ana, num) < TOL, "{name} pose[{i}] ({x},{y}): {ana} vs {num}");
                    n += 1;
                    checked += 1;
                }
            }
        }
    }
    assert!(checked >= 100, "only {checked} probes");
}

struct Frozen<'a> {
    objective: Objective<'a>,
    masks: Vec<Vec<MaskMap>>,
}

impl Frozen<'_> {
    fn loss(&self, inv: &[InverseDepthMap], poses: &[Pose]) -> f64 {
        self.objective
            .evaluate_from(0, inv, poses, Some(&self.masks), false)
            .unwrap()
            .0
            .loss
    }
}

/// Cell, bounds and residual sign of every pixel at every scale: the L1 term
/// has a kink wherever the residual crosses zero.
/// Cells plus residual signs at every scale; the L1 term kinks where a residual crosses zero.
fn all_cells(bundle: &SampleBundle, inv: &[InverseDepthMap], poses: &[Pose]) -> Vec<(Vec<(i64, i64, bool)>, Vec<bool>)> {
    let mut out = Vec::new();
    for (r, d) in inv.iter().enumerate() {
        let depth = DepthMap::from_inverse(d);
        let k = bundle.intrinsics(r);
        let target = bundle.target(r);
        for (s, p) in poses.iter().enumerate() {
            let wr = synthesize_view(bundle.source(s, r), &depth, p, k).unwrap();
            let signs = target
                .as_slice()
                .iter()
                .zip(wr.image.as_slice())
                .map(|(a, b)| a > b)
                .collect();
            out.push((cells(bundle.source(s, r), &depth, p, k), signs));
        }
    }
    out
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let h = 1e-6;
    let mut checked = 0;
    for (name, seed) in SCENES {
        let mut c = case(name, seed, 4);
        let loss = LossConfig {
            scales: 4,
            ..LossConfig::default()
        };
        let objective = Objective::new(&c.bundle, loss, OutlierConfig::default(), MaskFlags::all()).unwrap();
        let (out, _) = objective.evaluate_from(0, &c.inv, &c.poses, None, false).unwrap();
        let frozen = Frozen {
            masks: out.combined_masks(),
            objective,
        };
        let (_, grad) = frozen
            .objective
            .evaluate_from(0, &c.inv, &c.poses, Some(&frozen.masks), true)
            .unwrap();
        let grad = grad.unwrap();
        let base = all_cells(&c.bundle, &c.inv, &c.poses);

        // log inverse depth probes across all scales
        let mut n = 0;
        while n < 16 {
            let r = c.rng.gen_range(0..4);
            let (w, hh) = (c.inv[r].width(), c.inv[r].height());
            let (x, y) = (c.rng.gen_range(0..w), c.rng.gen_range(0..hh));
            let bump = |sign: f64| {
                let mut inv = c.inv.clone();
                *inv[r].get_mut(x, y) *= (sign * h).exp();
                inv
            };
            let (ip, im) = (bump(1.0), bump(-1.0));
            if all_cells(&c.bundle, &ip, &c.poses) != base || all_cells(&c.bundle, &im, &c.poses) != base {
                continue;
            }
            let num = (frozen.loss(&ip, &c.poses) - frozen.loss(&im, &c.poses)) / (2.0 * h);
            let ana = *grad.log_inv_depth[r].get(x, y);
            if ana.abs().max(num.abs()) < 1e-9 {
                continue;
            }
            assert!(rel_err(ana, num) < TOL, "{name} rho[{r}]({x},{y}): {ana} vs {num}");
            n += 1;
            checked += 1;
        }

        // pose tangent probes, all sources and coordinates
        for s in 0..c.poses.len() {
            for i in 0..6 {
                let bump = |sign: f64| {
                    let mut d = [0.0; 6];
                    d[i] = sign * h;
                    let mut p = c.poses.clone();
                    p[s] = p[s].retract(&d);
                    p
                };
                let (pp, pm) = (bump(1.0), bump(-1.0));
                if all_cells(&c.bundle, &c.inv, &pp) != base || all_cells(&c.bundle, &c.inv, &pm) != base {
                    continue;
                }
                let num = (frozen.loss(&c.inv, &pp) - frozen.loss(&c.inv, &pm)) / (2.0 * h);
                let ana = grad.pose[s][i];
                assert!(rel_err(ana, num) < TOL, "{name} pose[{s}][{i}]: {ana} vs {num}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 50, "only {checked} probes");
}

#[test]
fn frozen_masks_match_recomputed_masks_at_the_base_state() {
    let c = case("static", 9, 2);
    let loss = LossConfig {
        scales: 2,
        ..LossConfig::default()
    };
    let objective = Objective::new(&c.bundle, loss, OutlierConfig::default(), MaskFlags::all()).unwrap();
    let live = objective.evaluate(&c.inv, &c.poses).unwrap();
    let masks = live.combined_masks();
    let (frozen, _) = objective.evaluate_from(0, &c.inv, &c.poses, Some(&masks), false).unwrap();
    assert_eq!(live.loss, frozen.loss);
}
