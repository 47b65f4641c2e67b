//! Invariant suites shared by the `selfcheck` command and the acceptance
//! target. Each suite returns a [`Check`] instead of panicking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bench::{sample_scene, SCENE_SIZE, VOCAB};
use crate::diffusion::{Arch, DenoiserModel, NoiseSchedule, ScheduleKind, Variant};
use crate::error::Result;
use crate::mask::{augment_mask, rasterize_all, trace_contours, AugmentParams, BinaryMask};
use crate::protect::{
    pgd_protect_observed, AttackConfig, AugmentSettings, LossInputs, LossKind, LossProgram, RegionKind,
};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, failures: &[String], summary: String) -> Self {
        let detail = match failures.first() {
            Some(f) => format!("{} failure(s), first: {f}", failures.len()),
            None => summary,
        };
        Self {
            name: name.into(),
            passed: failures.is_empty(),
            detail,
        }
    }
}

/// Small scene-sized architecture used by the suites.
pub fn probe_arch(variant: Variant) -> Arch {
    Arch {
        height: SCENE_SIZE,
        width: SCENE_SIZE,
        channels: 1,
        base_width: 8,
        vocab: VOCAB,
        variant,
        schedule: ScheduleKind::Cosine,
        timesteps: 50,
        time_features: 32,
        embed_channels: 4,
    }
}

/// Freshly initialized model with its zero-initialized tensors filled with
/// small noise, so every input path carries gradient.
pub fn probe_model(variant: Variant, s: u64) -> Result<DenoiserModel> {
    let mut m = DenoiserModel::init(probe_arch(variant), s)?;
    let mut rng = seed::stream_rng(s, "probe-model", 0);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".g") || t.data().iter().any(|&v| v != 0.0) {
            continue;
        }
        let scale = if name == "out.w" { 0.2 } else { 0.1 };
        for v in t.data_mut() {
            *v = scale * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Ok(m)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Central differences at several step sizes; the loss is only piecewise
/// smooth (clamps inside the sampler), so agreement at any one counts.
const FD_STEPS: [f32; 5] = [1e-3, 3e-4, 1e-4, 3e-5, 3e-3];

fn grad_agrees(a: f32, n: f32) -> bool {
    (a - n).abs() <= (1e-2 * a.abs().max(n.abs())).max(1e-4)
}

/// Analytic vs central-difference gradients of all three losses (targeted
/// at K = 4) on `n_seeds` random models, images and masks.
pub fn gradient_suite(n_seeds: usize, coords_per_loss: usize) -> Result<Check> {
    let mut failures = Vec::new();
    let mut compared = 0usize;
    for s in 0..n_seeds as u64 {
        let model = probe_model(Variant::Inpaint, seed::derive(s, "check-grad", 0))?;
        let mut rng = seed::stream_rng(s, "check-grad", 1);
        let scene = sample_scene(&mut rng);
        let shape = scene.image.shape().to_vec();
        let delta = normal(&shape, &mut rng).scale(0.02);
        let n_pixels = delta.len();
        for (kind, k) in [(LossKind::EarlyStage, 1), (LossKind::ReconMax, 1), (LossKind::TargetedImage, 4)] {
            let cond = rng.gen_range(0..VOCAB);
            let program = LossProgram::new(&model, kind, k, cond)?;
            let inp = LossInputs {
                x_src: scene.image.clone(),
                mask: scene.m_gt.clone(),
                cond,
                noise: normal(&shape, &mut rng),
                t: rng.gen_range(1..=model.arch.timesteps),
                target: Some(Tensor::full(&shape, 0.5)),
            };
            let (_, grad) = program.value_and_grad(&model, &inp, &delta)?;
            let coords: Vec<usize> = (0..coords_per_loss).map(|_| rng.gen_range(0..n_pixels)).collect();
            let fds: Vec<Vec<f32>> = FD_STEPS
                .iter()
                .map(|&h| program.finite_diff_coords(&model, &inp, &delta, &coords, h))
                .collect::<Result<_>>()?;
            for (j, &c) in coords.iter().enumerate() {
                compared += 1;
                let a = grad.data()[c];
                if !fds.iter().any(|fd| grad_agrees(a, fd[j])) {
                    failures.push(format!(
                        "seed {s} {kind:?} pixel {c}: analytic {a:e}, numeric {:e}",
                        fds[0][j]
                    ));
                }
            }
        }
    }
    Ok(Check::new(
        "gradients",
        &failures,
        format!("{compared} coordinates over {n_seeds} seeds agree"),
    ))
}

/// Empirical mean and std of `q_sample` against `(α_t x, σ_t)` within three
/// standard errors, at `t ∈ {1, T/2, T}`, for both schedule kinds.
pub fn forward_suite(draws: usize, timesteps: usize) -> Result<Check> {
    let mut failures = Vec::new();
    let x0 = 0.7f32;
    let x = Tensor::full(&[1, 1, 1, draws], x0);
    let mut index = 0;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let sched = NoiseSchedule::new(timesteps, kind)?;
        for t in [1, timesteps / 2, timesteps] {
            // an independent draw per comparison
            let eps = normal(&[1, 1, 1, draws], &mut seed::stream_rng(0, "check-forward", index));
            index += 1;
            let xt = sched.q_sample(&x, t, &eps)?;
            let n = draws as f64;
            let mean = xt.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            let se_mean = s / n.sqrt();
            let se_std = s / (2.0 * (n - 1.0)).sqrt();
            if (mean - a * x0 as f64).abs() > 3.0 * se_mean {
                failures.push(format!("{kind:?} t={t}: mean {mean} vs {}", a * x0 as f64));
            }
            if (var.sqrt() - s).abs() > 3.0 * se_std {
                failures.push(format!("{kind:?} t={t}: std {} vs {s}", var.sqrt()));
            }
        }
    }
    Ok(Check::new(
        "forward-process",
        &failures,
        format!("{draws} draws at 3 timesteps, 2 schedules"),
    ))
}

/// Strictly decreasing log-SNR, `α_T² < 1e-3` and `α² + σ² = 1`.
pub fn schedule_suite(timesteps: usize) -> Result<Check> {
    let mut failures = Vec::new();
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let s = NoiseSchedule::new(timesteps, kind)?;
        for t in 1..timesteps {
            if !(s.lambda(t + 1) < s.lambda(t)) {
                failures.push(format!("{kind:?}: lambda not decreasing at t={t}"));
            }
        }
        for t in 0..=timesteps {
            let e = (s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs();
            if e > 1e-6 {
                failures.push(format!("{kind:?}: alpha^2 + sigma^2 off by {e:e} at t={t}"));
            }
        }
        let end = s.alpha(timesteps).powi(2);
        if !(end < 1e-3) {
            failures.push(format!("{kind:?}: alpha_T^2 = {end:e}"));
        }
    }
    Ok(Check::new("schedule", &failures, format!("T={timesteps}, 2 schedules")))
}

/// Hole-free union of 1–3 ellipses whose components are all at least 3×3.
fn union_blob(rng: &mut ChaCha8Rng) -> Result<BinaryMask> {
    let n = SCENE_SIZE as f64;
    loop {
        let mut m = BinaryMask::zeros(SCENE_SIZE, SCENE_SIZE);
        for _ in 0..rng.gen_range(1..=3) {
            let (cx, cy) = (rng.gen_range(3.0..n - 3.0), rng.gen_range(3.0..n - 3.0));
            let (rx, ry) = (rng.gen_range(2.0..n / 3.0), rng.gen_range(2.0..n / 3.0));
            let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (c, sn) = (rot.cos(), rot.sin());
            let e = BinaryMask::from_fn(SCENE_SIZE, SCENE_SIZE, |x, y| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (c * dx + sn * dy, -sn * dx + c * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
            m = m.union(&e)?;
        }
        let m = m.fill_holes();
        let sizable = m.components().iter().all(|c| {
            c.bounding_box()
                .is_some_and(|(x0, y0, x1, y1)| x1 - x0 >= 2 && y1 - y0 >= 2)
        });
        if !m.is_empty() && sizable {
            return Ok(m);
        }
    }
}

/// Scene blobs and ellipse unions, alternating.
fn check_mask(i: usize, rng: &mut ChaCha8Rng) -> Result<BinaryMask> {
    if i % 2 == 0 {
        Ok(sample_scene(rng).m_gt)
    } else {
        union_blob(rng)
    }
}

/// Augmentation output is a binary subset of its input, deterministic per
/// seed, and ζ = 0 reproduces the rasterized traced contour.
pub fn augment_suite(n_masks: usize) -> Result<Check> {
    let mut failures = Vec::new();
    for i in 0..n_masks {
        let mut rng = seed::stream_rng(i as u64, "check-augment", 0);
        let m = check_mask(i, &mut rng)?;
        let params = AugmentParams {
            zeta: rng.gen_range(0.0..6.0),
            s: rng.gen_range(0.5..8.0),
            n: rng.gen_range(1..=5),
            seed: rng.gen(),
        };
        let a = augment_mask(&m, &params)?;
        if !a.bits().iter().all(|&b| b <= 1) {
            failures.push(format!("mask {i}: non-binary output"));
        }
        if !a.is_subset_of(&m) {
            failures.push(format!("mask {i}: output leaves the input ({params:?})"));
        }
        if augment_mask(&m, &params)? != a {
            failures.push(format!("mask {i}: not deterministic"));
        }
        let still = augment_mask(&m, &AugmentParams { zeta: 0.0, ..params })?;
        let reference = rasterize_all(&trace_contours(&m)?, m.height(), m.width())?;
        if still != reference {
            failures.push(format!("mask {i}: zeta = 0 differs from the traced contour"));
        }
    }
    Ok(Check::new("augmentation", &failures, format!("{n_masks} masks")))
}

/// Per-iteration budget, validity and region invariants of PGD and a
/// monotone best-iterate loss on `n_jobs` random attacks.
pub fn pgd_suite(n_jobs: usize, steps: usize) -> Result<Check> {
    let mut failures = Vec::new();
    let kinds = [LossKind::EarlyStage, LossKind::ReconMax, LossKind::TargetedImage];
    for j in 0..n_jobs {
        let mut rng = seed::stream_rng(j as u64, "check-pgd", 0);
        let model = probe_model(Variant::Inpaint, rng.gen())?;
        let scene = sample_scene(&mut rng);
        let kind = kinds[j % kinds.len()];
        let eta = rng.gen_range(2..=16) as f32 / 255.0;
        let whole = rng.gen_bool(0.3);
        let config = AttackConfig {
            loss: kind,
            eta,
            gamma: eta.min(rng.gen_range(1..=4) as f32 / 255.0),
            steps,
            augment: rng.gen_bool(0.5).then(AugmentSettings::default),
            noise_resample: rng.gen_bool(0.5),
            truncation: 2,
            cond: rng.gen_range(0..VOCAB),
            seed: rng.gen(),
            region: if whole { RegionKind::WholeImage } else { RegionKind::MaskOnly },
            ..AttackConfig::default()
        };
        let (x, m) = (&scene.image, &scene.m_gt);
        let plane = m.height() * m.width();
        let mut prev_best: Option<f32> = None;
        let mut errors = Vec::new();
        pgd_protect_observed(&model, x, m, &config, &mut |rep| {
            for (i, &d) in rep.delta.data().iter().enumerate() {
                let v = x.data()[i] + d;
                if d.abs() > eta || !(0.0..=1.0).contains(&v) {
                    errors.push(format!("job {j} iter {}: pixel {i} out of budget", rep.iteration));
                    break;
                }
                if !whole && m.bits()[i % plane] == 0 && d != 0.0 {
                    errors.push(format!("job {j} iter {}: pixel {i} outside region", rep.iteration));
                    break;
                }
            }
            if let Some(p) = prev_best {
                if rep.best_loss * kind.direction() < p * kind.direction() {
                    errors.push(format!("job {j} iter {}: best loss regressed", rep.iteration));
                }
            }
            prev_best = Some(rep.best_loss);
        })?;
        failures.extend(errors);
    }
    Ok(Check::new("pgd", &failures, format!("{n_jobs} jobs x {steps} iterations")))
}

/// All suites at their full sizes.
pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        gradient_suite(20, 8)?,
        forward_suite(10_000, 1000)?,
        schedule_suite(1000)?,
        augment_suite(500)?,
        pgd_suite(50, 6)?,
    ])
}
