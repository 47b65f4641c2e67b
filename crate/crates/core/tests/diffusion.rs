use proptest::prelude::*;
use rand::Rng;
use shield::diffusion::*;
use shield::tensor::{AdamConfig, GraphBuilder};
use shield::{seed, Error, Tensor};

fn arch(h: usize, width: usize, variant: Variant, t: usize) -> Arch {
    Arch {
        height: h,
        width: h,
        channels: 1,
        base_width: width,
        vocab: 3,
        variant,
        schedule: ScheduleKind::Cosine,
        timesteps: t,
        time_features: 16,
        embed_channels: 4,
    }
}

/// Predicts the exact noise that maps `x0` to `x_t`.
struct Oracle {
    x0: Tensor,
    sched: NoiseSchedule,
    variant: Variant,
}

impl EpsPredictor for Oracle {
    fn variant(&self) -> Variant {
        self.variant
    }

    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        _conds: &[usize],
        _cond: Option<(&Tensor, &Tensor)>,
    ) -> shield::Result<Tensor> {
        let (a, s) = (self.sched.alpha(t), self.sched.sigma(t));
        x_t.zip_map(&self.x0, |xt, x0| ((xt as f64 - a * x0 as f64) / s) as f32)
    }
}

fn two_class_batch(n: usize, h: usize, rng: &mut impl Rng) -> TrainBatch {
    let mut images = Vec::new();
    let mut conds = Vec::new();
    for _ in 0..n {
        let class = rng.gen_range(1..=2);
        let level = if class == 1 { 0.2 } else { 0.8 };
        let split = rng.gen_range(h / 4..3 * h / 4);
        images.push(Tensor::from_fn(&[1, 1, h, h], |i| {
            if i % h < split {
                level
            } else {
                1.0 - level
            }
        }));
        conds.push(class);
    }
    TrainBatch::new(Tensor::stack(&images).unwrap(), conds).unwrap()
}

#[test]
fn zero_initialized_model_has_unit_loss_per_pixel() {
    let model = DenoiserModel::init(arch(32, 32, Variant::Standard, 1000), 3).unwrap();
    let sched = model.arch.schedule().unwrap();
    let mut trainer = Trainer::new(model, sched, AdamConfig::default()).unwrap();
    let mut rng = seed::rng(11);
    let images = Tensor::from_fn(&[16, 1, 32, 32], |_| rng.gen::<f32>());
    let batch = TrainBatch::new(images, vec![0; 16]).unwrap();
    let loss = trainer.train_step_standard(&batch, &mut rng).unwrap();
    let per_pixel = loss / 1024.0;
    assert!((per_pixel - 1.0).abs() < 0.1, "{per_pixel}");
}

#[test]
fn training_lowers_loss_on_two_classes() {
    let mut ratios = Vec::new();
    for s in 0..5u64 {
        let model = DenoiserModel::init(arch(16, 8, Variant::Standard, 1000), s).unwrap();
        let sched = model.arch.schedule().unwrap();
        let mut trainer = Trainer::new(model, sched, AdamConfig { lr: 3e-3, ..Default::default() }).unwrap();
        let mut rng = seed::rng(100 + s);
        let losses: Vec<f32> = (0..500)
            .map(|_| {
                let b = two_class_batch(8, 16, &mut rng);
                trainer.train_step_standard(&b, &mut rng).unwrap()
            })
            .collect();
        let initial = losses[..10].iter().sum::<f32>() / 10.0;
        let last = losses[450..].iter().sum::<f32>() / 50.0;
        ratios.push(last / initial);
    }
    ratios.sort_by(f32::total_cmp);
    assert!(ratios[2] < 0.8, "median final/initial = {}", ratios[2]);
}

#[test]
fn train_steps_are_deterministic_and_check_variant() {
    let run = || {
        let model = DenoiserModel::init(arch(16, 8, Variant::Standard, 100), 5).unwrap();
        let sched = model.arch.schedule().unwrap();
        let mut trainer = Trainer::new(model, sched, AdamConfig::default()).unwrap();
        let mut rng = seed::rng(9);
        let b = two_class_batch(4, 16, &mut rng);
        let l: Vec<f32> = (0..3).map(|_| trainer.train_step_standard(&b, &mut rng).unwrap()).collect();
        (l, trainer.into_model().params)
    };
    assert_eq!(run(), run());

    let model = DenoiserModel::init(arch(16, 8, Variant::Standard, 100), 5).unwrap();
    let sched = model.arch.schedule().unwrap();
    let mut rng = seed::rng(1);
    let b = two_class_batch(2, 16, &mut rng);
    let mut t = Trainer::new(model.clone(), sched.clone(), AdamConfig::default()).unwrap();
    assert!(matches!(t.train_step_inpaint(&b, &mut rng), Err(Error::Usage(_))));
    let mut t = Trainer::new(model.to_inpaint().unwrap(), sched, AdamConfig::default()).unwrap();
    assert!(matches!(t.train_step_standard(&b, &mut rng), Err(Error::Usage(_))));
    let first = t.train_step_inpaint(&b, &mut rng).unwrap();
    assert!(first.is_finite());
}

#[test]
fn inpaint_loss_starts_near_one_and_decreases() {
    let base = DenoiserModel::init(arch(16, 8, Variant::Standard, 1000), 2).unwrap();
    let sched = base.arch.schedule().unwrap();
    let mut t = Trainer::new(base.to_inpaint().unwrap(), sched, AdamConfig { lr: 3e-3, ..Default::default() }).unwrap();
    let mut rng = seed::rng(4);
    let losses: Vec<f32> = (0..400)
        .map(|_| {
            let b = two_class_batch(8, 16, &mut rng);
            t.train_step_inpaint(&b, &mut rng).unwrap()
        })
        .collect();
    let initial = losses[..10].iter().sum::<f32>() / 10.0;
    assert!((initial / 256.0 - 1.0).abs() < 0.15, "{initial}");
    let last = losses[350..].iter().sum::<f32>() / 50.0;
    assert!(last < 0.8 * initial, "{last} vs {initial}");
}

#[test]
fn expanded_model_ignores_new_channels_until_trained() {
    let mut base = DenoiserModel::init(arch(16, 8, Variant::Standard, 100), 8).unwrap();
    // give the output layer weight so the comparison is not trivially zero
    let mut rng = seed::rng(2);
    for t in base.params.values_mut() {
        let noise = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.1..0.1));
        t.axpy(1.0, &noise).unwrap();
    }
    let inp = base.to_inpaint().unwrap();
    assert_eq!(inp.arch.input_channels(), 2 + 1 + 4);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let want = base.predict(&x, &[10, 70], &[1, 2], None).unwrap();
    for s in 0..3 {
        let mask = random_training_mask(16, 16, s).unwrap().to_tensor(1);
        let mask = Tensor::stack(&[mask.clone(), mask]).unwrap();
        let src = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen());
        let got = inp.predict(&x, &[10, 70], &[1, 2], Some((&mask, &src))).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
    assert!(inp.to_inpaint().is_err());
}

#[test]
fn full_mask_conditions_on_the_whole_source() {
    let src = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f32 / 64.0);
    let ones = Tensor::ones(&[1, 1, 8, 8]);
    assert_eq!(model::masked_source(&src, &ones).unwrap(), src);
}

#[test]
fn inpaint_input_channel_count_is_enforced() {
    let model = DenoiserModel::init(arch(16, 8, Variant::Inpaint, 100), 1).unwrap();
    let mut g = GraphBuilder::new();
    let mut inp = model.declare_inputs(&mut g, 1).unwrap();
    inp.mask = Some(g.input("mask2", &[1, 2, 16, 16]).unwrap());
    assert!(matches!(model.build_eps(&mut g, inp), Err(Error::Shape { .. })));
    let mut g = GraphBuilder::new();
    let mut inp = model.declare_inputs(&mut g, 1).unwrap();
    inp.src = None;
    assert!(model.build_eps(&mut g, inp).is_err());
}

#[test]
fn output_shape_matches_input_for_color_images() {
    let mut a = arch(16, 8, Variant::Inpaint, 100);
    a.channels = 3;
    let model = DenoiserModel::init(a, 1).unwrap();
    let x = Tensor::zeros(&[2, 3, 16, 16]);
    let mask = Tensor::ones(&[2, 1, 16, 16]);
    let out = model.predict(&x, &[1, 2], &[0, 0], Some((&mask, &x))).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert_eq!(model.arch.input_channels(), 3 + 1 + 3 + 4);
}

#[test]
fn ddim_is_deterministic_and_one_step_matches_estimate() {
    let mut model = DenoiserModel::init(arch(16, 8, Variant::Standard, 50), 4).unwrap();
    let mut rng = seed::rng(3);
    let ow = model.params.get_mut("out.w").unwrap();
    *ow = Tensor::from_fn(ow.shape(), |_| rng.gen_range(-0.2..0.2));
    let sched = model.arch.schedule().unwrap();
    let p = ModelPredictor::new(&model, 2).unwrap();
    let shape = [2, 1, 16, 16];
    let a = ddim_sample(&p, &sched, 10, &shape, &[1, 2], 77, None).unwrap();
    let b = ddim_sample(&p, &sched, 10, &shape, &[1, 2], 77, None).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let one = ddim_sample(&p, &sched, 1, &shape, &[1, 2], 5, None).unwrap();
    let est = one_step_x0_estimate(&p, &sched, &initial_noise(&shape, 5), &[1, 2], None).unwrap();
    assert_eq!(one, est);
}

#[test]
fn ddim_requires_inpaint_conditioning() {
    let model = DenoiserModel::init(arch(16, 8, Variant::Inpaint, 50), 4).unwrap();
    let sched = model.arch.schedule().unwrap();
    let p = ModelPredictor::new(&model, 1).unwrap();
    let r = ddim_sample(&p, &sched, 5, &[1, 1, 16, 16], &[0], 1, None);
    assert!(matches!(r, Err(Error::Usage(_))));
    assert!(ddim_sample(&p, &sched, 51, &[1, 1, 16, 16], &[0], 1, None).is_err());
}

#[test]
fn perfect_oracle_reconstructs_through_every_step() {
    for (kind, t_max) in [(ScheduleKind::Cosine, 1000), (ScheduleKind::Linear, 200)] {
        let sched = NoiseSchedule::new(t_max, kind).unwrap();
        let x0 = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 37) % 64) as f32 / 63.0);
        let oracle = Oracle {
            x0: x0.clone(),
            sched: sched.clone(),
            variant: Variant::Standard,
        };
        let eps = initial_noise(&[1, 1, 8, 8], 12);
        let x_t = sched.q_sample(&x0, t_max, &eps).unwrap();
        let out = ddim_from(&oracle, &sched, t_max, x_t.clone(), &[0], None).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-4, "{kind:?}: {a} vs {b}");
        }
        let est = one_step_x0_estimate(&oracle, &sched, &x_t, &[0], None).unwrap();
        for (a, b) in est.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn zero_model_one_step_estimate_is_scaled_noise() {
    let model = DenoiserModel::init(arch(16, 8, Variant::Standard, 100), 4).unwrap();
    let sched = model.arch.schedule().unwrap();
    let p = ModelPredictor::new(&model, 1).unwrap();
    let x_t = initial_noise(&[1, 1, 16, 16], 3).scale(0.01);
    let est = one_step_x0_estimate(&p, &sched, &x_t, &[0], None).unwrap();
    let inv = (1.0 / sched.alpha(100)) as f32;
    for (e, x) in est.data().iter().zip(x_t.data()) {
        assert_eq!(*e, (x * inv).clamp(0.0, 1.0));
    }
}

#[test]
fn tiny_alpha_is_a_numeric_error() {
    let sched = NoiseSchedule::from_alpha_sq(ScheduleKind::Cosine, &[0.5, 1e-14]).unwrap();
    let model = DenoiserModel::init(arch(16, 8, Variant::Standard, 2), 4).unwrap();
    let p = ModelPredictor::new(&model, 1).unwrap();
    let x = Tensor::zeros(&[1, 1, 16, 16]);
    let r = one_step_x0_estimate(&p, &sched, &x, &[0], None);
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn trained_sampler_matches_training_mean() {
    let model = DenoiserModel::init(arch(16, 16, Variant::Standard, 1000), 1).unwrap();
    let sched = model.arch.schedule().unwrap();
    let mut t = Trainer::new(model, sched.clone(), AdamConfig { lr: 2e-3, ..Default::default() }).unwrap();
    let mut rng = seed::rng(21);
    let mut train_mean = 0.0;
    for _ in 0..1500 {
        let b = two_class_batch(8, 16, &mut rng);
        train_mean += b.images.mean() / 1500.0;
        t.train_step_standard(&b, &mut rng).unwrap();
    }
    let model = t.into_model();
    let p = ModelPredictor::new(&model, 16).unwrap();
    let conds: Vec<usize> = (0..16).map(|i| 1 + i % 2).collect();
    let out = ddim_sample(&p, &sched, 50, &[16, 1, 16, 16], &conds, 8, None).unwrap();
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((out.mean() - train_mean).abs() < 0.15, "{} vs {train_mean}", out.mean());
}

#[test]
fn checkpoint_round_trip_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = DenoiserModel::init(arch(16, 8, Variant::Standard, 100), 4).unwrap();
    model.save(&path).unwrap();
    let back = DenoiserModel::load(&path).unwrap();
    assert_eq!(back.arch, model.arch);
    assert_eq!(back.params, model.params);
    // a sidecar that disagrees with the tensors is rejected
    let mut other = model.arch.clone();
    other.base_width = 16;
    std::fs::write(DenoiserModel::sidecar_path(&path), serde_json::to_string(&other).unwrap()).unwrap();
    assert!(matches!(DenoiserModel::load(&path), Err(Error::Format(_))));
    std::fs::write(DenoiserModel::sidecar_path(&path), r#"{"height": 16, "bogus": 1}"#).unwrap();
    assert!(DenoiserModel::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_sample_is_linear(a in -3.0f32..3.0, t in 1usize..=100, s in any::<u64>()) {
        let sched = NoiseSchedule::new(100, ScheduleKind::Linear).unwrap();
        let x = initial_noise(&[1, 1, 4, 4], s);
        let e = initial_noise(&[1, 1, 4, 4], s ^ 1);
        let lhs = sched.q_sample(&x.scale(a), t, &e.scale(a)).unwrap();
        let rhs = sched.q_sample(&x, t, &e).unwrap().scale(a);
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn schedules_are_monotone(t_max in 2usize..400, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(t_max, kind).unwrap();
        for t in 1..=t_max {
            prop_assert!(s.alpha(t) <= s.alpha(t - 1));
            prop_assert!(s.sigma(t) >= s.sigma(t - 1));
            prop_assert!(s.lambda(t) < s.lambda(t - 1));
        }
        prop_assert!(s.alpha(t_max).powi(2) < 1e-3);
    }

    #[test]
    fn training_mask_coverage_is_bounded(seed in any::<u64>()) {
        let m = random_training_mask(32, 32, seed).unwrap();
        prop_assert!((0.05..=0.95).contains(&m.coverage()));
    }
}

#[test]
fn training_mask_sweep() {
    let mut seen = std::collections::HashSet::new();
    for s in 0..1000 {
        let m = random_training_mask(32, 32, s).unwrap();
        assert!((0.05..=0.95).contains(&m.coverage()));
        assert!(m.bits().iter().all(|&b| b <= 1));
        seen.insert(m);
    }
    assert!(seen.len() > 990);
}
