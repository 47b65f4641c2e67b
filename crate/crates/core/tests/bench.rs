mod common;

use common::random_model_of;
use shield::bench::*;
use shield::diffusion::{DenoiserModel, Variant};
use shield::mask::{BinaryMask, Split};
use shield::purify::PurifyConfig;
use shield::Tensor;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        base_width: 8,
        timesteps: 50,
        standard_steps: 2,
        inpaint_steps: 2,
        batch: 2,
        ..TrainConfig::default()
    }
}

fn tiny_inpaint(s: u64) -> DenoiserModel {
    let mut arch = tiny_config().arch();
    arch.variant = Variant::Inpaint;
    random_model_of(arch, s)
}

fn quick_bench(methods: Vec<Method>) -> BenchConfig {
    BenchConfig {
        n_images: 2,
        steps: 2,
        edit_steps: 2,
        truncation: 2,
        methods,
        wall_clock: false,
        ..BenchConfig::default()
    }
}

#[test]
fn dataset_is_deterministic_and_well_formed() {
    let a = generate_dataset(6, 3).unwrap();
    let b = generate_dataset(6, 3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.m_gt, y.m_gt);
        assert_eq!(x.family.len(), y.family.len());
    }
    for (i, item) in a.iter().enumerate() {
        assert_eq!(item.id, format!("img{i:03}"));
        assert_eq!(item.image.shape(), &[1, 1, SCENE_SIZE, SCENE_SIZE]);
        assert!(item.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let frac = item.m_gt.area() as f64 / (SCENE_SIZE * SCENE_SIZE) as f64;
        assert!((0.1..=0.5).contains(&frac), "{frac}");
        assert_eq!(item.m_gt.components().len(), 1);
        assert_eq!(item.conds, vec![1, 2, 3, 4]);
        assert!((1..=NUM_CLASSES).contains(&item.class));
        assert_eq!(item.family.len(), 5);
        assert_eq!(item.family[0].split, Split::Seen);
        assert_eq!(item.family[0].mask, item.m_gt);
        assert!(item.family[1..].iter().all(|m| m.split == Split::Unseen));
    }
    // distinct scenes
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let rms = (a[i].image.sub(&a[j].image).unwrap().sum_sq() / (SCENE_SIZE * SCENE_SIZE) as f64).sqrt();
            assert!(rms > 0.05, "{i} {j}: {rms}");
        }
    }
    assert_ne!(generate_dataset(1, 4).unwrap()[0].image, a[0].image);
    assert!(generate_dataset(0, 1).is_err());
}

#[test]
fn class_backgrounds_are_ordered() {
    let means: Vec<f64> = (1..=NUM_CLASSES).map(|c| class_mean(c).unwrap()).collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    assert!(class_mean(0).is_err());
    assert!(class_mean(NUM_CLASSES + 1).is_err());
}

#[test]
fn paste_examples() {
    let src = Tensor::full(&[1, 1, 2, 2], 0.2);
    let edited = Tensor::full(&[1, 1, 2, 2], 0.9);
    let m = BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 0);
    let out = postprocess_paste(&src, &m, &edited).unwrap();
    assert_eq!(out.data(), &[0.2, 0.9, 0.9, 0.9]);
    assert_eq!(postprocess_paste(&src, &BinaryMask::ones(2, 2), &edited).unwrap(), src);
    assert_eq!(postprocess_paste(&src, &BinaryMask::zeros(2, 2), &edited).unwrap(), edited);
    assert!(postprocess_paste(&src, &BinaryMask::ones(3, 3), &edited).is_err());
    // pasting twice changes nothing
    assert_eq!(postprocess_paste(&src, &m, &out).unwrap(), out);
}

#[test]
fn psnr_examples() {
    let a = Tensor::zeros(&[1, 1, 4, 4]);
    let b = Tensor::full(&[1, 1, 4, 4], 0.5);
    assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-9);
    assert_eq!(psnr(&b, &a).unwrap(), psnr(&a, &b).unwrap());
    assert_eq!(psnr(&b, &b).unwrap(), f64::INFINITY);
    // one of three pixels off by one 8-bit level: 20·log10(255) + 10·log10(3)
    let x = Tensor::new(vec![1, 1, 1, 3], vec![0.5, 0.5, 0.5]).unwrap();
    let y = Tensor::new(vec![1, 1, 1, 3], vec![0.5, 0.5, 0.5 + 1.0 / 255.0]).unwrap();
    let expected = 20.0 * 255f64.log10() + 10.0 * 3f64.log10();
    assert!((psnr(&x, &y).unwrap() - expected).abs() < 1e-4);
    assert!((expected - 52.9).abs() < 0.01);
    assert!(psnr(&a, &Tensor::zeros(&[1, 1, 2, 2])).is_err());
}

#[test]
fn edits_keep_the_mask_region_and_are_deterministic() {
    let model = tiny_inpaint(1);
    let item = &generate_dataset(1, 1).unwrap()[0];
    let full = edit(&model, &item.image, &BinaryMask::ones(32, 32), 1, 3, 7).unwrap();
    assert_eq!(full, item.image);
    let a = edit(&model, &item.image, &item.m_gt, 2, 3, 7).unwrap();
    assert_eq!(a, edit(&model, &item.image, &item.m_gt, 2, 3, 7).unwrap());
    assert_ne!(a, edit(&model, &item.image, &item.m_gt, 2, 3, 8).unwrap());
    for (i, (&o, &s)) in a.data().iter().zip(item.image.data()).enumerate() {
        if item.m_gt.get(i % 32, i / 32) {
            assert_eq!(o, s);
        }
        assert!((0.0..=1.0).contains(&o));
    }
    // batched edits equal one-at-a-time edits
    let m2 = &item.family[1].mask;
    let jobs = [
        EditJob { input: &item.image, mask: &item.m_gt, cond: 2, seed: 7 },
        EditJob { input: &item.image, mask: m2, cond: 3, seed: 9 },
    ];
    let batch = edit_batch(&model, &jobs, 3).unwrap();
    assert_eq!(batch[0], a);
    let single = edit(&model, &item.image, m2, 3, 3, 9).unwrap();
    assert!(batch[1].sub(&single).unwrap().max_abs() < 1e-5);
    let standard = random_model_of(tiny_config().arch(), 1);
    assert!(edit(&standard, &item.image, &item.m_gt, 1, 3, 7).is_err());
}

#[test]
fn fmt6_and_csv() {
    assert_eq!(fmt6(12.3456789), "12.3457");
    assert_eq!(fmt6(0.000123456789), "0.000123457");
    assert_eq!(fmt6(1.0), "1");
    assert_eq!(fmt6(f64::INFINITY), "inf");
    assert_eq!(fmt6(1234567.0), "1234570");
    let r = BenchRecord {
        image_id: "img000".into(),
        mask_id: "gt".into(),
        split: Split::Seen,
        cond_id: 2,
        method: Method::OursAug.name().into(),
        purifier: String::new(),
        target_model: "A".into(),
        psnr_db: 21.123456,
        wall_s: 0.0,
        seed: 42,
    };
    let csv = records_csv(&[r]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines[1], "img000,gt,seen,2,ours_early_stage_aug,,A,21.1235,0,42");
}

#[test]
fn methods_parse_by_name() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("diffusion".parse::<Method>().is_err());
}

#[test]
fn median_rules() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
    assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY, 2.0]), Some(f64::INFINITY));
    assert_eq!(median(&[f64::INFINITY, f64::INFINITY]), Some(f64::INFINITY));
}

#[test]
fn small_benchmark_has_every_row_and_is_reproducible() {
    let model = tiny_inpaint(2);
    let data = generate_dataset(2, 5).unwrap();
    let config = quick_bench(vec![
        Method::OursAug,
        Method::PhotoguardTargeted,
        Method::AdvdmRecon,
        Method::RandomNoise,
        Method::Unprotected,
    ]);
    let (run, archive) = run_benchmark(&data, &model, "A", &config, 11).unwrap();
    assert_eq!(run.records.len(), 2 * 5 * 4 * 5);
    assert!(run.failures.is_empty() && !run.failed());
    assert_eq!(run.jobs, 2 * 5 * 2);
    assert!(select(&run.records, Method::Unprotected, Split::Seen).all(|p| p == f64::INFINITY));
    assert!(select(&run.records, Method::OursAug, Split::Unseen).all(|p| p.is_finite()));
    for ((_, m), e) in &archive.entries {
        assert!(e.delta.max_abs() <= config.eta);
        let expected = if config.attack(*m, 0, 0).is_some() { 2 } else { 0 };
        assert_eq!(e.loss_trace.len(), expected);
    }
    let (again, _) = run_benchmark(&data, &model, "A", &config, 11).unwrap();
    assert_eq!(records_csv(&run.records), records_csv(&again.records));
    let summary = summary_json(&run);
    assert_eq!(summary["groups"].as_array().unwrap().len(), 5 * 2);

    // purification and transfer reuse the archive
    let dct = PurifyConfig::DctQuantize { quality: 65 };
    let purified = evaluate(&data, &model, "A", &archive, Some(&dct), &config, 11).unwrap();
    assert!(purified.records.iter().all(|r| r.purifier == "dct65"));
    assert!(select(&purified.records, Method::Unprotected, Split::Seen).all(|p| p == f64::INFINITY));
    let model_b = tiny_inpaint(3);
    let transfer = transfer_eval(&data, &archive, &model_b, "B", &config, 11).unwrap();
    assert_eq!(transfer.records.len(), run.records.len());
    assert!(transfer.records.iter().all(|r| r.target_model == "B"));
    let mut other = common::small_arch(Variant::Inpaint);
    other.vocab = 5;
    let mismatched = random_model_of(other, 1);
    let e = transfer_eval(&data, &archive, &mismatched, "C", &config, 11).unwrap_err();
    assert!(matches!(e, shield::Error::Usage(_)));
}

#[test]
fn sweeps_report_one_run_per_budget() {
    let model = tiny_inpaint(4);
    let data = generate_dataset(1, 6).unwrap();
    let config = quick_bench(vec![Method::OursNoAug]);
    let s = eta_sweep(&data, &model, Method::OursNoAug, &[2.0 / 255.0, 8.0 / 255.0], &config, 1).unwrap();
    assert_eq!(s.runs.len(), 2);
    assert!(s.final_losses.iter().all(|l| l.is_finite()));
    assert!(s.runs.iter().all(|r| r.records.iter().all(|x| x.method == "ours_no_aug")));
    let s = steps_sweep(&data, &model, Method::OursNoAug, &[1, 3], &config, 1).unwrap();
    assert_eq!(s.budgets, vec![1.0, 3.0]);
    assert!(steps_sweep(&data, &model, Method::OursNoAug, &[3, 1], &config, 1).is_err());
}

#[test]
fn training_runs_are_reproducible() {
    let config = tiny_config();
    let mut losses = Vec::new();
    let a = train_standard(&config, 9, &mut |_, l| losses.push(l)).unwrap();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    let b = train_standard(&config, 9, &mut |_, _| {}).unwrap();
    assert_eq!(a.params, b.params);
    let inp = finetune_inpaint(&a, &config, 9, &mut |_, _| {}).unwrap();
    assert_eq!(inp.variant(), Variant::Inpaint);
    assert!(finetune_inpaint(&inp, &config, 9, &mut |_, _| {}).is_err());
    let bad = TrainConfig { batch: 0, ..config };
    assert!(train_standard(&bad, 1, &mut |_, _| {}).is_err());
}

#[test]
fn one_step_errors_compare_both_models() {
    let mut arch = tiny_config().arch();
    let standard = random_model_of(arch.clone(), 5);
    arch.variant = Variant::Inpaint;
    let inpaint = random_model_of(arch, 5);
    let data = generate_dataset(3, 2).unwrap();
    let items: Vec<(Tensor, BinaryMask)> = data.iter().map(|d| (d.image.clone(), d.m_gt.clone())).collect();
    let errs = one_step_keep_errors(&standard, &inpaint, &items, 1).unwrap();
    assert_eq!(errs.len(), 3);
    assert!(errs.iter().all(|&(a, b)| a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0));
    assert_eq!(errs, one_step_keep_errors(&standard, &inpaint, &items, 1).unwrap());
}
