use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shield::bench::generate_dataset;
use shield::mask::{rasterize_all, trace_contours, BinaryMask};
use shield::tensor::checkpoint;
use shield::image;

const TINY: &str = r#"{
  "model": {"base_width": 8},
  "schedule": {"timesteps": 50},
  "train": {"standard_steps": 3, "inpaint_steps": 3, "batch": 2},
  "attack": {"steps": 3, "truncation": 2},
  "bench": {"n_images": 1, "steps": 2, "edit_steps": 2, "truncation": 2, "wall_clock": false,
            "methods": ["ours_early_stage_aug", "unprotected"],
            "purifiers": [{"kind": "dct_quantize", "quality": 65}]}
}"#;

fn shield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shield")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("tiny.json"), TINY).unwrap();
        let item = &generate_dataset(1, 3).unwrap()[0];
        image::save(&f.path("img.pgm"), &item.image).unwrap();
        item.m_gt.save(&f.path("mask.pgm")).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.json")
    }

    /// Trains and fine-tunes a tiny model; returns the inpaint checkpoint.
    fn inpaint_model(&self) -> PathBuf {
        let train = self.path("train");
        let o = shield(&["train", "--config", s(&self.config()), "--out", s(&train)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ft = self.path("ft");
        let base = train.join("model.ckpt");
        let o = shield(&["finetune", "--config", s(&self.config()), "--base", s(&base), "--out", s(&ft)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ft.join("inpaint.ckpt")
    }
}

#[test]
fn train_is_reproducible_and_echoes_its_config() {
    let f = Fixture::new();
    let a = f.path("a/nested/run");
    let b = f.path("b");
    for out in [&a, &b] {
        let o = shield(&["train", "--config", s(&f.config()), "--seed", "5", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let bytes = |p: &Path| std::fs::read(p.join("model.ckpt")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert!(bytes(&a).starts_with(b"DGCKPT1"));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 5);
    assert_eq!(echoed["model"]["base_width"], 8);
    // defaults are filled in
    assert!((echoed["train"]["lr"].as_f64().unwrap() - 1e-3).abs() < 1e-9);
    let losses = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.json"), r#"{"model": {"depth": 3}}"#).unwrap();
    let o = shield(&["train", "--config", s(&f.path("bad.json")), "--out", s(&f.path("x"))]);
    assert_eq!(code(&o), 2);
    std::fs::write(f.path("bad2.json"), r#"{"attack": {"gamma": 0.5, "eta": 0.1}}"#).unwrap();
    let o = shield(&["train", "--config", s(&f.path("bad2.json")), "--out", s(&f.path("x"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&shield(&["nonsense"])), 2);
    let o = shield(&["protect", "--config", s(&f.config()), "--out", s(&f.path("x"))]);
    assert_eq!(code(&o), 2, "missing inputs");
}

#[test]
fn protect_edit_and_bench_pipeline() {
    let f = Fixture::new();
    let model = f.inpaint_model();
    let cfg = f.config();

    // a standard checkpoint cannot be fine-tuned twice
    let o = shield(&["finetune", "--config", s(&cfg), "--base", s(&model), "--out", s(&f.path("again"))]);
    assert_eq!(code(&o), 2);

    let p1 = f.path("p1");
    let p2 = f.path("p2");
    for out in [&p1, &p2] {
        let o = shield(&[
            "protect", "--config", s(&cfg), "--checkpoint", s(&model), "--image", s(&f.path("img.pgm")),
            "--mask", s(&f.path("mask.pgm")), "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let delta = checkpoint::load(&p1.join("delta.ckpt")).unwrap().remove("delta").unwrap();
    assert!(delta.max_abs() <= 16.0 / 255.0);
    assert!(delta.max_abs() > 0.0);
    assert_eq!(
        std::fs::read(p1.join("delta.ckpt")).unwrap(),
        std::fs::read(p2.join("delta.ckpt")).unwrap()
    );
    assert!(p1.join("protected.pgm").exists() && p1.join("loss.csv").exists());

    // mismatched mask
    BinaryMask::ones(8, 8).save(&f.path("small.pgm")).unwrap();
    let o = shield(&[
        "protect", "--config", s(&cfg), "--checkpoint", s(&model), "--image", s(&f.path("img.pgm")),
        "--mask", s(&f.path("small.pgm")), "--out", s(&f.path("bad")),
    ]);
    assert_eq!(code(&o), 2);

    let e = f.path("e");
    let o = shield(&[
        "edit", "--config", s(&cfg), "--checkpoint", s(&model), "--image", s(&f.path("img.pgm")),
        "--mask", s(&f.path("mask.pgm")), "--delta", s(&p1.join("delta.ckpt")), "--cond", "2", "--out", s(&e),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let edited = image::load(&e.join("edited.pgm")).unwrap();
    assert_eq!(edited.shape(), &[1, 1, 32, 32]);

    let b = f.path("bench");
    let o = shield(&["bench", "--config", s(&cfg), "--checkpoint", s(&model), "--jobs", "2", "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(b.join("records.csv")).unwrap();
    // images × masks × conditions × methods, plain and purified
    assert_eq!(csv.lines().count(), 1 + 2 * (1 * 5 * 4 * 2));
    assert!(csv.lines().filter(|l| l.contains(",unprotected,")).all(|l| l.contains(",inf,")));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failed"], false);
}

#[test]
fn purify_and_augment_write_their_outputs() {
    let f = Fixture::new();
    let out = f.path("pur");
    let o = shield(&["purify", "--config", s(&f.config()), "--image", s(&f.path("img.pgm")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let x = image::load(&f.path("img.pgm")).unwrap();
    let p = image::load(&out.join("purified_dct65.pgm")).unwrap();
    assert_eq!(p.shape(), x.shape());

    std::fs::write(f.path("still.json"), r#"{"augment": {"zeta": 0.0}}"#).unwrap();
    let out = f.path("aug");
    let o = shield(&[
        "augment-mask", "--config", s(&f.path("still.json")), "--mask", s(&f.path("mask.pgm")), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = BinaryMask::load(&f.path("mask.pgm")).unwrap();
    let a = BinaryMask::load(&out.join("augmented.pgm")).unwrap();
    assert_eq!(a, rasterize_all(&trace_contours(&m).unwrap(), 32, 32).unwrap());
}

#[test]
fn selfcheck_passes() {
    let o = shield(&["selfcheck", "--out", s(&tempfile::tempdir().unwrap().path().join("sc"))]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}
