mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shield::bench::{
    edit, evaluate, finetune_inpaint, generate_dataset, records_csv, run_benchmark, summary_json, train_standard,
    transfer_eval, BenchRun,
};
use shield::diffusion::DenoiserModel;
use shield::mask::{augment_mask, BinaryMask};
use shield::protect::{apply_protection, pgd_protect, Region, RegionKind};
use shield::tensor::checkpoint;
use shield::{image, seed, selfcheck, Error, Result, Tensor};

use config::RunConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "shield", version, about = "Protect images against diffusion inpainting edits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for benchmark jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct Files {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a standard denoiser on generated scenes.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Expand a standard model to the inpaint variant and fine-tune it.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Standard checkpoint to start from.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Optimize a perturbation for an image and its sensitive-region mask.
    Protect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: Files,
    },
    /// Inpaint everything outside the mask.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: Files,
        /// Perturbation to apply before editing.
        #[arg(long)]
        delta: Option<PathBuf>,
        /// Condition id of the edit.
        #[arg(long)]
        cond: Option<usize>,
    },
    /// Apply the configured purifiers to an image.
    Purify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Shrink a mask with the contour augmentation.
    AugmentMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run the benchmark (training models when no checkpoint is given).
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Independently trained model for transfer evaluation.
        #[arg(long)]
        transfer_checkpoint: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Selfcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Finetune { common, .. }
            | Command::Protect { common, .. }
            | Command::Edit { common, .. }
            | Command::Purify { common, .. }
            | Command::AugmentMask { common, .. }
            | Command::Bench { common, .. }
            | Command::Selfcheck { common } => common,
        }
    }
}

/// Defaults, then the config file, then flags.
fn effective_config(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.bench.jobs = j;
    }
    let io = &mut cfg.io;
    let set = |slot: &mut Option<PathBuf>, flag: &Option<PathBuf>| {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    };
    match cmd {
        Command::Finetune { base, .. } => set(&mut io.base_checkpoint, base),
        Command::Protect { files, .. } | Command::Edit { files, .. } => {
            set(&mut io.checkpoint, &files.checkpoint);
            set(&mut io.image, &files.image);
            set(&mut io.mask, &files.mask);
            if let Command::Edit { delta, cond, .. } = cmd {
                set(&mut io.delta, delta);
                if cond.is_some() {
                    io.cond = *cond;
                }
            }
        }
        Command::Purify { image, .. } => set(&mut io.image, image),
        Command::AugmentMask { mask, .. } => set(&mut io.mask, mask),
        Command::Bench {
            checkpoint,
            transfer_checkpoint,
            ..
        } => {
            set(&mut io.checkpoint, checkpoint);
            set(&mut io.transfer_checkpoint, transfer_checkpoint);
        }
        Command::Train { .. } | Command::Selfcheck { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::usage(format!("missing {what} (flag or io section)")))
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(out.join(name), contents)?;
    Ok(())
}

fn loss_csv(losses: &[f32]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn load_inpaint(path: &Path) -> Result<DenoiserModel> {
    let m = DenoiserModel::load(path)?;
    if m.variant() != shield::diffusion::Variant::Inpaint {
        return Err(Error::usage(format!("{} is not an inpaint model", path.display())));
    }
    Ok(m)
}

fn load_pair(cfg: &RunConfig) -> Result<(Tensor, BinaryMask)> {
    let x = image::load(required(&cfg.io.image, "image")?)?;
    let m = BinaryMask::load(required(&cfg.io.mask, "mask")?)?;
    let s = x.shape();
    if s[2] != m.height() || s[3] != m.width() {
        return Err(Error::usage(format!(
            "mask is {}x{} but image is {}x{}",
            m.height(),
            m.width(),
            s[2],
            s[3]
        )));
    }
    Ok((x, m))
}

fn save_delta(path: &Path, delta: &Tensor) -> Result<()> {
    checkpoint::save(path, &BTreeMap::from([("delta".to_string(), delta.clone())]))
}

fn load_delta(path: &Path) -> Result<Tensor> {
    checkpoint::load(path)?
        .remove("delta")
        .ok_or_else(|| Error::Format(format!("{} holds no 'delta' tensor", path.display())))
}

fn logging_trainer<'a>(losses: &'a mut Vec<f32>, label: &'a str, every: usize) -> impl FnMut(usize, f32) + 'a {
    move |step, loss| {
        losses.push(loss);
        if (step + 1) % every == 0 {
            eprintln!("{label} step {} loss {loss:.4}", step + 1);
        }
    }
}

fn run(cmd: &Command) -> Result<u8> {
    let cfg = effective_config(cmd)?;
    let out = cmd.common().out.clone();
    fs::create_dir_all(&out)?;
    write(&out, "config.json", cfg.to_json())?;
    match cmd {
        Command::Train { .. } => {
            let mut losses = Vec::new();
            let model = train_standard(
                &cfg.train_config(),
                cfg.seed,
                &mut logging_trainer(&mut losses, "train", 250),
            )?;
            model.save(&out.join("model.ckpt"))?;
            write(&out, "loss.csv", loss_csv(&losses))?;
        }
        Command::Finetune { .. } => {
            let base = DenoiserModel::load(required(&cfg.io.base_checkpoint, "base checkpoint")?)?;
            let mut losses = Vec::new();
            let model = finetune_inpaint(
                &base,
                &cfg.train_config(),
                cfg.seed,
                &mut logging_trainer(&mut losses, "finetune", 250),
            )?;
            model.save(&out.join("inpaint.ckpt"))?;
            write(&out, "loss.csv", loss_csv(&losses))?;
        }
        Command::Protect { .. } => {
            let model = load_inpaint(required(&cfg.io.checkpoint, "checkpoint")?)?;
            let (x, m) = load_pair(&cfg)?;
            let mut attack = cfg.attack.clone();
            attack.seed = seed::derive(cfg.seed, "attack", 0);
            let r = pgd_protect(&model, &x, &m, &attack)?;
            let region = match attack.region {
                RegionKind::MaskOnly => Region::MaskOnly(m),
                RegionKind::WholeImage => Region::WholeImage,
            };
            save_delta(&out.join("delta.ckpt"), &r.delta)?;
            image::save(&out.join("protected.pgm"), &apply_protection(&x, &r.delta, &region)?)?;
            write(&out, "loss.csv", loss_csv(&r.loss_trace))?;
            eprintln!(
                "protected in {:.1}s, |delta|_inf = {:.5}, best loss {:?}",
                r.wall_s,
                r.delta.max_abs(),
                r.best_loss
            );
        }
        Command::Edit { .. } => {
            let model = load_inpaint(required(&cfg.io.checkpoint, "checkpoint")?)?;
            let (mut x, m) = load_pair(&cfg)?;
            if let Some(p) = &cfg.io.delta {
                x = apply_protection(&x, &load_delta(p)?, &Region::WholeImage)?;
            }
            let cond = cfg.io.cond.unwrap_or(1);
            let seed = seed::derive(cfg.seed, "edit", 0);
            let edited = edit(&model, &x, &m, cond, cfg.bench.edit_steps, seed)?;
            image::save(&out.join("edited.pgm"), &edited)?;
        }
        Command::Purify { .. } => {
            let x = image::load(required(&cfg.io.image, "image")?)?;
            if cfg.bench.purifiers.is_empty() {
                return Err(Error::usage("no purifiers configured (bench.purifiers)"));
            }
            for p in &cfg.bench.purifiers {
                image::save(&out.join(format!("purified_{}.pgm", p.label())), &p.apply(&x)?)?;
            }
        }
        Command::AugmentMask { .. } => {
            let m = BinaryMask::load(required(&cfg.io.mask, "mask")?)?;
            let params = cfg.augment.params(&m, seed::derive(cfg.seed, "augment", 0));
            augment_mask(&m, &params)?.save(&out.join("augmented.pgm"))?;
            write(&out, "augment.json", serde_json::to_string_pretty(&params)?)?;
        }
        Command::Bench { .. } => return bench(&cfg, &out),
        Command::Selfcheck { .. } => {
            let checks = selfcheck::run_all()?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(if ok { 0 } else { EXIT_NUMERIC });
        }
    }
    Ok(0)
}

fn trained_inpaint(cfg: &RunConfig, master: u64, label: &str) -> Result<DenoiserModel> {
    let tc = cfg.train_config();
    let mut losses = Vec::new();
    let base = train_standard(&tc, master, &mut logging_trainer(&mut losses, label, 500))?;
    let model = finetune_inpaint(&base, &tc, master, &mut logging_trainer(&mut losses, label, 500))?;
    Ok(model)
}

fn bench(cfg: &RunConfig, out: &Path) -> Result<u8> {
    let data = generate_dataset(cfg.bench.n_images, cfg.seed)?;
    let model = match &cfg.io.checkpoint {
        Some(p) => load_inpaint(p)?,
        None => {
            let m = trained_inpaint(cfg, cfg.seed, "model")?;
            m.save(&out.join("model.ckpt"))?;
            m
        }
    };
    let (mut all, archive) = run_benchmark(&data, &model, "A", &cfg.bench, cfg.seed)?;
    for p in &cfg.bench.purifiers {
        let r = evaluate(&data, &model, "A", &archive, Some(p), &cfg.bench, cfg.seed)?;
        merge(&mut all, r);
    }
    if let Some(p) = &cfg.io.transfer_checkpoint {
        let b = load_inpaint(p)?;
        merge(&mut all, transfer_eval(&data, &archive, &b, "B", &cfg.bench, cfg.seed)?);
    }
    write(out, "records.csv", records_csv(&all.records))?;
    write(out, "summary.json", serde_json::to_string_pretty(&summary_json(&all))?)?;
    eprintln!("{} records, {} failures", all.records.len(), all.failures.len());
    Ok(if all.failed() { EXIT_PARTIAL } else { 0 })
}

fn merge(into: &mut BenchRun, other: BenchRun) {
    into.records.extend(other.records);
    into.failures.extend(other.failures);
    into.jobs += other.jobs;
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}
