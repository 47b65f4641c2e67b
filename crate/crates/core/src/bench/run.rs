use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::dataset::BenchItem;
use super::edit::{edit_batch, psnr, EditJob};
use crate::diffusion::DenoiserModel;
use crate::error::{Error, Result};
use crate::mask::{Split, BinaryMask};
use crate::protect::{
    apply_protection, pgd_protect, random_noise_delta, AttackConfig, AugmentSettings, LossKind,
    Region, RegionKind,
};
use crate::purify::PurifyConfig;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Early-stage loss with mask augmentation.
    #[serde(rename = "ours_early_stage_aug")]
    OursAug,
    #[serde(rename = "ours_no_aug")]
    OursNoAug,
    /// Targeted image loss through a truncated DDIM unroll.
    #[serde(rename = "photoguard_targeted")]
    PhotoguardTargeted,
    /// Reconstruction-loss ascent over the whole image.
    #[serde(rename = "advdm_recon")]
    AdvdmRecon,
    /// Reconstruction-loss ascent restricted to the mask region.
    #[serde(rename = "recon_max")]
    ReconMax,
    #[serde(rename = "random_noise_control")]
    RandomNoise,
    #[serde(rename = "unprotected")]
    Unprotected,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::OursAug,
        Method::OursNoAug,
        Method::PhotoguardTargeted,
        Method::AdvdmRecon,
        Method::ReconMax,
        Method::RandomNoise,
        Method::Unprotected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OursAug => "ours_early_stage_aug",
            Method::OursNoAug => "ours_no_aug",
            Method::PhotoguardTargeted => "photoguard_targeted",
            Method::AdvdmRecon => "advdm_recon",
            Method::ReconMax => "recon_max",
            Method::RandomNoise => "random_noise_control",
            Method::Unprotected => "unprotected",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_images: usize,
    pub eta: f32,
    pub gamma: f32,
    pub steps: usize,
    /// DDIM steps of every edit.
    pub edit_steps: usize,
    /// DDIM depth of the targeted baseline.
    pub truncation: usize,
    pub augment: AugmentSettings,
    pub noise_resample: bool,
    pub methods: Vec<Method>,
    /// Purifiers evaluated in addition to the plain run.
    pub purifiers: Vec<PurifyConfig>,
    /// Record measured protection time in `wall_s`; when off the column
    /// is 0 so reports are byte-reproducible.
    pub wall_clock: bool,
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_images: 16,
            eta: 16.0 / 255.0,
            gamma: 1.0 / 255.0,
            steps: 300,
            edit_steps: 10,
            truncation: 4,
            augment: AugmentSettings::default(),
            noise_resample: true,
            methods: vec![
                Method::OursAug,
                Method::OursNoAug,
                Method::PhotoguardTargeted,
                Method::AdvdmRecon,
                Method::RandomNoise,
                Method::Unprotected,
            ],
            purifiers: Vec::new(),
            wall_clock: true,
            jobs: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.edit_steps == 0 || self.jobs == 0 || self.methods.is_empty() {
            return Err(Error::usage("bench needs images, edit steps, jobs and methods >= 1"));
        }
        for p in &self.purifiers {
            p.validate()?;
        }
        let mut probe = self.attack(Method::OursAug, 0, 0).expect("ours is an attack");
        probe.loss = LossKind::TargetedImage;
        probe.validate()
    }

    /// PGD settings of `method` for item `index`; `None` for methods that
    /// are not optimized.
    pub fn attack(&self, method: Method, index: usize, master: u64) -> Option<AttackConfig> {
        let (loss, augment, region) = match method {
            Method::OursAug => (LossKind::EarlyStage, Some(self.augment), RegionKind::MaskOnly),
            Method::OursNoAug => (LossKind::EarlyStage, None, RegionKind::MaskOnly),
            Method::PhotoguardTargeted => (LossKind::TargetedImage, None, RegionKind::MaskOnly),
            Method::AdvdmRecon => (LossKind::ReconMax, None, RegionKind::WholeImage),
            Method::ReconMax => (LossKind::ReconMax, None, RegionKind::MaskOnly),
            Method::RandomNoise | Method::Unprotected => return None,
        };
        Some(AttackConfig {
            loss,
            eta: self.eta,
            gamma: self.gamma,
            steps: self.steps,
            augment,
            noise_resample: self.noise_resample,
            truncation: self.truncation,
            // protection does not know the attacker's edit: empty condition
            cond: 0,
            seed: seed::derive(master, "attack", index as u64),
            region,
            // single-draw scores of these stochastic objectives are too
            // noisy to rank iterates by; keep the last one
            best_iterate: false,
            ..AttackConfig::default()
        })
    }
}

/// Runs `f(0..n)` on up to `jobs` worker threads; results keep index order.
pub fn par_map<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                done.lock().expect("worker panicked").push((i, r));
            });
        }
    });
    let mut done = done.into_inner().expect("worker panicked");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

#[derive(Clone, Debug)]
pub struct DeltaEntry {
    pub delta: Tensor,
    pub loss_trace: Vec<f32>,
    pub wall_s: f64,
}

/// Perturbations per `(image id, method)`, as produced against one model.
#[derive(Clone, Debug, Default)]
pub struct DeltaArchive {
    pub model_id: String,
    pub entries: BTreeMap<(String, Method), DeltaEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Failure {
    pub image_id: String,
    pub method: String,
    pub message: String,
}

fn protect_one(
    model: &DenoiserModel,
    item: &BenchItem,
    index: usize,
    method: Method,
    config: &BenchConfig,
    master: u64,
) -> Result<DeltaEntry> {
    let started = Instant::now();
    match config.attack(method, index, master) {
        Some(attack) => {
            let r = pgd_protect(model, &item.image, &item.m_gt, &attack)?;
            Ok(DeltaEntry {
                delta: r.delta,
                loss_trace: r.loss_trace,
                wall_s: r.wall_s,
            })
        }
        None => {
            let delta = match method {
                Method::RandomNoise => random_noise_delta(
                    &item.image,
                    &Region::MaskOnly(item.m_gt.clone()),
                    config.eta,
                    seed::derive(master, "noise", index as u64),
                )?,
                _ => Tensor::zeros(item.image.shape()),
            };
            Ok(DeltaEntry {
                delta,
                loss_trace: Vec::new(),
                wall_s: started.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Protects every item with every configured method.
pub fn protect_all(
    dataset: &[BenchItem],
    model: &DenoiserModel,
    model_id: &str,
    config: &BenchConfig,
    master: u64,
) -> Result<(DeltaArchive, Vec<Failure>)> {
    config.validate()?;
    let methods = &config.methods;
    let results = par_map(config.jobs, dataset.len() * methods.len(), |j| {
        let (i, m) = (j / methods.len(), methods[j % methods.len()]);
        protect_one(model, &dataset[i], i, m, config, master)
    });
    let mut archive = DeltaArchive {
        model_id: model_id.to_string(),
        entries: BTreeMap::new(),
    };
    let mut failures = Vec::new();
    for (j, r) in results.into_iter().enumerate() {
        let (item, m) = (&dataset[j / methods.len()], methods[j % methods.len()]);
        match r {
            Ok(e) => {
                archive.entries.insert((item.id.clone(), m), e);
            }
            Err(e) if e.is_numeric() => failures.push(Failure {
                image_id: item.id.clone(),
                method: m.name().into(),
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((archive, failures))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub image_id: String,
    pub mask_id: String,
    pub split: Split,
    pub cond_id: usize,
    pub method: String,
    /// Empty when no purifier was applied.
    pub purifier: String,
    pub target_model: String,
    pub psnr_db: f64,
    pub wall_s: f64,
    pub seed: u64,
}

impl BenchRecord {
    fn key(&self) -> (&str, &str, usize, &str, &str, &str) {
        (
            &self.image_id,
            &self.mask_id,
            self.cond_id,
            &self.method,
            &self.purifier,
            &self.target_model,
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchRun {
    pub records: Vec<BenchRecord>,
    pub failures: Vec<Failure>,
    /// Jobs attempted (protections plus edit groups).
    pub jobs: usize,
}

impl BenchRun {
    /// At least 5% of jobs failed.
    pub fn failed(&self) -> bool {
        self.jobs > 0 && self.failures.len() as f64 >= 0.05 * self.jobs as f64
    }

    fn merge(&mut self, other: BenchRun) {
        self.records.extend(other.records);
        self.failures.extend(other.failures);
        self.jobs += other.jobs;
        self.sort();
    }

    fn sort(&mut self) {
        self.records.sort_by(|a, b| a.key().cmp(&b.key()));
        self.failures.sort();
    }
}

/// Seed shared by the clean and protected edit of one task.
fn edit_seed(master: u64, item: usize, mask: usize, cond: usize) -> u64 {
    seed::derive(master, "edit", ((item as u64) << 16) | ((mask as u64) << 8) | cond as u64)
}

/// Edits clean and protected inputs of every item under every family mask
/// and condition against `model`, recording PSNR between the two edits.
pub fn evaluate(
    dataset: &[BenchItem],
    model: &DenoiserModel,
    model_id: &str,
    archive: &DeltaArchive,
    purifier: Option<&PurifyConfig>,
    config: &BenchConfig,
    master: u64,
) -> Result<BenchRun> {
    let shape = model.arch.image_shape(1);
    if let Some(p) = purifier {
        p.validate()?;
    }
    for ((id, m), e) in &archive.entries {
        if e.delta.shape() != shape {
            return Err(Error::usage(format!(
                "perturbation for {id}/{m} has shape {:?}, model expects {:?}",
                e.delta.shape(),
                shape
            )));
        }
    }
    let methods: Vec<Method> = {
        let mut m: Vec<Method> = archive.entries.keys().map(|(_, m)| *m).collect();
        m.sort();
        m.dedup();
        m
    };
    let purify = |x: &Tensor| -> Result<Tensor> {
        match purifier {
            Some(p) => p.apply(x),
            None => Ok(x.clone()),
        }
    };
    let label = purifier.map(|p| p.label()).unwrap_or_default();
    let per_item = par_map(config.jobs, dataset.len(), |i| -> Result<BenchRun> {
        let item = &dataset[i];
        let mut tasks = Vec::new();
        for (k, lm) in item.family.iter().enumerate() {
            for &c in &item.conds {
                tasks.push((k, lm, c, edit_seed(master, i, k, c)));
            }
        }
        let edits_of = |input: &Tensor| {
            let jobs: Vec<EditJob<'_>> = tasks
                .iter()
                .map(|&(_, lm, c, s)| EditJob {
                    input,
                    mask: &lm.mask,
                    cond: c,
                    seed: s,
                })
                .collect();
            edit_batch(model, &jobs, config.edit_steps)
        };
        let clean = edits_of(&purify(&item.image)?)?;
        let mut run = BenchRun::default();
        for &m in &methods {
            let Some(entry) = archive.entries.get(&(item.id.clone(), m)) else {
                continue;
            };
            run.jobs += 1;
            let protected = apply_protection(&item.image, &entry.delta, &Region::WholeImage)?;
            let edited = match purify(&protected).and_then(|p| edits_of(&p)) {
                Ok(e) => e,
                Err(e) if e.is_numeric() => {
                    run.failures.push(Failure {
                        image_id: item.id.clone(),
                        method: m.name().into(),
                        message: e.to_string(),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            for (t, &(_, lm, c, s)) in tasks.iter().enumerate() {
                run.records.push(BenchRecord {
                    image_id: item.id.clone(),
                    mask_id: lm.id.to_string(),
                    split: lm.split,
                    cond_id: c,
                    method: m.name().into(),
                    purifier: label.clone(),
                    target_model: model_id.to_string(),
                    psnr_db: psnr(&edited[t], &clean[t])?,
                    wall_s: if config.wall_clock { entry.wall_s } else { 0.0 },
                    seed: s,
                });
            }
        }
        Ok(run)
    });
    let mut run = BenchRun::default();
    for r in per_item {
        run.merge(r?);
    }
    Ok(run)
}

/// Protect with every configured method, then evaluate on the same model.
pub fn run_benchmark(
    dataset: &[BenchItem],
    model: &DenoiserModel,
    model_id: &str,
    config: &BenchConfig,
    master: u64,
) -> Result<(BenchRun, DeltaArchive)> {
    let (archive, failures) = protect_all(dataset, model, model_id, config, master)?;
    let mut run = evaluate(dataset, model, model_id, &archive, None, config, master)?;
    run.jobs += dataset.len() * config.methods.len();
    run.failures.extend(failures);
    run.sort();
    Ok((run, archive))
}

/// Evaluates perturbations optimized against another model on `model_b`.
pub fn transfer_eval(
    dataset: &[BenchItem],
    archive: &DeltaArchive,
    model_b: &DenoiserModel,
    model_b_id: &str,
    config: &BenchConfig,
    master: u64,
) -> Result<BenchRun> {
    evaluate(dataset, model_b, model_b_id, archive, None, config, master)
}

/// One benchmark of `method` per budget value.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub budgets: Vec<f64>,
    pub runs: Vec<BenchRun>,
    /// Mean final loss of the optimized perturbations per budget.
    pub final_losses: Vec<f64>,
}

fn sweep(
    dataset: &[BenchItem],
    model: &DenoiserModel,
    method: Method,
    budgets: &[f64],
    config: &BenchConfig,
    master: u64,
    apply: impl Fn(&mut BenchConfig, f64),
) -> Result<SweepResult> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::usage("budgets must be a non-empty sorted list"));
    }
    let mut result = SweepResult {
        budgets: budgets.to_vec(),
        runs: Vec::new(),
        final_losses: Vec::new(),
    };
    for &b in budgets {
        let mut c = config.clone();
        c.methods = vec![method];
        apply(&mut c, b);
        let (run, archive) = run_benchmark(dataset, model, "victim", &c, master)?;
        let finals: Vec<f64> = archive
            .entries
            .values()
            .filter_map(|e| e.loss_trace.last().map(|&l| l as f64))
            .collect();
        let mean = if finals.is_empty() {
            f64::NAN
        } else {
            finals.iter().sum::<f64>() / finals.len() as f64
        };
        result.runs.push(run);
        result.final_losses.push(mean);
    }
    Ok(result)
}

/// ℓ∞-budget sweep (`etas` in `[0, 1]` units).
pub fn eta_sweep(
    dataset: &[BenchItem],
    model: &DenoiserModel,
    method: Method,
    etas: &[f64],
    config: &BenchConfig,
    master: u64,
) -> Result<SweepResult> {
    sweep(dataset, model, method, etas, config, master, |c, b| {
        c.eta = b as f32;
        c.gamma = c.gamma.min(c.eta);
    })
}

/// PGD step-count sweep.
pub fn steps_sweep(
    dataset: &[BenchItem],
    model: &DenoiserModel,
    method: Method,
    steps: &[usize],
    config: &BenchConfig,
    master: u64,
) -> Result<SweepResult> {
    let budgets: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    sweep(dataset, model, method, &budgets, config, master, |c, b| c.steps = b as usize)
}

/// Median with the upper and lower middle averaged; `+∞` sorts last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else if v[n / 2 - 1] == v[n / 2] {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// PSNR values of the records matching `method` and `split`.
pub fn select<'a>(records: &'a [BenchRecord], method: Method, split: Split) -> impl Iterator<Item = f64> + 'a {
    records
        .iter()
        .filter(move |r| r.method == method.name() && r.split == split)
        .map(|r| r.psnr_db)
}

pub fn median_psnr(records: &[BenchRecord], method: Method, split: Split) -> Option<f64> {
    median(&select(records, method, split).collect::<Vec<_>>())
}

/// Six significant digits; `inf` for the identical-edit sentinel.
pub fn fmt6(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x.is_nan() {
        return "nan".into();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub const CSV_HEADER: &str = "image_id,mask_id,split,cond_id,method,purifier,target_model,psnr_db,wall_s,seed";

pub fn records_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.image_id,
            r.mask_id,
            r.split.as_str(),
            r.cond_id,
            r.method,
            r.purifier,
            r.target_model,
            fmt6(r.psnr_db),
            fmt6(r.wall_s),
            r.seed
        ));
    }
    out
}

fn json_num(x: f64) -> Value {
    if x.is_finite() {
        json!(fmt6(x).parse::<f64>().expect("formatted float parses"))
    } else {
        json!(fmt6(x))
    }
}

/// Per (method, split, purifier, target model): median, mean and count.
pub fn summary_json(run: &BenchRun) -> Value {
    let mut groups: BTreeMap<(String, &str, String, String), Vec<f64>> = BTreeMap::new();
    for r in &run.records {
        groups
            .entry((r.method.clone(), r.split.as_str(), r.purifier.clone(), r.target_model.clone()))
            .or_default()
            .push(r.psnr_db);
    }
    let rows: Vec<Value> = groups
        .into_iter()
        .map(|((method, split, purifier, target), v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let mut row = Map::new();
            row.insert("method".into(), json!(method));
            row.insert("split".into(), json!(split));
            row.insert("purifier".into(), json!(purifier));
            row.insert("target_model".into(), json!(target));
            row.insert("median_psnr_db".into(), json_num(median(&v).expect("non-empty group")));
            row.insert("mean_psnr_db".into(), json_num(mean));
            row.insert("count".into(), json!(v.len()));
            Value::Object(row)
        })
        .collect();
    json!({
        "groups": rows,
        "jobs": run.jobs,
        "failures": run.failures.iter().map(|f| json!({
            "image_id": f.image_id, "method": f.method, "message": f.message
        })).collect::<Vec<_>>(),
        "failed": run.failed(),
    })
}

/// Per-item keep-region squared errors of one-step x̂_0 estimates for the
/// standard and inpaint models from a shared seeded x_T.
pub fn one_step_keep_errors(
    standard: &DenoiserModel,
    inpaint: &DenoiserModel,
    items: &[(Tensor, BinaryMask)],
    master: u64,
) -> Result<Vec<(f64, f64)>> {
    use crate::diffusion::{initial_noise, mask_batch, one_step_x0_estimate, ModelPredictor};
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let shape = standard.arch.image_shape(1);
    let n = items.len();
    let images: Vec<Tensor> = items.iter().map(|(x, _)| x.clone()).collect();
    let src = Tensor::stack(&images)?;
    let masks = mask_batch(&items.iter().map(|(_, m)| m).collect::<Vec<_>>())?;
    let noise: Vec<Tensor> = (0..n)
        .map(|i| initial_noise(&shape, seed::derive(master, "one-step", i as u64)))
        .collect();
    let x_big_t = Tensor::stack(&noise)?;
    let conds = vec![0; n];
    let sched = standard.arch.schedule()?;
    let std_est = one_step_x0_estimate(&ModelPredictor::new(standard, n)?, &sched, &x_big_t, &conds, None)?;
    let inp_est = one_step_x0_estimate(
        &ModelPredictor::new(inpaint, n)?,
        &inpaint.arch.schedule()?,
        &x_big_t,
        &conds,
        Some((&masks, &src)),
    )?;
    let keep_mse = |est: &Tensor, i: usize| {
        let (x, m) = &items[i];
        let e = est.batch_item(i);
        let plane = m.height() * m.width();
        let (mut s, mut k) = (0.0, 0usize);
        for (j, (&a, &b)) in e.data().iter().zip(x.data()).enumerate() {
            if m.bits()[j % plane] != 0 {
                s += (a as f64 - b as f64).powi(2);
                k += 1;
            }
        }
        s / k.max(1) as f64
    };
    Ok((0..n).map(|i| (keep_mse(&std_est, i), keep_mse(&inp_est, i))).collect())
}
