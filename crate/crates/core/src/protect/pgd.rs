use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LossInputs, LossProgram};
use super::{project_linf, Region};
use crate::diffusion::{initial_noise, DenoiserModel};
use crate::error::{Error, Result};
use crate::mask::{augment_mask, default_zeta, AugmentParams, BinaryMask, DEFAULT_ITERATIONS, DEFAULT_SMOOTHING};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    EarlyStage,
    ReconMax,
    TargetedImage,
}

impl LossKind {
    /// +1 for losses that are maximized, −1 for the targeted loss.
    pub fn direction(self) -> f32 {
        match self {
            LossKind::EarlyStage | LossKind::ReconMax => 1.0,
            LossKind::TargetedImage => -1.0,
        }
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    MaskOnly,
    WholeImage,
}

/// Mask augmentation settings; ζ defaults to a size-dependent value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSettings {
    pub zeta: Option<f64>,
    pub s: f64,
    pub n: usize,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            zeta: None,
            s: DEFAULT_SMOOTHING,
            n: DEFAULT_ITERATIONS,
        }
    }
}

impl AugmentSettings {
    pub fn params(&self, m_tr: &BinaryMask, seed: u64) -> AugmentParams {
        AugmentParams {
            zeta: self.zeta.unwrap_or_else(|| default_zeta(m_tr)),
            s: self.s,
            n: self.n,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub loss: LossKind,
    pub eta: f32,
    pub gamma: f32,
    pub steps: usize,
    /// `None` optimizes against the training mask only.
    pub augment: Option<AugmentSettings>,
    /// Draw a fresh x_T (or t, ε) every iteration.
    pub noise_resample: bool,
    /// Gray level of the default target image of the targeted loss.
    pub target_value: f32,
    /// Explicit target image; overrides `target_value`.
    #[serde(skip)]
    pub target_image: Option<Tensor>,
    /// DDIM steps differentiated through by the targeted loss.
    pub truncation: usize,
    pub cond: usize,
    pub seed: u64,
    pub region: RegionKind,
    /// Return the iterate with the best loss instead of the last one.
    pub best_iterate: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::EarlyStage,
            eta: 16.0 / 255.0,
            gamma: 1.0 / 255.0,
            steps: 300,
            augment: Some(AugmentSettings::default()),
            noise_resample: true,
            target_value: 0.5,
            target_image: None,
            truncation: 4,
            cond: 0,
            seed: 0,
            region: RegionKind::MaskOnly,
            best_iterate: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= self.eta && self.eta <= 1.0) {
            return Err(Error::usage(format!(
                "need 0 < gamma <= eta <= 1, got gamma={} eta={}",
                self.gamma, self.eta
            )));
        }
        if self.loss == LossKind::TargetedImage && self.truncation == 0 {
            return Err(Error::usage("targeted loss needs truncation K >= 1"));
        }
        if let Some(a) = &self.augment {
            if a.zeta.is_some_and(|z| !(z >= 0.0 && z.is_finite())) || !(a.s > 0.0) || a.n == 0 {
                return Err(Error::usage(format!("invalid augmentation settings {a:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ProtectionResult {
    pub delta: Tensor,
    /// Loss of the iterate at the start of each iteration.
    pub loss_trace: Vec<f32>,
    pub best_loss: Option<f32>,
    pub best_iteration: Option<usize>,
    pub wall_s: f64,
    pub config: AttackConfig,
}

/// State after one PGD update, handed to observers.
pub struct IterationReport<'a> {
    pub iteration: usize,
    pub loss: f32,
    pub best_loss: f32,
    pub delta: &'a Tensor,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn pgd_protect(
    model: &DenoiserModel,
    x_src: &Tensor,
    m_tr: &BinaryMask,
    config: &AttackConfig,
) -> Result<ProtectionResult> {
    pgd_protect_observed(model, x_src, m_tr, config, &mut |_| {})
}

/// PGD with a callback after every update.
pub fn pgd_protect_observed(
    model: &DenoiserModel,
    x_src: &Tensor,
    m_tr: &BinaryMask,
    config: &AttackConfig,
    observer: &mut dyn FnMut(&IterationReport<'_>),
) -> Result<ProtectionResult> {
    let started = Instant::now();
    config.validate()?;
    let shape = model.arch.image_shape(1);
    x_src.expect_shape(&shape)?;
    if m_tr.height() != shape[2] || m_tr.width() != shape[3] {
        return Err(Error::usage(format!(
            "mask {}x{} does not match image {}x{}",
            m_tr.height(),
            m_tr.width(),
            shape[2],
            shape[3]
        )));
    }
    let mask_dependent = config.loss != LossKind::ReconMax || config.region == RegionKind::MaskOnly;
    if mask_dependent && m_tr.is_empty() {
        return Err(Error::usage("protection mask is empty"));
    }
    let region = match config.region {
        RegionKind::MaskOnly => Region::MaskOnly(m_tr.clone()),
        RegionKind::WholeImage => Region::WholeImage,
    };
    let kind = config.loss;
    let program = LossProgram::new(model, kind, config.truncation, config.cond)?;
    let target = match &config.target_image {
        Some(t) => t.clone(),
        None => Tensor::full(&shape, config.target_value),
    };
    let t_max = model.arch.timesteps;
    let draw = |index: usize, mask: BinaryMask| {
        let i = if config.noise_resample { index as u64 } else { 0 };
        LossInputs {
            x_src: x_src.clone(),
            mask,
            cond: config.cond,
            noise: initial_noise(&shape, seed::derive(config.seed, "pgd-noise", i)),
            t: seed::stream_rng(config.seed, "pgd-t", i).gen_range(1..=t_max),
            target: Some(target.clone()),
        }
    };
    let mask_for = |index: usize| -> Result<BinaryMask> {
        match &config.augment {
            Some(a) => augment_mask(m_tr, &a.params(m_tr, seed::derive(config.seed, "pgd-mask", index as u64))),
            None => Ok(m_tr.clone()),
        }
    };
    let outcome = pgd_with_objective(
        x_src,
        &region,
        &PgdSettings {
            eta: config.eta,
            gamma: config.gamma,
            steps: config.steps,
            direction: kind.direction(),
            best_iterate: config.best_iterate,
        },
        &mut |i, delta, with_grad| {
            let inp = draw(i, mask_for(i)?);
            if with_grad {
                let (l, g) = program.value_and_grad(model, &inp, delta)?;
                Ok((l, Some(g)))
            } else {
                Ok((program.value(model, &inp, delta)?, None))
            }
        },
        observer,
    )?;
    Ok(ProtectionResult {
        delta: outcome.delta,
        loss_trace: outcome.loss_trace,
        best_loss: outcome.best_loss,
        best_iteration: outcome.best_iteration,
        wall_s: started.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// Step schedule of a signed-gradient PGD run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdSettings {
    pub eta: f32,
    pub gamma: f32,
    pub steps: usize,
    /// +1 to ascend the objective, −1 to descend.
    pub direction: f32,
    pub best_iterate: bool,
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub delta: Tensor,
    pub loss_trace: Vec<f32>,
    pub best_loss: Option<f32>,
    pub best_iteration: Option<usize>,
}

/// `δ ← Proj(δ + direction·γ·sign(∇L))`, restricted to `region`, for any
/// objective. `objective(i, δ, with_grad)` returns the loss of δ at draw `i`
/// and, when asked, its gradient.
pub fn pgd_with_objective(
    x_src: &Tensor,
    region: &Region,
    settings: &PgdSettings,
    objective: &mut dyn FnMut(usize, &Tensor, bool) -> Result<(f32, Option<Tensor>)>,
    observer: &mut dyn FnMut(&IterationReport<'_>),
) -> Result<PgdOutcome> {
    let dir = settings.direction;
    let better = |a: f32, b: f32| a * dir > b * dir;
    let step = settings.gamma * dir;
    let mut delta = Tensor::zeros(x_src.shape());
    let mut trace = Vec::with_capacity(settings.steps);
    let mut best: Option<(f32, Tensor, usize)> = None;
    for i in 0..settings.steps {
        let (loss, grad) = objective(i, &delta, true)?;
        let grad = grad.ok_or_else(|| Error::usage("objective returned no gradient"))?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::numeric(format!("non-finite loss or gradient at iteration {i}")));
        }
        trace.push(loss);
        if best.as_ref().map_or(true, |(b, _, _)| better(loss, *b)) {
            best = Some((loss, delta.clone(), i));
        }
        let moved = delta.zip_map(&grad, |d, g| d + step * sign(g))?;
        delta = project_linf(&moved, x_src, settings.eta)?;
        region.restrict(&mut delta)?;
        observer(&IterationReport {
            iteration: i,
            loss,
            best_loss: best.as_ref().map_or(loss, |b| b.0),
            delta: &delta,
        });
    }

    let (delta, best_loss, best_iteration) = match best {
        Some((b, best_delta, bi)) if settings.best_iterate => {
            // the last update has not been scored yet
            let (last, _) = objective(settings.steps, &delta, false)?;
            if last.is_finite() && !better(b, last) {
                (delta, Some(last), Some(settings.steps))
            } else {
                (best_delta, Some(b), Some(bi))
            }
        }
        Some((b, _, bi)) => (delta, Some(b), Some(bi)),
        None => (delta, None, None),
    };
    Ok(PgdOutcome {
        delta,
        loss_trace: trace,
        best_loss,
        best_iteration,
    })
}

/// Uniform `±η` noise inside `region`, projected like a PGD iterate.
pub fn random_noise_delta(x_src: &Tensor, region: &Region, eta: f32, seed: u64) -> Result<Tensor> {
    let mut rng = seed::stream_rng(seed, "random-noise", 0);
    let raw = Tensor::from_fn(x_src.shape(), |_| rng.gen_range(-eta..=eta));
    let mut d = project_linf(&raw, x_src, eta)?;
    region.restrict(&mut d)?;
    Ok(d)
}
