//! Deterministic DDIM sampling, both numerically and as an unrolled graph.

use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{DenoiserModel, EpsNodes, EpsProgram, Variant};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{GraphBuilder, NodeId, Tensor};

/// Smallest α_T the x̂_0 division accepts.
pub const MIN_ALPHA: f64 = 1e-6;

/// Anything that predicts ε for a batch at one shared timestep.
pub trait EpsPredictor {
    fn variant(&self) -> Variant;

    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        conds: &[usize],
        cond: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor>;
}

/// A model paired with a graph compiled for its batch size.
pub struct ModelPredictor<'a> {
    model: &'a DenoiserModel,
    program: EpsProgram,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a DenoiserModel, batch: usize) -> Result<Self> {
        Ok(Self {
            model,
            program: EpsProgram::new(model, batch)?,
        })
    }
}

impl EpsPredictor for ModelPredictor<'_> {
    fn variant(&self) -> Variant {
        self.model.variant()
    }

    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        conds: &[usize],
        cond: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        let ts = vec![t; self.program.batch()];
        self.program.run(self.model, x_t, &ts, conds, cond)
    }
}

/// Evenly spaced descending timesteps `round(T(n−i)/n)`, starting at T.
pub fn ddim_timesteps(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::usage(format!(
            "DDIM steps must lie in [1, {t_max}], got {n_steps}"
        )));
    }
    Ok((0..n_steps)
        .map(|i| ((t_max * (n_steps - i)) as f64 / n_steps as f64).round() as usize)
        .collect())
}

/// f32 coefficients of one η = 0 update from `t` to `prev`, shared by the
/// numeric and graph samplers so both round identically.
#[derive(Clone, Copy, Debug)]
struct StepCoeffs {
    sigma: f32,
    inv_alpha: f32,
    alpha: f32,
    inv_sigma: f32,
    alpha_prev: f32,
    sigma_prev: f32,
}

impl StepCoeffs {
    fn new(sched: &NoiseSchedule, t: usize, prev: usize) -> Result<Self> {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        if a < MIN_ALPHA {
            return Err(Error::numeric(format!("alpha at t={t} is {a:e}, below {MIN_ALPHA:e}")));
        }
        Ok(Self {
            sigma: s as f32,
            inv_alpha: (1.0 / a) as f32,
            alpha: a as f32,
            inv_sigma: (1.0 / s) as f32,
            alpha_prev: sched.alpha(prev) as f32,
            sigma_prev: sched.sigma(prev) as f32,
        })
    }
}

fn pairs(steps: &[usize]) -> Vec<(usize, usize)> {
    steps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, steps.get(i + 1).copied().unwrap_or(0)))
        .collect()
}

fn check_conditioning(variant: Variant, cond: Option<(&Tensor, &Tensor)>) -> Result<()> {
    match (variant, cond.is_some()) {
        (Variant::Inpaint, false) => Err(Error::usage("inpaint sampling needs mask and source")),
        (Variant::Standard, true) => Err(Error::usage("standard model takes no mask or source")),
        _ => Ok(()),
    }
}

/// Seeded standard-normal x_T.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// DDIM (η = 0) from a given x_T. `cond` is `(mask, source)` for inpainting.
pub fn ddim_from(
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    n_steps: usize,
    x_big_t: Tensor,
    conds: &[usize],
    cond: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    check_conditioning(model.variant(), cond)?;
    let steps = ddim_timesteps(sched.steps(), n_steps)?;
    let mut x = x_big_t;
    for (t, prev) in pairs(&steps) {
        let c = StepCoeffs::new(sched, t, prev)?;
        let eps = model.predict_eps(&x, t, conds, cond)?;
        let x0 = x.sub(&eps.scale(c.sigma))?.scale(c.inv_alpha).clamp(0.0, 1.0);
        let eps2 = x.sub(&x0.scale(c.alpha))?.scale(c.inv_sigma);
        x = x0.scale(c.alpha_prev).add(&eps2.scale(c.sigma_prev))?;
    }
    Ok(x.clamp(0.0, 1.0))
}

/// DDIM from x_T drawn with `seed`.
pub fn ddim_sample(
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    n_steps: usize,
    shape: &[usize],
    conds: &[usize],
    seed: u64,
    cond: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    ddim_from(model, sched, n_steps, initial_noise(shape, seed), conds, cond)
}

/// `clamp((x_T − σ_T ε_θ(x_T)) / α_T, 0, 1)`.
pub fn one_step_x0_estimate(
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    x_big_t: &Tensor,
    conds: &[usize],
    cond: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    check_conditioning(model.variant(), cond)?;
    let t = sched.steps();
    let c = StepCoeffs::new(sched, t, 0)?;
    let eps = model.predict_eps(x_big_t, t, conds, cond)?;
    Ok(x_big_t.sub(&eps.scale(c.sigma))?.scale(c.inv_alpha).clamp(0.0, 1.0))
}

/// Appends a K-step DDIM trajectory starting at node `x_big_t` and returns
/// the node of the final (clamped) sample. `mask` and `src` are the
/// inpainting conditioning nodes; `src` must already be masked.
#[allow(clippy::too_many_arguments)]
pub fn ddim_unrolled(
    g: &mut GraphBuilder,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    n_steps: usize,
    x_big_t: NodeId,
    conds: &[usize],
    mask: Option<NodeId>,
    src: Option<NodeId>,
) -> Result<NodeId> {
    let n = g.shape(x_big_t)[0];
    if conds.len() != n {
        return Err(Error::usage("one condition per batch item required"));
    }
    let steps = ddim_timesteps(sched.steps(), n_steps)?;
    let onehot = g.constant(model.cond_onehot(conds)?);
    let mut x = x_big_t;
    for (t, prev) in pairs(&steps) {
        let c = StepCoeffs::new(sched, t, prev)?;
        let time = g.constant(model.time_features(&vec![t; n]));
        let eps = model.build_eps(
            g,
            EpsNodes {
                x_t: x,
                time,
                cond: onehot,
                mask,
                src,
            },
        )?;
        let se = g.scale(eps, c.sigma)?;
        let d = g.sub(x, se)?;
        let x0 = g.scale(d, c.inv_alpha)?;
        let x0 = g.clamp(x0, 0.0, 1.0)?;
        let ax0 = g.scale(x0, c.alpha)?;
        let r = g.sub(x, ax0)?;
        let eps2 = g.scale(r, c.inv_sigma)?;
        let a = g.scale(x0, c.alpha_prev)?;
        let b = g.scale(eps2, c.sigma_prev)?;
        x = g.add(a, b)?;
    }
    g.clamp(x, 0.0, 1.0)
}
