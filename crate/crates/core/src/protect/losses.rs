use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::pgd::LossKind;
use crate::diffusion::{ddim_unrolled, DenoiserModel, EpsNodes, NoiseSchedule, Variant};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Activations, Feed, Graph, GraphBuilder, NodeId, Tensor};

/// Deepest DDIM unroll the targeted loss accepts.
pub const MAX_TRUNCATION: usize = 8;

/// Everything a loss needs besides δ. Unused fields are ignored by the
/// kinds that do not need them.
#[derive(Clone, Debug)]
pub struct LossInputs {
    /// `[1, C, H, W]` in `[0, 1]`.
    pub x_src: Tensor,
    /// Keep-mask conditioning (early-stage and targeted losses).
    pub mask: BinaryMask,
    pub cond: usize,
    /// Standard-normal draw: x_T for early-stage/targeted, ε for recon.
    pub noise: Tensor,
    /// Diffusion timestep for the reconstruction loss.
    pub t: usize,
    /// Target image for the targeted loss.
    pub target: Option<Tensor>,
}

/// A compiled loss graph with δ as a leaf, for one model and image shape.
pub struct LossProgram {
    kind: LossKind,
    graph: Graph,
    loss: NodeId,
    delta: NodeId,
    sched: NoiseSchedule,
    shape: [usize; 4],
    cond: Option<usize>,
}

impl LossProgram {
    /// `truncation` is the DDIM depth of the targeted loss and `cond` its
    /// (baked-in) condition id; both are ignored by the other kinds.
    pub fn new(model: &DenoiserModel, kind: LossKind, truncation: usize, cond: usize) -> Result<Self> {
        let a = &model.arch;
        let sched = a.schedule()?;
        let shape = a.image_shape(1);
        let one = [1, 1, a.height, a.width];
        if kind != LossKind::ReconMax && model.variant() != Variant::Inpaint {
            return Err(Error::usage(format!("{kind:?} loss needs an inpaint model")));
        }
        if kind == LossKind::TargetedImage && !(1..=MAX_TRUNCATION).contains(&truncation) {
            return Err(Error::usage(format!(
                "truncation K must lie in [1, {MAX_TRUNCATION}], got {truncation}"
            )));
        }
        let mut g = GraphBuilder::new();
        let delta = g.input("delta", &shape)?;
        let x_src = g.input("x_src", &shape)?;
        let protected = g.add(x_src, delta)?;
        let loss = match kind {
            LossKind::EarlyStage | LossKind::TargetedImage => {
                let mask = g.input("mask", &one)?;
                let mask_c = g.input("mask_c", &shape)?;
                let src = g.mul(protected, mask_c)?;
                let x_big_t = g.input("x_t", &shape)?;
                if kind == LossKind::EarlyStage {
                    let time = g.input("time", &[1, a.time_features])?;
                    let cond = g.input("cond", &[1, a.vocab])?;
                    let eps = model.build_eps(
                        &mut g,
                        EpsNodes {
                            x_t: x_big_t,
                            time,
                            cond,
                            mask: Some(mask),
                            src: Some(src),
                        },
                    )?;
                    g.sum_squares(eps)?
                } else {
                    let out = ddim_unrolled(
                        &mut g,
                        model,
                        &sched,
                        truncation,
                        x_big_t,
                        &[cond],
                        Some(mask),
                        Some(src),
                    )?;
                    let target = g.input("target", &shape)?;
                    let diff = g.sub(out, target)?;
                    g.sum_squares(diff)?
                }
            }
            LossKind::ReconMax => {
                // x_t = α_t (x + δ) + σ_t ε, with α_t fed as a constant map
                let alpha = g.input("alpha_map", &shape)?;
                let sigma_eps = g.input("sigma_eps", &shape)?;
                let eps = g.input("eps", &shape)?;
                let scaled = g.mul(protected, alpha)?;
                let x_t = g.add(scaled, sigma_eps)?;
                let time = g.input("time", &[1, a.time_features])?;
                let cond = g.input("cond", &[1, a.vocab])?;
                let (mask, src) = match model.variant() {
                    Variant::Standard => (None, None),
                    // mask-free formulation: all-ones mask, full source
                    Variant::Inpaint => (Some(g.input("mask", &one)?), Some(protected)),
                };
                let out = model.build_eps(
                    &mut g,
                    EpsNodes {
                        x_t,
                        time,
                        cond,
                        mask,
                        src,
                    },
                )?;
                let diff = g.sub(out, eps)?;
                g.sum_squares(diff)?
            }
        };
        Ok(Self {
            kind,
            graph: g.finish(),
            loss,
            delta,
            sched,
            shape,
            cond: (kind == LossKind::TargetedImage).then_some(cond),
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    fn extras(&self, model: &DenoiserModel, inp: &LossInputs) -> Result<Vec<(&'static str, Tensor)>> {
        inp.x_src.expect_shape(&self.shape)?;
        inp.noise.expect_shape(&self.shape)?;
        let c = self.shape[1];
        let mut v = Vec::new();
        match self.kind {
            LossKind::EarlyStage | LossKind::TargetedImage => {
                if inp.mask.height() != self.shape[2] || inp.mask.width() != self.shape[3] {
                    return Err(Error::usage("mask does not match the image extents"));
                }
                v.push(("mask", inp.mask.to_tensor(1)));
                v.push(("mask_c", inp.mask.to_tensor(c)));
                if self.kind == LossKind::EarlyStage {
                    v.push(("time", model.time_features(&[self.sched.steps()])));
                    v.push(("cond", model.cond_onehot(&[inp.cond])?));
                } else {
                    if self.cond != Some(inp.cond) {
                        return Err(Error::usage("targeted loss compiled for another condition"));
                    }
                    let target = inp
                        .target
                        .clone()
                        .ok_or_else(|| Error::usage("targeted loss needs a target image"))?;
                    target.expect_shape(&self.shape)?;
                    v.push(("target", target));
                }
            }
            LossKind::ReconMax => {
                let t = inp.t;
                if t == 0 || t > self.sched.steps() {
                    return Err(Error::usage(format!("timestep {t} outside [1, {}]", self.sched.steps())));
                }
                let (alpha, sigma) = (self.sched.alpha(t) as f32, self.sched.sigma(t) as f32);
                v.push(("alpha_map", Tensor::full(&self.shape, alpha)));
                v.push(("sigma_eps", inp.noise.scale(sigma)));
                v.push(("time", model.time_features(&[t])));
                v.push(("cond", model.cond_onehot(&[inp.cond])?));
                if model.variant() == Variant::Inpaint {
                    v.push(("mask", Tensor::ones(&[1, 1, self.shape[2], self.shape[3]])));
                }
            }
        }
        Ok(v)
    }

    fn with_feed<T>(
        &self,
        model: &DenoiserModel,
        inp: &LossInputs,
        delta: &Tensor,
        f: impl FnOnce(&Feed<'_>) -> Result<T>,
    ) -> Result<T> {
        delta.expect_shape(&self.shape)?;
        let extras = self.extras(model, inp)?;
        let mut feed = Feed::new();
        feed.bind_all(&model.params);
        feed.bind("delta", delta).bind("x_src", &inp.x_src);
        let noise_name = if self.kind == LossKind::ReconMax { "eps" } else { "x_t" };
        feed.bind(noise_name, &inp.noise);
        for (name, t) in &extras {
            feed.bind(name, t);
        }
        f(&feed)
    }

    fn forward(&self, model: &DenoiserModel, inp: &LossInputs, delta: &Tensor) -> Result<Activations> {
        self.with_feed(model, inp, delta, |feed| self.graph.forward(feed))
    }

    pub fn value(&self, model: &DenoiserModel, inp: &LossInputs, delta: &Tensor) -> Result<f32> {
        Ok(self.forward(model, inp, delta)?.get(self.loss).item())
    }

    /// Loss and its gradient with respect to δ.
    pub fn value_and_grad(
        &self,
        model: &DenoiserModel,
        inp: &LossInputs,
        delta: &Tensor,
    ) -> Result<(f32, Tensor)> {
        let acts = self.forward(model, inp, delta)?;
        let value = acts.get(self.loss).item();
        let mut g = self.graph.backward(&acts, self.loss, &[self.delta])?;
        Ok((value, g.pop().expect("one gradient per leaf")))
    }

    /// Central differences (evaluated in f64) at flat coordinates of δ.
    pub fn finite_diff_coords(
        &self,
        model: &DenoiserModel,
        inp: &LossInputs,
        delta: &Tensor,
        coords: &[usize],
        h: f32,
    ) -> Result<Vec<f32>> {
        self.with_feed(model, inp, delta, |feed| {
            self.graph.finite_diff_coords(feed, self.loss, "delta", coords, h)
        })
    }

    /// Central-difference directional derivative along `direction`.
    pub fn finite_diff_directional(
        &self,
        model: &DenoiserModel,
        inp: &LossInputs,
        delta: &Tensor,
        direction: &Tensor,
        h: f32,
    ) -> Result<f64> {
        self.with_feed(model, inp, delta, |feed| {
            self.graph.finite_diff_directional(feed, self.loss, "delta", direction, h)
        })
    }
}

/// `‖ε_θ(x_T; cond, T, M, (x_src + δ) ⊙ M)‖²`.
pub fn loss_early_stage(
    model: &DenoiserModel,
    x_src: &Tensor,
    delta: &Tensor,
    mask: &BinaryMask,
    cond: usize,
    x_big_t: &Tensor,
) -> Result<f32> {
    let p = LossProgram::new(model, LossKind::EarlyStage, 1, cond)?;
    let inp = LossInputs {
        x_src: x_src.clone(),
        mask: mask.clone(),
        cond,
        noise: x_big_t.clone(),
        t: 0,
        target: None,
    };
    p.value(model, &inp, delta)
}

/// `‖ε_θ(α_t (x_src + δ) + σ_t ε; cond, t) − ε‖²` with `t`, `ε` drawn from
/// `rng`.
pub fn loss_recon_max(
    model: &DenoiserModel,
    x_src: &Tensor,
    delta: &Tensor,
    cond: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if sched.steps() != model.arch.timesteps {
        return Err(Error::usage("schedule does not match the model"));
    }
    let p = LossProgram::new(model, LossKind::ReconMax, 1, cond)?;
    let t = rng.gen_range(1..=sched.steps());
    let noise = Tensor::from_fn(x_src.shape(), |_| rng.sample::<f32, _>(StandardNormal));
    let inp = LossInputs {
        x_src: x_src.clone(),
        mask: BinaryMask::ones(model.arch.height, model.arch.width),
        cond,
        noise,
        t,
        target: None,
    };
    p.value(model, &inp, delta)
}

/// Squared distance between the K-step DDIM inpainting of the protected
/// source (from seeded x_T) and `target`; to be minimized.
#[allow(clippy::too_many_arguments)]
pub fn loss_targeted_image(
    model: &DenoiserModel,
    x_src: &Tensor,
    delta: &Tensor,
    mask: &BinaryMask,
    cond: usize,
    target: &Tensor,
    truncation: usize,
    seed: u64,
) -> Result<f32> {
    let p = LossProgram::new(model, LossKind::TargetedImage, truncation, cond)?;
    let inp = LossInputs {
        x_src: x_src.clone(),
        mask: mask.clone(),
        cond,
        noise: crate::diffusion::initial_noise(x_src.shape(), seed),
        t: 0,
        target: Some(target.clone()),
    };
    p.value(model, &inp, delta)
}
