use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{mask_batch, masked_source, DenoiserModel, Variant};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::seed;
use crate::tensor::{Adam, AdamConfig, Feed, Graph, GraphBuilder, NodeId, Tensor};

/// Images in `[0, 1]` with one condition id each.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Tensor,
    pub conds: Vec<usize>,
    /// Keep-masks for inpainting steps; drawn at random when absent.
    pub masks: Option<Vec<BinaryMask>>,
}

impl TrainBatch {
    pub fn new(images: Tensor, conds: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != conds.len() {
            return Err(Error::usage(format!(
                "batch of shape {:?} with {} condition ids",
                images.shape(),
                conds.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::usage("training images must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            conds,
            masks: None,
        })
    }

    pub fn with_masks(mut self, masks: Vec<BinaryMask>) -> Result<Self> {
        let [_, _, h, w] = self.images.shape() else {
            unreachable!("rank checked in new")
        };
        if masks.len() != self.conds.len() || masks.iter().any(|m| m.height() != *h || m.width() != *w) {
            return Err(Error::usage("one mask of image size per batch item required"));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

/// Union of 1–3 random rectangles or ellipses marking the region to keep,
/// with coverage in `[0.05, 0.95]`.
pub fn random_training_mask(height: usize, width: usize, seed: u64) -> Result<BinaryMask> {
    if height < 8 || width < 8 {
        return Err(Error::usage(format!(
            "training masks need at least 8x8, got {height}x{width}"
        )));
    }
    let mut rng = seed::rng(seed);
    loop {
        let shapes = rng.gen_range(1..=3);
        let mut m = BinaryMask::zeros(height, width);
        for _ in 0..shapes {
            let cx = rng.gen_range(0.0..width as f64);
            let cy = rng.gen_range(0.0..height as f64);
            let rx = rng.gen_range(0.1..0.45) * width as f64;
            let ry = rng.gen_range(0.1..0.45) * height as f64;
            let ellipse = rng.gen_bool(0.5);
            let shape = BinaryMask::from_fn(height, width, |x, y| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                }
            });
            m = m.union(&shape)?;
        }
        if (0.05..=0.95).contains(&m.coverage()) {
            return Ok(m);
        }
    }
}

struct LossGraph {
    graph: Graph,
    loss: NodeId,
    n: usize,
}

/// Adam-driven trainer for the noise-prediction loss.
pub struct Trainer {
    pub model: DenoiserModel,
    sched: NoiseSchedule,
    adam: Adam,
    cache: Option<LossGraph>,
}

impl Trainer {
    pub fn new(model: DenoiserModel, sched: NoiseSchedule, config: AdamConfig) -> Result<Self> {
        if sched.steps() != model.arch.timesteps {
            return Err(Error::usage(format!(
                "schedule has {} steps, model was built for {}",
                sched.steps(),
                model.arch.timesteps
            )));
        }
        Ok(Self {
            model,
            sched,
            adam: Adam::new(config)?,
            cache: None,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    fn loss_graph(&mut self, n: usize) -> Result<&LossGraph> {
        if self.cache.as_ref().map(|c| c.n) != Some(n) {
            let mut g = GraphBuilder::new();
            let inp = self.model.declare_inputs(&mut g, n)?;
            let out = self.model.build_eps(&mut g, inp)?;
            let eps = g.input("eps", &self.model.arch.image_shape(n))?;
            let diff = g.sub(out, eps)?;
            let ss = g.sum_squares(diff)?;
            let loss = g.scale(ss, 1.0 / n as f32)?;
            self.cache = Some(LossGraph {
                graph: g.finish(),
                loss,
                n,
            });
        }
        Ok(self.cache.as_ref().expect("cached above"))
    }

    /// Eq.-1 step for the standard variant. Returns the pre-step loss:
    /// batch mean of `‖ε_θ − ε‖²`.
    pub fn train_step_standard(&mut self, batch: &TrainBatch, rng: &mut ChaCha8Rng) -> Result<f32> {
        if self.model.variant() != Variant::Standard {
            return Err(Error::usage("train_step_standard needs a standard model"));
        }
        self.step(batch, rng)
    }

    /// Inpainting step: the network also sees a random keep-mask and the
    /// masked source.
    pub fn train_step_inpaint(&mut self, batch: &TrainBatch, rng: &mut ChaCha8Rng) -> Result<f32> {
        if self.model.variant() != Variant::Inpaint {
            return Err(Error::usage("train_step_inpaint needs an inpaint model"));
        }
        self.step(batch, rng)
    }

    fn step(&mut self, batch: &TrainBatch, rng: &mut ChaCha8Rng) -> Result<f32> {
        let arch = self.model.arch.clone();
        let n = batch.len();
        batch.images.expect_shape(&arch.image_shape(n))?;
        let t_max = self.sched.steps();
        let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t_max)).collect();
        let eps = Tensor::from_fn(batch.images.shape(), |_| rng.sample::<f32, _>(StandardNormal));
        let x_t = self.sched.q_sample_batch(&batch.images, &ts, &eps)?;
        let time = self.model.time_features(&ts);
        let onehot = self.model.cond_onehot(&batch.conds)?;
        let (mask, src) = if arch.variant == Variant::Inpaint {
            let m = match &batch.masks {
                Some(given) => mask_batch(&given.iter().collect::<Vec<_>>())?,
                None => {
                    let masks = (0..n)
                        .map(|_| random_training_mask(arch.height, arch.width, rng.gen()))
                        .collect::<Result<Vec<_>>>()?;
                    mask_batch(&masks.iter().collect::<Vec<_>>())?
                }
            };
            let s = masked_source(&batch.images, &m)?;
            (Some(m), Some(s))
        } else {
            (None, None)
        };

        self.loss_graph(n)?;
        let lg = self.cache.as_ref().expect("built above");
        let params = &self.model.params;
        let mut feed = Feed::new();
        feed.bind_all(params);
        feed.bind("x_t", &x_t).bind("time", &time).bind("cond", &onehot).bind("eps", &eps);
        if let (Some(m), Some(s)) = (&mask, &src) {
            feed.bind("mask", m).bind("src", s);
        }
        let acts = lg.graph.forward(&feed)?;
        let loss = acts.get(lg.loss).item();
        let names: Vec<&str> = params.keys().map(String::as_str).collect();
        let grads = lg.graph.backward_named(&acts, lg.loss, &names)?;
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(loss)
    }
}
