//! Small U-Net-style ε-predictor built on the static graph.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::seed;
use crate::tensor::{checkpoint, Feed, Graph, GraphBuilder, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Inpaint,
}

fn default_time_features() -> usize {
    32
}

fn default_embed_channels() -> usize {
    4
}

/// Everything needed to rebuild a model's graph; stored next to the
/// checkpoint as JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Number of condition ids; id 0 is the unconditional slot.
    pub vocab: usize,
    pub variant: Variant,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    /// Spatial channels carrying the timestep embedding into the first conv.
    #[serde(default = "default_embed_channels")]
    pub embed_channels: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::usage(format!(
                "image extents must be multiples of 4 and at least 8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.base_width == 0 || self.vocab == 0 {
            return Err(Error::usage("channels, base width and vocab must be positive"));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 || self.embed_channels == 0 {
            return Err(Error::usage("time features must be even and positive"));
        }
        if self.timesteps < 2 {
            return Err(Error::usage("timesteps must be at least 2"));
        }
        Ok(())
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }

    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::Standard => self.channels + self.embed_channels,
            Variant::Inpaint => 2 * self.channels + 1 + self.embed_channels,
        }
    }

    fn embed_dim(&self) -> usize {
        2 * self.base_width
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.timesteps, self.schedule)
    }
}

/// Leaf or constant nodes feeding one ε evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EpsNodes {
    pub x_t: NodeId,
    /// `[N, time_features]` sinusoidal features.
    pub time: NodeId,
    /// `[N, vocab]` one-hot condition.
    pub cond: NodeId,
    /// `[N, 1, H, W]`, inpaint only.
    pub mask: Option<NodeId>,
    /// `[N, C, H, W]` masked source, inpaint only.
    pub src: Option<NodeId>,
}

fn groups_for(c: usize) -> usize {
    let mut g = c.min(8);
    while c % g != 0 {
        g -= 1;
    }
    g
}

const BLOCKS: [&str; 6] = ["enc0", "enc1", "mid0", "mid1", "dec1", "dec0"];

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub arch: Arch,
    pub params: BTreeMap<String, Tensor>,
}

impl DenoiserModel {
    /// `(in, out)` channels of each conv block.
    fn block_channels(arch: &Arch) -> [(usize, usize); 6] {
        let w = arch.base_width;
        [
            (arch.input_channels(), w),
            (w, 2 * w),
            (2 * w, 2 * w),
            (2 * w, 2 * w),
            (4 * w, 2 * w),
            (3 * w, w),
        ]
    }

    fn param_shapes(arch: &Arch) -> Vec<(String, Vec<usize>)> {
        let d = arch.embed_dim();
        let mut out = vec![
            ("time.w1".to_string(), vec![arch.time_features, d]),
            ("time.b1".to_string(), vec![d]),
            ("time.w2".to_string(), vec![d, d]),
            ("time.b2".to_string(), vec![d]),
            ("cond.emb".to_string(), vec![arch.vocab, d]),
            ("in_emb.w".to_string(), vec![d, arch.embed_channels]),
            ("in_emb.b".to_string(), vec![arch.embed_channels]),
        ];
        for (name, (cin, cout)) in BLOCKS.iter().zip(Self::block_channels(arch)) {
            out.push((format!("{name}.conv.w"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.conv.b"), vec![cout]));
            out.push((format!("{name}.gn.g"), vec![cout]));
            out.push((format!("{name}.gn.b"), vec![cout]));
            out.push((format!("{name}.emb.w"), vec![d, cout]));
            out.push((format!("{name}.emb.b"), vec![cout]));
        }
        out.push(("out.w".to_string(), vec![arch.channels, arch.base_width, 3, 3]));
        out.push(("out.b".to_string(), vec![arch.channels]));
        out
    }

    /// Fresh parameters. The output conv starts at zero so an untrained
    /// model predicts ε = 0.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::stream_rng(seed, "model-init", 0);
        let mut params = BTreeMap::new();
        for (name, shape) in Self::param_shapes(&arch) {
            let t = if name.ends_with(".gn.g") {
                Tensor::ones(&shape)
            } else if name == "out.w" || shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let std = (1.0 / fan_in as f64).sqrt() as f32;
                Tensor::from_fn(&shape, |_| std * rng.sample::<f32, _>(StandardNormal))
            };
            params.insert(name, t);
        }
        Ok(Self { arch, params })
    }

    /// Checks that every parameter exists with the shape the arch implies.
    pub fn from_parts(arch: Arch, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let expected = Self::param_shapes(&arch);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, arch needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "tensor '{name}' has shape {:?}, arch needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint lacks '{name}'"))),
            }
        }
        Ok(Self { arch, params })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the checkpoint and its `<path>.json` arch sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let json = serde_json::to_string_pretty(&self.arch)?;
        std::fs::write(Self::sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = std::fs::read_to_string(Self::sidecar_path(path))?;
        let arch: Arch = serde_json::from_str(&sidecar)?;
        Self::from_parts(arch, checkpoint::load(path)?)
    }

    /// Inpainting model whose extra input channels (mask and masked source)
    /// start with zero weights, so it initially ignores them.
    pub fn to_inpaint(&self) -> Result<Self> {
        if self.arch.variant != Variant::Standard {
            return Err(Error::usage("only a standard model can be expanded for inpainting"));
        }
        let arch = Arch {
            variant: Variant::Inpaint,
            ..self.arch.clone()
        };
        let c = arch.channels;
        let e = arch.embed_channels;
        let old = &self.params["enc0.conv.w"];
        let (cout, cin_old) = (old.shape()[0], old.shape()[1]);
        let cin_new = arch.input_channels();
        let mut w = Tensor::zeros(&[cout, cin_new, 3, 3]);
        for o in 0..cout {
            for i in 0..cin_old {
                // x_t channels keep their slot; embedding channels move past
                // the new mask + source block
                let j = if i < c { i } else { i + c + 1 };
                let src = (o * cin_old + i) * 9;
                let dst = (o * cin_new + j) * 9;
                w.data_mut()[dst..dst + 9].copy_from_slice(&old.data()[src..src + 9]);
            }
        }
        debug_assert_eq!(cin_old, c + e);
        let mut params = self.params.clone();
        params.insert("enc0.conv.w".to_string(), w);
        Ok(Self { arch, params })
    }

    /// `[N, F]` sinusoidal features of integer timesteps.
    pub fn time_features(&self, ts: &[usize]) -> Tensor {
        let f = self.arch.time_features;
        let half = f / 2;
        let scale = 1000.0 / self.arch.timesteps as f64;
        let mut data = Vec::with_capacity(ts.len() * f);
        for &t in ts {
            let pos = t as f64 * scale;
            for k in 0..half {
                let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                data.push((pos * freq).sin() as f32);
            }
            for k in 0..half {
                let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                data.push((pos * freq).cos() as f32);
            }
        }
        Tensor::new(vec![ts.len(), f], data).expect("feature length")
    }

    /// `[N, vocab]` one-hot condition rows.
    pub fn cond_onehot(&self, conds: &[usize]) -> Result<Tensor> {
        let v = self.arch.vocab;
        let mut t = Tensor::zeros(&[conds.len(), v]);
        for (i, &c) in conds.iter().enumerate() {
            if c >= v {
                return Err(Error::usage(format!("condition id {c} outside vocab {v}")));
            }
            t.data_mut()[i * v + c] = 1.0;
        }
        Ok(t)
    }

    /// Declares `x_t`, `time`, `cond` (and `mask`, `src` for inpainting) as
    /// input leaves for a batch of `n`.
    pub fn declare_inputs(&self, g: &mut GraphBuilder, n: usize) -> Result<EpsNodes> {
        let a = &self.arch;
        let img = a.image_shape(n);
        let x_t = g.input("x_t", &img)?;
        let time = g.input("time", &[n, a.time_features])?;
        let cond = g.input("cond", &[n, a.vocab])?;
        let (mask, src) = match a.variant {
            Variant::Standard => (None, None),
            Variant::Inpaint => (
                Some(g.input("mask", &[n, 1, a.height, a.width])?),
                Some(g.input("src", &img)?),
            ),
        };
        Ok(EpsNodes {
            x_t,
            time,
            cond,
            mask,
            src,
        })
    }

    /// Appends ε_θ to `g` and returns its `[N, C, H, W]` output node.
    /// Parameters are leaves named as in `params`, so several calls on one
    /// builder share weights.
    pub fn build_eps(&self, g: &mut GraphBuilder, inp: EpsNodes) -> Result<NodeId> {
        let a = &self.arch;
        let n = g.shape(inp.x_t)[0];
        let d = a.embed_dim();
        let p = |g: &mut GraphBuilder, name: &str| -> Result<NodeId> {
            let shape = self.params.get(name).map(|t| t.shape().to_vec()).ok_or_else(|| {
                Error::usage(format!("model has no parameter '{name}'"))
            })?;
            g.param(name, &shape)
        };

        // timestep + condition embedding, [N, D]
        let w1 = p(g, "time.w1")?;
        let b1 = p(g, "time.b1")?;
        let w2 = p(g, "time.w2")?;
        let b2 = p(g, "time.b2")?;
        let emb = p(g, "cond.emb")?;
        let h = g.matmul(inp.time, w1)?;
        let h = g.add_channel_bias(h, b1)?;
        let h = g.silu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add_channel_bias(h, b2)?;
        let c = g.matmul(inp.cond, emb)?;
        let temb = g.add(h, c)?;
        let temb_act = g.silu(temb)?;
        debug_assert_eq!(g.shape(temb_act), [n, d]);

        // embedding broadcast to spatial channels
        let ew = p(g, "in_emb.w")?;
        let eb = p(g, "in_emb.b")?;
        let e = g.matmul(temb_act, ew)?;
        let e = g.add_channel_bias(e, eb)?;
        let zeros = g.constant(Tensor::zeros(&[n, a.embed_channels, a.height, a.width]));
        let emb_map = g.add_channel_bias(zeros, e)?;

        let mut parts = vec![inp.x_t];
        match (a.variant, inp.mask, inp.src) {
            (Variant::Standard, None, None) => {}
            (Variant::Inpaint, Some(m), Some(s)) => {
                parts.push(m);
                parts.push(s);
            }
            _ => {
                return Err(Error::usage(
                    "mask and masked source must be given exactly for the inpaint variant",
                ))
            }
        }
        parts.push(emb_map);
        let x = g.concat(&parts)?;
        if g.shape(x)[1] != a.input_channels() {
            return Err(Error::Shape {
                node: x,
                msg: format!(
                    "network input has {} channels, arch expects {}",
                    g.shape(x)[1],
                    a.input_channels()
                ),
            });
        }

        let block = |g: &mut GraphBuilder, name: &str, x: NodeId| -> Result<NodeId> {
            let w = p(g, &format!("{name}.conv.w"))?;
            let b = p(g, &format!("{name}.conv.b"))?;
            let gg = p(g, &format!("{name}.gn.g"))?;
            let gb = p(g, &format!("{name}.gn.b"))?;
            let ew = p(g, &format!("{name}.emb.w"))?;
            let eb = p(g, &format!("{name}.emb.b"))?;
            let h = g.conv2d(x, w, b)?;
            let cout = g.shape(h)[1];
            let h = g.group_norm(h, gg, gb, groups_for(cout), 1e-5)?;
            let e = g.matmul(temb_act, ew)?;
            let e = g.add_channel_bias(e, eb)?;
            let h = g.add_channel_bias(h, e)?;
            g.silu(h)
        };

        let h0 = block(g, "enc0", x)?;
        let d1 = g.downsample2x(h0)?;
        let h1 = block(g, "enc1", d1)?;
        let d2 = g.downsample2x(h1)?;
        let m = block(g, "mid0", d2)?;
        let m = block(g, "mid1", m)?;
        let u1 = g.upsample2x(m)?;
        let u1 = g.concat(&[u1, h1])?;
        let u1 = block(g, "dec1", u1)?;
        let u0 = g.upsample2x(u1)?;
        let u0 = g.concat(&[u0, h0])?;
        let u0 = block(g, "dec0", u0)?;
        let ow = p(g, "out.w")?;
        let ob = p(g, "out.b")?;
        g.conv2d(u0, ow, ob)
    }

    /// Single ε evaluation. Builds a fresh graph; use [`EpsProgram`] in loops.
    pub fn predict(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[usize],
        cond: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        EpsProgram::new(self, x_t.shape()[0])?.run(self, x_t, ts, conds, cond)
    }
}

/// A compiled ε graph for a fixed batch size.
pub struct EpsProgram {
    graph: Graph,
    out: NodeId,
    n: usize,
}

impl EpsProgram {
    pub fn new(model: &DenoiserModel, n: usize) -> Result<Self> {
        let mut g = GraphBuilder::new();
        let inp = model.declare_inputs(&mut g, n)?;
        let out = model.build_eps(&mut g, inp)?;
        Ok(Self {
            graph: g.finish(),
            out,
            n,
        })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    /// `cond` is `(mask [N,1,H,W], source [N,C,H,W])`; the source is
    /// multiplied by the mask here.
    pub fn run(
        &self,
        model: &DenoiserModel,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[usize],
        cond: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        let n = self.n;
        if ts.len() != n || conds.len() != n {
            return Err(Error::usage("one timestep and condition per batch item required"));
        }
        let time = model.time_features(ts);
        let onehot = model.cond_onehot(conds)?;
        let masked;
        let mut feed = Feed::new();
        feed.bind_all(&model.params);
        feed.bind("x_t", x_t).bind("time", &time).bind("cond", &onehot);
        match (model.variant(), cond) {
            (Variant::Standard, None) => {}
            (Variant::Inpaint, Some((mask, src))) => {
                masked = masked_source(src, mask)?;
                feed.bind("mask", mask).bind("src", &masked);
            }
            (Variant::Standard, Some(_)) => {
                return Err(Error::usage("standard model takes no inpainting conditioning"))
            }
            (Variant::Inpaint, None) => {
                return Err(Error::usage("inpaint model needs mask and source"))
            }
        }
        Ok(self.graph.forward(&feed)?.take(self.out))
    }
}

/// `src ⊙ mask` with the one-channel mask broadcast over channels.
pub fn masked_source(src: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let s = src.shape();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::usage(format!(
            "mask {:?} does not fit source {:?}",
            mask.shape(),
            s
        )));
    }
    let plane = s[2] * s[3];
    let c = s[1];
    Ok(Tensor::from_fn(s, |i| {
        let n = i / (c * plane);
        src.data()[i] * mask.data()[n * plane + i % plane]
    }))
}

/// Stacks per-item masks into `[N, 1, H, W]`.
pub fn mask_batch(masks: &[&BinaryMask]) -> Result<Tensor> {
    let items: Vec<Tensor> = masks.iter().map(|m| m.to_tensor(1)).collect();
    Tensor::stack(&items)
}
