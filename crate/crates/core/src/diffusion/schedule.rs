use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Offset of the cosine schedule near t = 0.
pub const COSINE_OFFSET: f64 = 0.008;
/// Signal power the cosine schedule reaches at t = T.
pub const COSINE_END_ALPHA_SQ: f64 = 5e-4;
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
/// Step count the linear β range is defined for.
pub const LINEAR_REFERENCE_STEPS: usize = 1000;

/// Variance-preserving noise schedule. Index 0 is the clean endpoint
/// (α = 1, σ = 0); indices 1..=T are the training timesteps.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_max: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::usage(format!("schedule needs T >= 2, got {t_max}")));
        }
        let alpha_sq: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                // cos² of an angle swept linearly from the offset start to the
                // angle whose normalized cos² equals COSINE_END_ALPHA_SQ
                let start = COSINE_OFFSET / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                let norm = start.cos().powi(2);
                let end = (COSINE_END_ALPHA_SQ * norm).sqrt().acos();
                (0..=t_max)
                    .map(|t| {
                        let angle = start + (end - start) * t as f64 / t_max as f64;
                        angle.cos().powi(2) / norm
                    })
                    .collect()
            }
            ScheduleKind::Linear => {
                // the 1000-step linear-β curve, resampled log-linearly onto
                // T steps so short schedules still end near pure noise
                let mut log_table = vec![0.0f64];
                for k in 0..LINEAR_REFERENCE_STEPS {
                    let beta = LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * k as f64
                            / (LINEAR_REFERENCE_STEPS - 1) as f64;
                    log_table.push(log_table[k] + (1.0 - beta).ln());
                }
                (0..=t_max)
                    .map(|t| {
                        let pos = (LINEAR_REFERENCE_STEPS * t) as f64 / t_max as f64;
                        let k = (pos.floor() as usize).min(LINEAR_REFERENCE_STEPS - 1);
                        let frac = pos - k as f64;
                        (log_table[k] + frac * (log_table[k + 1] - log_table[k])).exp()
                    })
                    .collect()
            }
        };
        let alpha = alpha_sq.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_sq.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        Ok(Self { kind, alpha, sigma })
    }

    /// Schedule from explicit signal powers α_1², …, α_T² (index 0 is
    /// implied). Values must lie in (0, 1] and be non-increasing.
    pub fn from_alpha_sq(kind: ScheduleKind, alpha_sq: &[f64]) -> Result<Self> {
        if alpha_sq.len() < 2 {
            return Err(Error::usage("schedule needs T >= 2"));
        }
        let mut prev = 1.0;
        for &a in alpha_sq {
            if !(a > 0.0 && a <= prev) {
                return Err(Error::usage("signal powers must be in (0, 1] and non-increasing"));
            }
            prev = a;
        }
        let mut full = vec![1.0];
        full.extend_from_slice(alpha_sq);
        Ok(Self {
            kind,
            alpha: full.iter().map(|a| a.sqrt()).collect(),
            sigma: full.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect(),
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training timesteps T.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// log(α²/σ²); +∞ at t = 0.
    pub fn lambda(&self, t: usize) -> f64 {
        (self.alpha[t] * self.alpha[t] / (self.sigma[t] * self.sigma[t])).ln()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::usage(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Forward-process draw `α_t x + σ_t ε`.
    pub fn q_sample(&self, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, s) = (self.alpha(t) as f32, self.sigma(t) as f32);
        x.zip_map(eps, |xv, ev| a * xv + s * ev)
    }

    /// Per-sample forward draw for a batch `[N, ...]` with timesteps `ts`.
    pub fn q_sample_batch(&self, x: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        eps.expect_shape(x.shape())?;
        let n = x.shape()[0];
        if ts.len() != n {
            return Err(Error::usage("one timestep per batch item required"));
        }
        let per = x.len() / n;
        let mut out = x.clone();
        for (i, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let (a, s) = (self.alpha(t) as f32, self.sigma(t) as f32);
            let range = i * per..(i + 1) * per;
            for ((o, &xv), &ev) in out.data_mut()[range.clone()]
                .iter_mut()
                .zip(&x.data()[range.clone()])
                .zip(&eps.data()[range])
            {
                *o = a * xv + s * ev;
            }
        }
        Ok(out)
    }
}
