//! Adversarial protection: ℓ∞-bounded perturbations that derail inpainting
//! edits of a source image's kept region.

mod losses;
mod pgd;

pub use losses::{
    loss_early_stage, loss_recon_max, loss_targeted_image, LossInputs, LossProgram, MAX_TRUNCATION,
};
pub use pgd::{
    pgd_protect, pgd_protect_observed, pgd_with_objective, random_noise_delta, AttackConfig, AugmentSettings,
    IterationReport, LossKind, PgdOutcome, PgdSettings, ProtectionResult, RegionKind,
};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Where a perturbation may be non-zero.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    MaskOnly(BinaryMask),
    WholeImage,
}

impl Region {
    /// Zeroes `delta` outside the region.
    pub fn restrict(&self, delta: &mut Tensor) -> Result<()> {
        let Region::MaskOnly(m) = self else {
            return Ok(());
        };
        let s = delta.shape().to_vec();
        if s.len() != 4 || s[2] != m.height() || s[3] != m.width() {
            return Err(Error::usage(format!(
                "region mask {}x{} does not fit delta {:?}",
                m.height(),
                m.width(),
                s
            )));
        }
        let plane = m.height() * m.width();
        let bits = m.bits();
        for (i, d) in delta.data_mut().iter_mut().enumerate() {
            if bits[i % plane] == 0 {
                *d = 0.0;
            }
        }
        Ok(())
    }
}

/// Clamps `delta` to `[−η, η]` and then so that `x_src + δ` stays in
/// `[0, 1]`.
pub fn project_linf(delta: &Tensor, x_src: &Tensor, eta: f32) -> Result<Tensor> {
    if !(eta >= 0.0) {
        return Err(Error::usage(format!("eta must be non-negative, got {eta}")));
    }
    delta.zip_map(x_src, |d, x| {
        let d = d.clamp(-eta, eta);
        d.clamp(-x, 1.0 - x)
    })
}

/// `clamp(x_src + δ, 0, 1)` with δ zeroed outside `region`.
pub fn apply_protection(x_src: &Tensor, delta: &Tensor, region: &Region) -> Result<Tensor> {
    let mut d = delta.clone();
    region.restrict(&mut d)?;
    Ok(x_src.add(&d)?.clamp(0.0, 1.0))
}
