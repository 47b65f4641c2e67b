use crate::diffusion::{ddim_from, initial_noise, mask_batch, DenoiserModel, ModelPredictor, Variant};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// `mask ⊙ src + (1 − mask) ⊙ edited`, the mask broadcast over channels.
pub fn postprocess_paste(src: &Tensor, mask: &BinaryMask, edited: &Tensor) -> Result<Tensor> {
    let s = src.shape();
    if s != edited.shape() || s.len() != 4 || s[2] != mask.height() || s[3] != mask.width() {
        return Err(Error::usage(format!(
            "paste of {:?} onto {:?} with a {}x{} mask",
            s,
            edited.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let plane = mask.height() * mask.width();
    let bits = mask.bits();
    Ok(Tensor::from_fn(s, |i| {
        if bits[i % plane] != 0 {
            src.data()[i]
        } else {
            edited.data()[i]
        }
    }))
}

/// One inpainting edit request.
#[derive(Clone, Debug)]
pub struct EditJob<'a> {
    /// `[1, C, H, W]`.
    pub input: &'a Tensor,
    pub mask: &'a BinaryMask,
    pub cond: usize,
    pub seed: u64,
}

/// Inpaints every job in one batch, each from its own seeded x_T, then
/// pastes the kept region back.
pub fn edit_batch(model: &DenoiserModel, jobs: &[EditJob<'_>], n_steps: usize) -> Result<Vec<Tensor>> {
    if model.variant() != Variant::Inpaint {
        return Err(Error::usage("editing needs an inpaint model"));
    }
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let shape = model.arch.image_shape(1);
    for j in jobs {
        j.input.expect_shape(&shape)?;
    }
    let n = jobs.len();
    let inputs: Vec<Tensor> = jobs.iter().map(|j| j.input.clone()).collect();
    let src = Tensor::stack(&inputs)?;
    let masks = mask_batch(&jobs.iter().map(|j| j.mask).collect::<Vec<_>>())?;
    let noise: Vec<Tensor> = jobs.iter().map(|j| initial_noise(&shape, j.seed)).collect();
    let conds: Vec<usize> = jobs.iter().map(|j| j.cond).collect();
    let predictor = ModelPredictor::new(model, n)?;
    let sched = model.arch.schedule()?;
    let out = ddim_from(&predictor, &sched, n_steps, Tensor::stack(&noise)?, &conds, Some((&masks, &src)))?;
    jobs.iter()
        .enumerate()
        .map(|(i, j)| postprocess_paste(j.input, j.mask, &out.batch_item(i)))
        .collect()
}

/// Inpaints the complement of `mask` in `x_input` under condition `cond`.
pub fn edit(
    model: &DenoiserModel,
    x_input: &Tensor,
    mask: &BinaryMask,
    cond: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let job = EditJob {
        input: x_input,
        mask,
        cond,
        seed,
    };
    Ok(edit_batch(model, &[job], n_steps)?.remove(0))
}

/// `20·log10(1/√MSE)` for images in `[0, 1]`; `+∞` when identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::usage(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}
