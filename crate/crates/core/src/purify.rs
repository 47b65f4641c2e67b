//! Perturbation-removal transforms: JPEG-style block DCT quantization and
//! centre crop followed by bilinear resize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard JPEG luminance quantization table (quality 50), row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

pub const DEFAULT_CROP_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PurifyConfig {
    DctQuantize { quality: u32 },
    CropResize { fraction: f64 },
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PurifyConfig::DctQuantize { quality } if !(1..=100).contains(&quality) => Err(
                Error::usage(format!("quality must lie in [1, 100], got {quality}")),
            ),
            PurifyConfig::CropResize { fraction } if !(fraction > 0.0 && fraction <= 1.0) => Err(
                Error::usage(format!("crop fraction must lie in (0, 1], got {fraction}")),
            ),
            _ => Ok(()),
        }
    }

    /// Short label used in reports, e.g. `dct65` or `crop0.9`.
    pub fn label(&self) -> String {
        match *self {
            PurifyConfig::DctQuantize { quality } => format!("dct{quality}"),
            PurifyConfig::CropResize { fraction } => format!("crop{fraction}"),
        }
    }

    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        match *self {
            PurifyConfig::DctQuantize { quality } => dct_quantize_purify(img, quality),
            PurifyConfig::CropResize { fraction } => crop_resize_purify(img, fraction),
        }
    }
}

/// Quantization table for `quality` under the IJG scaling rule.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::usage(format!("quality must lie in [1, 100], got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut q = [0.0; 64];
    for (o, &t) in q.iter_mut().zip(&LUMA_TABLE) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(q)
}

/// Orthonormal 8-point DCT-II basis: `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = c * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *img.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::usage(format!("expected an [N, C, H, W] image, got {:?}", img.shape()))),
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Per 8×8 block: DCT, quantize with the scaled luminance table, dequantize,
/// inverse DCT. Planes are padded by reflection to multiples of 8 and
/// cropped back; channels are processed independently.
pub fn dct_quantize_purify(img: &Tensor, quality: u32) -> Result<Tensor> {
    let q = quant_table(quality)?;
    let (n, c, h, w) = image_dims(img)?;
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let basis = dct_basis();
    let mut out = Tensor::zeros(img.shape());
    let mut plane = vec![0.0f64; ph * pw];
    for p in 0..n * c {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            for x in 0..pw {
                // level-shifted to [-128, 127] in 8-bit units
                plane[y * pw + x] = src[reflect(y, h) * w + reflect(x, w)] as f64 * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (v, row) in block.iter_mut().enumerate() {
                    for (u, val) in row.iter_mut().enumerate() {
                        *val = plane[(by + v) * pw + bx + u];
                    }
                }
                let coef = separable(&block, &basis, false);
                let mut quant = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for l in 0..8 {
                        let step = q[k * 8 + l];
                        quant[k][l] = (coef[k][l] / step).round() * step;
                    }
                }
                let back = separable(&quant, &basis, true);
                for (v, row) in back.iter().enumerate() {
                    for (u, val) in row.iter().enumerate() {
                        plane[(by + v) * pw + bx + u] = *val;
                    }
                }
            }
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = (((plane[y * pw + x] + 128.0) / 255.0).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    Ok(out)
}

/// 2-D DCT (`inverse = false`) or its inverse on an 8×8 block.
fn separable(block: &[[f64; 8]; 8], basis: &[[f64; 8]; 8], inverse: bool) -> [[f64; 8]; 8] {
    let m = |k: usize, n: usize| if inverse { basis[n][k] } else { basis[k][n] };
    let mut tmp = [[0.0; 8]; 8];
    for r in 0..8 {
        for k in 0..8 {
            tmp[r][k] = (0..8).map(|n| m(k, n) * block[r][n]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for k in 0..8 {
        for col in 0..8 {
            out[k][col] = (0..8).map(|n| m(k, n) * tmp[n][col]).sum();
        }
    }
    out
}

/// Centre crop to `⌊fH⌋ × ⌊fW⌋`, then bilinear resize back to `H × W`
/// (half-pixel-centre convention, edges clamped).
pub fn crop_resize_purify(img: &Tensor, f: f64) -> Result<Tensor> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::usage(format!("crop fraction must lie in (0, 1], got {f}")));
    }
    let (n, c, h, w) = image_dims(img)?;
    let (ch, cw) = ((f * h as f64).floor() as usize, (f * w as f64).floor() as usize);
    if ch < 8 || cw < 8 {
        return Err(Error::usage(format!("crop of {cw}x{ch} is smaller than 8x8")));
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let coords = |out: usize, crop: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * crop as f64 / out as f64 - 0.5).clamp(0.0, (crop - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(crop - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, ch);
    let xs = coords(w, cw);
    let mut out = Tensor::zeros(img.shape());
    for p in 0..n * c {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        let at = |y: usize, x: usize| src[(oy + y) * w + ox + x] as f64;
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[y * w + x] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}
