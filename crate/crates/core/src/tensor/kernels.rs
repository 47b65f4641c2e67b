//! Raw loops behind the graph primitives. Layout is always NCHW.
//!
//! Everything is generic over [`Real`] so the same code evaluates graphs in
//! f32 (the production path) and f64 (the finite-difference oracle).

pub(crate) use super::gemm::Real;

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w, k) = (d.h as isize, d.w as isize, d.k);
    let pad = (k / 2) as isize;
    let plane = d.plane();
    for ci in 0..d.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let in_row = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        out_row[x as usize] = if sx < 0 || sx >= w {
                            T::ZERO
                        } else {
                            in_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], d: &ConvDims, x: &mut [T]) {
    let (h, w, k) = (d.h as isize, d.w as isize, d.k);
    let pad = (k / 2) as isize;
    let plane = d.plane();
    for ci in 0..d.c_in {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            dst[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution with bias.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.plane();
    let patch = d.patch();
    let mut out = vec![T::ZERO; d.n * d.c_out * plane];
    let mut col = if d.k == 1 {
        Vec::new()
    } else {
        vec![T::ZERO; patch * plane]
    };
    for n in 0..d.n {
        let xn = &x[n * d.c_in * plane..(n + 1) * d.c_in * plane];
        let on = &mut out[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        for (co, chunk) in on.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let b = if d.k == 1 {
            xn
        } else {
            im2col(xn, d, &mut col);
            &col
        };
        T::gemm(d.c_out, patch, plane, weight, false, b, false, on, true);
    }
    out
}

/// Accumulates gradients of a convolution. Any of the outputs may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    d: &ConvDims,
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    let plane = d.plane();
    let patch = d.patch();
    let mut col = vec![T::ZERO; patch * plane];
    let mut dcol = vec![T::ZERO; patch * plane];
    for n in 0..d.n {
        let xn = &x[n * d.c_in * plane..(n + 1) * d.c_in * plane];
        let gn = &grad_out[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (co, chunk) in gn.chunks(plane).enumerate() {
                gb[co] += chunk.iter().fold(T::ZERO, |a, &b| a + b);
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            let b = if d.k == 1 {
                xn
            } else {
                im2col(xn, d, &mut col);
                &col
            };
            T::gemm(d.c_out, plane, patch, gn, false, b, true, gw, true);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let gxn = &mut gx[n * d.c_in * plane..(n + 1) * d.c_in * plane];
            if d.k == 1 {
                T::gemm(patch, d.c_out, plane, weight, true, gn, false, gxn, true);
            } else {
                T::gemm(patch, d.c_out, plane, weight, true, gn, false, &mut dcol, false);
                col2im_add(&dcol, d, gxn);
            }
        }
    }
}

/// Per-(sample, group) mean and reciprocal standard deviation.
pub(crate) fn group_stats<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    eps: f32,
) -> Vec<(T, T)> {
    let cpg = c / groups;
    let count = (cpg * plane) as f64;
    let mut stats = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cpg) * plane;
            let seg = &x[start..start + cpg * plane];
            let mean = seg.iter().map(|v| v.to_f64()).sum::<f64>() / count;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / count;
            stats.push((T::from_f64(mean), T::from_f64(1.0 / (var + eps as f64).sqrt())));
        }
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    eps: f32,
) -> Vec<T> {
    let stats = group_stats(x, n, c, plane, groups, eps);
    let cpg = c / groups;
    let mut out = vec![T::ZERO; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let (mean, rstd) = stats[s * groups + ch / cpg];
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                out[i] = (x[i] - mean) * rstd * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &[f32],
    gamma: &[f32],
    grad_out: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    eps: f32,
    mut grad_x: Option<&mut [f32]>,
    mut grad_gamma: Option<&mut [f32]>,
    mut grad_beta: Option<&mut [f32]>,
) {
    let stats = group_stats(x, n, c, plane, groups, eps);
    let cpg = c / groups;
    let count = (cpg * plane) as f64;
    for s in 0..n {
        for g in 0..groups {
            let (mean, rstd) = stats[s * groups + g];
            // mean of dxhat and of dxhat*xhat over the group
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for ch in g * cpg..(g + 1) * cpg {
                let base = (s * c + ch) * plane;
                let mut gsum = 0.0f64;
                let mut gxsum = 0.0f64;
                for i in base..base + plane {
                    let xhat = (x[i] - mean) * rstd;
                    let dy = grad_out[i];
                    gsum += dy as f64;
                    gxsum += (dy * xhat) as f64;
                    let dxhat = (dy * gamma[ch]) as f64;
                    sum_d += dxhat;
                    sum_dx += dxhat * xhat as f64;
                }
                if let Some(gg) = grad_gamma.as_deref_mut() {
                    gg[ch] += gxsum as f32;
                }
                if let Some(gb) = grad_beta.as_deref_mut() {
                    gb[ch] += gsum as f32;
                }
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                let mean_d = (sum_d / count) as f32;
                let mean_dx = (sum_dx / count) as f32;
                for ch in g * cpg..(g + 1) * cpg {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        let xhat = (x[i] - mean) * rstd;
                        let dxhat = grad_out[i] * gamma[ch];
                        gx[i] += rstd * (dxhat - mean_d - xhat * mean_dx);
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample2x<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; nc * h2 * w2];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(g: &[f32], nc: usize, h: usize, w: usize, gx: &mut [f32]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..nc {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
}

/// Nearest-neighbour 2x downsampling keeps the top-left pixel of each cell.
pub(crate) fn downsample2x<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::ZERO; nc * h2 * w2];
    for p in 0..nc {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = x[(p * h + 2 * y) * w + 2 * xx];
            }
        }
    }
    out
}

pub(crate) fn downsample2x_backward(g: &[f32], nc: usize, h: usize, w: usize, gx: &mut [f32]) {
    let (h2, w2) = (h / 2, w / 2);
    for p in 0..nc {
        for y in 0..h2 {
            for xx in 0..w2 {
                gx[(p * h + 2 * y) * w + 2 * xx] += g[(p * h2 + y) * w2 + xx];
            }
        }
    }
}

pub(crate) fn silu<T: Real>(v: T) -> T {
    v / (T::ONE + (-v).exp())
}

pub(crate) fn silu_grad(v: f32) -> f32 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], wt: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
        let pad = (d.k / 2) as isize;
        let mut out = vec![0.0; d.n * d.c_out * d.h * d.w];
        for n in 0..d.n {
            for co in 0..d.c_out {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = b[co];
                        for ci in 0..d.c_in {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    acc += wt[((co * d.c_in + ci) * d.k + ky) * d.k + kx]
                                        * x[((n * d.c_in + ci) * d.h + sy as usize) * d.w
                                            + sx as usize];
                                }
                            }
                        }
                        out[((n * d.c_out + co) * d.h + y) * d.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        for k in [1, 3] {
            let d = ConvDims { n: 2, c_in: 3, c_out: 2, h: 5, w: 4, k };
            let x: Vec<f32> = (0..d.n * d.c_in * d.h * d.w).map(|i| (i as f32 * 0.7).sin()).collect();
            let wt: Vec<f32> = (0..d.c_out * d.c_in * k * k).map(|i| (i as f32 * 1.3).cos()).collect();
            let b = vec![0.1, -0.2];
            let got = conv2d_forward(&x, &wt, &b, &d);
            let want = naive_conv(&x, &wt, &b, &d);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-4, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn up_then_down_is_identity() {
        let x: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        let up = upsample2x(&x, 2, 3, 4);
        assert_eq!(downsample2x(&up, 2, 6, 8), x);
    }
}
