#![allow(dead_code)]

use rand::Rng;
use shield::mask::BinaryMask;
use shield::seed;

/// Hole-free union of 1–3 ellipses whose components are all at least 3×3.
pub fn random_blob(h: usize, w: usize, s: u64) -> BinaryMask {
    let mut rng = seed::stream_rng(s, "test-blob", 0);
    loop {
        let mut m = BinaryMask::zeros(h, w);
        for _ in 0..rng.gen_range(1..=3) {
            let cx = rng.gen_range(3.0..w as f64 - 3.0);
            let cy = rng.gen_range(3.0..h as f64 - 3.0);
            let rx = rng.gen_range(2.0..w as f64 / 3.0);
            let ry = rng.gen_range(2.0..h as f64 / 3.0);
            let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (c, sn) = (rot.cos(), rot.sin());
            let e = BinaryMask::from_fn(h, w, |x, y| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (c * dx + sn * dy, -sn * dx + c * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
            m = m.union(&e).unwrap();
        }
        let m = m.fill_holes();
        let ok = !m.is_empty()
            && m.components().iter().all(|c| {
                let (x0, y0, x1, y1) = c.bounding_box().unwrap();
                x1 - x0 >= 2 && y1 - y0 >= 2
            });
        if ok {
            return m;
        }
    }
}

/// Number of mask pixels with a 4-neighbour outside the mask or frame.
pub fn perimeter(m: &BinaryMask) -> usize {
    let mut n = 0;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                let (xi, yi) = (x as isize, y as isize);
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dx, dy)| !m.get_signed(xi + dx, yi + dy));
                n += edge as usize;
            }
        }
    }
    n
}

/// Gradient agreement: relative 1e-2 with an absolute floor of 1e-4.
pub fn grad_close(a: f32, n: f32) -> bool {
    (a - n).abs() <= (1e-2 * a.abs().max(n.abs())).max(1e-4)
}

pub fn small_arch(variant: shield::diffusion::Variant) -> shield::diffusion::Arch {
    shield::diffusion::Arch {
        height: 16,
        width: 16,
        channels: 1,
        base_width: 8,
        vocab: 3,
        variant,
        schedule: shield::diffusion::ScheduleKind::Cosine,
        timesteps: 50,
        time_features: 32,
        embed_channels: 4,
    }
}

/// Freshly initialized model whose zero-initialized tensors (output conv,
/// biases, new input columns) are filled with small random values so every
/// path carries signal.
pub fn random_model(variant: shield::diffusion::Variant, s: u64) -> shield::diffusion::DenoiserModel {
    random_model_of(small_arch(variant), s)
}

pub fn random_model_of(arch: shield::diffusion::Arch, s: u64) -> shield::diffusion::DenoiserModel {
    use rand_distr::StandardNormal;
    let mut m = shield::diffusion::DenoiserModel::init(arch, s).unwrap();
    let mut rng = seed::stream_rng(s, "test-model", 0);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".g") {
            continue;
        }
        if t.data().iter().all(|&v| v == 0.0) {
            let scale = if name == "out.w" { 0.2 } else { 0.1 };
            for v in t.data_mut() {
                *v = scale * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }
    m
}

/// Smooth random image in `[0.1, 0.9]`.
pub fn random_image(h: usize, w: usize, s: u64) -> shield::Tensor {
    let mut rng = seed::stream_rng(s, "test-image", 0);
    let (a, b, c): (f64, f64, f64) = (rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.0..6.0));
    shield::Tensor::from_fn(&[1, 1, h, w], |i| {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        (0.5 + 0.3 * (a * x + b * y + c).sin() + rng.gen_range(-0.05..0.05)).clamp(0.1, 0.9) as f32
    })
}
