//! Synthetic scenes: a distinctive two-tone blob over one of a few
//! background classes. The background is lit by the blob (a soft halo in
//! its outer tone plus a global tone shift), so completing it requires
//! reading the kept region.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{mask_family, BinaryMask, LabeledMask};
use crate::seed;
use crate::tensor::Tensor;

pub const SCENE_SIZE: usize = 32;
/// Background classes are condition ids `1..=NUM_CLASSES`; id 0 is the
/// unconditional slot.
pub const NUM_CLASSES: usize = 4;
pub const VOCAB: usize = NUM_CLASSES + 1;

const BG_JITTER: f32 = 0.03;
/// Halo reach in pixels and its blend weight at the blob boundary.
const HALO_RADIUS: f64 = 6.0;
const HALO_WEIGHT: f64 = 0.7;
/// Background shift per unit of blob tone above 0.5.
const TONE_SHIFT: f32 = 0.3;

/// Noise-free background intensity of class `c` at `(x, y)`.
fn background(c: usize, x: usize, y: usize) -> f32 {
    match c {
        1 => 0.1,
        2 => {
            if (y / 4) % 2 == 0 {
                0.3
            } else {
                0.5
            }
        }
        3 => {
            if (x / 8 + y / 8) % 2 == 0 {
                0.55
            } else {
                0.75
            }
        }
        4 => 0.92,
        _ => unreachable!("class ids are 1..={NUM_CLASSES}"),
    }
}

/// Mean of the class pattern of `c`, before the blob's halo and tone shift.
pub fn class_mean(c: usize) -> Result<f64> {
    if !(1..=NUM_CLASSES).contains(&c) {
        return Err(Error::usage(format!("no background class {c}")));
    }
    let n = SCENE_SIZE * SCENE_SIZE;
    Ok((0..n).map(|i| background(c, i % SCENE_SIZE, i / SCENE_SIZE) as f64).sum::<f64>() / n as f64)
}

/// One generated scene.
#[derive(Clone, Debug)]
pub struct Scene {
    /// `[1, 1, 32, 32]` in `[0, 1]`.
    pub image: Tensor,
    /// Blob support.
    pub m_gt: BinaryMask,
    pub class: usize,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius of pixel centre `(x, y)`.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    /// Image coordinates of normalized polar position `(rho, phi)`.
    fn point(&self, rho: f64, phi: f64) -> (f64, f64) {
        let (u, v) = (rho * self.a * phi.cos(), rho * self.b * phi.sin());
        (self.cx + u * self.cos - v * self.sin, self.cy + u * self.sin + v * self.cos)
    }
}

/// Draws a scene: rotated ellipse covering 10–50% of the frame with an
/// inner core of a second tone and 2–3 small dark or bright features.
pub fn sample_scene(rng: &mut ChaCha8Rng) -> Scene {
    let n = SCENE_SIZE as f64;
    let total = SCENE_SIZE * SCENE_SIZE;
    let (ellipse, m_gt) = loop {
        let a: f64 = rng.gen_range(5.0..13.0);
        let b: f64 = rng.gen_range(5.0..13.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let reach = a.max(b);
        let lo = (reach + 1.0).min(n / 2.0 - 1.0);
        let e = Ellipse {
            cx: rng.gen_range(lo..n - 1.0 - lo),
            cy: rng.gen_range(lo..n - 1.0 - lo),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let m = BinaryMask::from_fn(SCENE_SIZE, SCENE_SIZE, |x, y| e.r2(x as f64, y as f64) <= 1.0);
        let frac = m.area() as f64 / total as f64;
        let inside_frame = m.bounding_box().is_some_and(|(x0, y0, x1, y1)| {
            x0 > 0 && y0 > 0 && x1 < SCENE_SIZE - 1 && y1 < SCENE_SIZE - 1
        });
        if (0.1..=0.5).contains(&frac) && inside_frame && m.components().len() == 1 {
            break (e, m);
        }
    };
    let class = rng.gen_range(1..=NUM_CLASSES);
    let outer: f32 = rng.gen_range(0.3..0.7);
    let inner: f32 = if rng.gen_bool(0.5) {
        (outer + rng.gen_range(0.15..0.25)).min(1.0)
    } else {
        (outer - rng.gen_range(0.15..0.25)).max(0.0)
    };
    let core = rng.gen_range(0.45..0.7);
    let n_features = rng.gen_range(2..=3);
    let features: Vec<(f64, f64, f64, f32)> = (0..n_features)
        .map(|_| {
            let rho = rng.gen_range(0.0..0.55);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let (fx, fy) = ellipse.point(rho, phi);
            let radius = rng.gen_range(1.2..2.2);
            let tone = if rng.gen_bool(0.5) { 0.05 } else { 0.95 };
            (fx, fy, radius, tone)
        })
        .collect();
    let jitter: Vec<f32> = (0..total).map(|_| rng.gen_range(-BG_JITTER..BG_JITTER)).collect();
    let blob: Vec<(f64, f64)> = (0..total)
        .filter(|&i| m_gt.bits()[i] != 0)
        .map(|i| ((i % SCENE_SIZE) as f64, (i / SCENE_SIZE) as f64))
        .collect();
    let shift = TONE_SHIFT * (outer - 0.5);
    let image = Tensor::from_fn(&[1, 1, SCENE_SIZE, SCENE_SIZE], |i| {
        let (x, y) = (i % SCENE_SIZE, i / SCENE_SIZE);
        if !m_gt.get(x, y) {
            let d = blob
                .iter()
                .map(|&(bx, by)| (bx - x as f64).powi(2) + (by - y as f64).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let w = (HALO_WEIGHT * (1.0 - (d - 1.0) / HALO_RADIUS)).clamp(0.0, HALO_WEIGHT) as f32;
            let bg = background(class, x, y) + shift;
            return (bg + w * (outer - bg) + jitter[i]).clamp(0.0, 1.0);
        }
        let (xf, yf) = (x as f64, y as f64);
        for &(fx, fy, r, tone) in &features {
            if (xf - fx).powi(2) + (yf - fy).powi(2) <= r * r {
                return tone;
            }
        }
        if ellipse.r2(xf, yf) <= core * core {
            inner
        } else {
            outer
        }
    });
    Scene { image, m_gt, class }
}

/// One benchmark image with its mask family and edit conditions.
#[derive(Clone, Debug)]
pub struct BenchItem {
    pub id: String,
    pub image: Tensor,
    pub m_gt: BinaryMask,
    pub family: Vec<LabeledMask>,
    pub conds: Vec<usize>,
    pub class: usize,
}

/// `n_images` scenes drawn from stream `"dataset"` of `seed`.
pub fn generate_dataset(n_images: usize, seed: u64) -> Result<Vec<BenchItem>> {
    if n_images == 0 {
        return Err(Error::usage("dataset needs at least one image"));
    }
    (0..n_images)
        .map(|i| {
            let mut rng = seed::stream_rng(seed, "dataset", i as u64);
            let scene = sample_scene(&mut rng);
            let family = mask_family(&scene.m_gt, seed::derive(seed, "mask-family", i as u64))?;
            Ok(BenchItem {
                id: format!("img{i:03}"),
                image: scene.image,
                m_gt: scene.m_gt,
                family,
                conds: (1..=NUM_CLASSES).collect(),
                class: scene.class,
            })
        })
        .collect()
}
