//! Contour-shrinking mask augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::contour::{fill_polygon, gaussian_smooth_circular, rasterize_all, trace_component, trace_contours};
use super::raster::BinaryMask;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Offset range ζ in pixels.
    pub zeta: f64,
    /// Smoothing std in contour-point index units.
    pub s: f64,
    /// Number of shrink iterations.
    pub n: usize,
    pub seed: u64,
}

/// ζ when none is configured: `max(2, 0.08 · bounding-box diagonal)`.
pub fn default_zeta(mask: &BinaryMask) -> f64 {
    let diag = mask.bounding_box().map_or(0.0, |(x0, y0, x1, y1)| {
        let (w, h) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        (w * w + h * h).sqrt()
    });
    (0.08 * diag).max(2.0)
}

pub const DEFAULT_SMOOTHING: f64 = 5.0;
pub const DEFAULT_ITERATIONS: usize = 3;

impl AugmentParams {
    pub fn defaults_for(mask: &BinaryMask, seed: u64) -> Self {
        Self {
            zeta: default_zeta(mask),
            s: DEFAULT_SMOOTHING,
            n: DEFAULT_ITERATIONS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) || !(self.s > 0.0) || self.n == 0 {
            return Err(Error::usage(format!(
                "augmentation needs zeta >= 0, s > 0, N >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

fn component_ok(c: &BinaryMask) -> bool {
    c.bounding_box()
        .is_some_and(|(x0, y0, x1, y1)| x1 - x0 >= 2 && y1 - y0 >= 2)
}

/// One draw of the shrink procedure with the given ζ and PRNG seed.
fn shrink(m_tr: &BinaryMask, zeta: f64, s: f64, iterations: usize, seed: u64) -> Result<BinaryMask> {
    let (h, w) = (m_tr.height(), m_tr.width());
    let mut rng = seed::rng(seed);
    let mut m = m_tr.clone();
    for _ in 0..iterations {
        let mut next = BinaryMask::zeros(h, w);
        for comp in m.components() {
            if !component_ok(&comp) {
                // too small to trace meaningfully; carried over unchanged
                next = next.union(&comp)?;
                continue;
            }
            let orig = trace_component(&comp).points;
            let k = orig.len();
            let xo: Vec<f64> = (0..k).map(|_| rng.gen_range(-zeta..=zeta)).collect();
            let yo: Vec<f64> = (0..k).map(|_| rng.gen_range(-zeta..=zeta)).collect();
            let xo = gaussian_smooth_circular(&xo, s);
            let yo = gaussian_smooth_circular(&yo, s);
            let moved: Vec<(f64, f64)> = orig
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    let (fx, fy) = (x as f64 + xo[i], y as f64 + yo[i]);
                    if m_tr.get_signed(fx.round() as isize, fy.round() as isize) {
                        (fx, fy)
                    } else {
                        let (cx, cy) = closest_point(&orig, fx, fy);
                        (cx as f64, cy as f64)
                    }
                })
                .collect();
            next = next.union(&fill_polygon(&moved, h, w))?;
        }
        // edges between kept vertices may still cut across concave parts
        m = next.intersection(m_tr)?;
    }
    Ok(m)
}

/// Closest contour point in squared Euclidean distance; first wins ties.
fn closest_point(points: &[(i64, i64)], fx: f64, fy: f64) -> (i64, i64) {
    let mut best = points[0];
    let mut best_d = f64::INFINITY;
    for &(x, y) in points {
        let d = (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2);
        if d < best_d {
            best_d = d;
            best = (x, y);
        }
    }
    best
}

/// Random mask of similar shape to `m_tr` and contained in it. Each of the
/// `N` iterations traces every component, displaces its contour points by
/// smoothed uniform offsets, pulls points that leave `m_tr` back to the
/// closest original contour point, and refills.
pub fn augment_mask(m_tr: &BinaryMask, params: &AugmentParams) -> Result<BinaryMask> {
    params.validate()?;
    let contours = trace_contours(m_tr)?;
    let mut zeta = params.zeta;
    for attempt in 0..=3u64 {
        let seed = if attempt == 0 {
            params.seed
        } else {
            seed::derive(params.seed, "augment-retry", attempt)
        };
        let out = shrink(m_tr, zeta, params.s, params.n, seed)?;
        if !out.is_empty() {
            return Ok(out);
        }
        zeta /= 2.0;
    }
    rasterize_all(&contours, m_tr.height(), m_tr.width())?.intersection(m_tr)
}
