//! Seen and unseen test masks derived from a ground-truth region.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::raster::BinaryMask;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledMask {
    pub id: &'static str,
    pub split: Split,
    pub mask: BinaryMask,
}

pub const DILATION_RADIUS: f64 = 3.0;

/// Pixels within Euclidean distance `r` of the mask.
pub fn dilate(mask: &BinaryMask, r: f64) -> BinaryMask {
    let on: Vec<(usize, usize)> = pixels(mask);
    let r2 = r * r;
    BinaryMask::from_fn(mask.height(), mask.width(), |x, y| {
        on.iter().any(|&(px, py)| {
            let (dx, dy) = (px as f64 - x as f64, py as f64 - y as f64);
            dx * dx + dy * dy <= r2
        })
    })
}

fn pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                v.push((x, y));
            }
        }
    }
    v
}

/// Filled bounding rectangle.
pub fn bounding_rect(mask: &BinaryMask) -> Option<BinaryMask> {
    let (x0, y0, x1, y1) = mask.bounding_box()?;
    Some(BinaryMask::from_fn(mask.height(), mask.width(), |x, y| {
        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
    }))
}

/// Disk centred on the bounding box that reaches every mask pixel.
pub fn bounding_circle(mask: &BinaryMask) -> Option<BinaryMask> {
    let (x0, y0, x1, y1) = mask.bounding_box()?;
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let r2 = pixels(mask)
        .iter()
        .map(|&(x, y)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2))
        .fold(0.0, f64::max);
    Some(BinaryMask::from_fn(mask.height(), mask.width(), |x, y| {
        (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r2 + 1e-9
    }))
}

/// Euclidean distance from each pixel centre to the nearest background pixel
/// centre (the frame counts as background); 0 on background.
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut bg: Vec<(f64, f64)> = Vec::new();
    for y in -1..=h as i64 {
        for x in -1..=w as i64 {
            if !mask.get_signed(x as isize, y as isize) {
                bg.push((x as f64, y as f64));
            }
        }
    }
    (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            if mask.bits()[i] == 0 {
                return 0.0;
            }
            bg.iter()
                .map(|&(bx, by)| (bx - x).powi(2) + (by - y).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Union of disks centred on the ridge (medial axis) of the distance transform, each with
/// a radius jittered around the local distance: a hand-painted cover.
pub fn brush_mask(mask: &BinaryMask, seed: u64) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let dt = distance_transform(mask);
    let mut rng = seed::stream_rng(seed, "brush", 0);
    let mut disks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = dt[y * w + x];
            if d == 0.0 {
                continue;
            }
            // maximal across at least one of the four line directions
            let at = |dx: isize, dy: isize| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    0.0
                } else {
                    dt[ny as usize * w + nx as usize]
                }
            };
            let ridge = [(1, 0), (0, 1), (1, 1), (1, -1)]
                .iter()
                .any(|&(dx, dy)| at(dx, dy) <= d && at(-dx, -dy) <= d);
            if ridge {
                let r = d * rng.gen_range(1.0..1.4);
                disks.push((x as f64, y as f64, r));
            }
        }
    }
    BinaryMask::from_fn(h, w, |x, y| {
        disks.iter().any(|&(cx, cy, r)| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        })
    })
}

/// The ground truth (seen) plus four unseen variants: bounding rectangle,
/// bounding circle, brush stroke and a 3-pixel dilation.
pub fn mask_family(m_gt: &BinaryMask, seed: u64) -> Result<Vec<LabeledMask>> {
    if m_gt.is_empty() {
        return Err(Error::usage("mask family of an empty mask"));
    }
    let rect = bounding_rect(m_gt).expect("non-empty");
    let circle = bounding_circle(m_gt).expect("non-empty");
    Ok(vec![
        LabeledMask {
            id: "gt",
            split: Split::Seen,
            mask: m_gt.clone(),
        },
        LabeledMask {
            id: "rect",
            split: Split::Unseen,
            mask: rect,
        },
        LabeledMask {
            id: "circle",
            split: Split::Unseen,
            mask: circle,
        },
        LabeledMask {
            id: "brush",
            split: Split::Unseen,
            mask: brush_mask(m_gt, seed),
        },
        LabeledMask {
            id: "dilate",
            split: Split::Unseen,
            mask: dilate(m_gt, DILATION_RADIUS),
        },
    ])
}
