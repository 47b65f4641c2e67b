use super::raster::BinaryMask;
use crate::error::{Error, Result};

/// Closed polyline of integer pixel coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contour {
    pub points: Vec<(i64, i64)>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Twice the shoelace area of the raw `(x, y)` pairs. Traced contours
    /// are oriented so this is non-negative (counterclockwise in the x-y
    /// plane; on screen, with y pointing down, that reads as clockwise).
    pub fn signed_area2(&self) -> i64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (x0, y0) = self.points[i];
                let (x1, y1) = self.points[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum()
    }
}

// Moore neighbourhood, clockwise on screen (y grows downwards), starting west.
const RING: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn ring_index(d: (i64, i64)) -> usize {
    RING.iter().position(|&r| r == d).expect("neighbour offset")
}

/// Moore-neighbour trace of the component containing the first raster-order
/// pixel of `mask`, stopped by Jacob's criterion. Works for any size,
/// including single pixels.
pub(crate) fn trace_component(mask: &BinaryMask) -> Contour {
    let w = mask.width();
    let start = mask
        .bits()
        .iter()
        .position(|&b| b != 0)
        .expect("component must be non-empty");
    let s = ((start % w) as i64, (start / w) as i64);
    let fg = |p: (i64, i64)| mask.get_signed(p.0 as isize, p.1 as isize);
    // the raster scan reached s from the west, which is background
    let start_back = (s.0 - 1, s.1);
    let mut points = vec![s];
    let (mut p, mut b) = (s, start_back);
    let mut first_move = None;
    // a contour visits each pixel at most 4 times
    let limit = 4 * mask.area() + 8;
    loop {
        let bi = ring_index((b.0 - p.0, b.1 - p.1));
        let mut next = None;
        for k in 1..=8 {
            let d = RING[(bi + k) % 8];
            let q = (p.0 + d.0, p.1 + d.1);
            if fg(q) {
                let prev = RING[(bi + k - 1) % 8];
                next = Some((q, (p.0 + prev.0, p.1 + prev.1)));
                break;
            }
        }
        let Some((q, nb)) = next else {
            break; // isolated pixel
        };
        if q == s && nb == start_back {
            break;
        }
        // starts on thin parts may be re-entered from another side only;
        // then stop when the first move repeats
        if p == s && points.len() > 1 && Some(q) == first_move {
            points.pop();
            break;
        }
        first_move.get_or_insert(q);
        points.push(q);
        p = q;
        b = nb;
        if points.len() > limit {
            break;
        }
    }
    let mut c = Contour { points };
    if c.signed_area2() < 0 {
        c.points[1..].reverse();
    }
    c
}

fn component_extent_ok(c: &BinaryMask) -> bool {
    c.bounding_box()
        .is_some_and(|(x0, y0, x1, y1)| x1 - x0 >= 2 && y1 - y0 >= 2)
}

/// Outer contour of every 8-connected component, counterclockwise.
/// Components smaller than 3×3 are rejected.
pub fn trace_contours(mask: &BinaryMask) -> Result<Vec<Contour>> {
    if mask.is_empty() {
        return Err(Error::usage("cannot trace an empty mask"));
    }
    mask.components()
        .iter()
        .map(|c| {
            if !component_extent_ok(c) {
                return Err(Error::usage(format!(
                    "component with bounding box {:?} is smaller than 3x3",
                    c.bounding_box()
                )));
            }
            Ok(trace_component(c))
        })
        .collect()
}

/// Circular convolution with a Gaussian of std `s`, truncated at 3s and
/// renormalized.
pub fn gaussian_smooth_circular(values: &[f64], s: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 || s <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * s).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(w, k)| w * values[(i - k).rem_euclid(n as i64) as usize])
                .sum::<f64>()
                / total
        })
        .collect()
}

/// Even-odd scanline fill of a closed polygon whose vertices sit in pixel
/// coordinates (pixel centres at integers). A pixel is set when its centre
/// lies in a span `[a, b)` between successive edge crossings of its row, or
/// when it coincides with a vertex.
pub(crate) fn fill_polygon(points: &[(f64, f64)], height: usize, width: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(height, width);
    let n = points.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let yf = y as f64;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            if (y0 <= yf && yf < y1) || (y1 <= yf && yf < y0) {
                xs.push(x0 + (yf - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let lo = span[0].ceil().max(0.0) as i64;
            let hi = span[1].ceil().min(width as f64) as i64; // exclusive
            for x in lo..hi {
                m.set(x as usize, y, true);
            }
        }
    }
    for &(x, y) in points {
        if x.fract() != 0.0 || y.fract() != 0.0 {
            continue;
        }
        if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height {
            m.set(x as usize, y as usize, true);
        }
    }
    m
}

fn to_f64(points: &[(i64, i64)]) -> Vec<(f64, f64)> {
    points.iter().map(|&(x, y)| (x as f64, y as f64)).collect()
}

pub fn rasterize(contour: &Contour, height: usize, width: usize) -> Result<BinaryMask> {
    if contour.len() < 3 {
        return Err(Error::usage(format!(
            "contour needs at least 3 points, got {}",
            contour.len()
        )));
    }
    if let Some(p) = contour
        .points
        .iter()
        .find(|&&(x, y)| x < 0 || y < 0 || x as usize >= width || y as usize >= height)
    {
        return Err(Error::usage(format!("contour point {p:?} outside {width}x{height}")));
    }
    Ok(fill_polygon(&to_f64(&contour.points), height, width))
}

/// Union of the rasterized contours.
pub fn rasterize_all(contours: &[Contour], height: usize, width: usize) -> Result<BinaryMask> {
    let mut m = BinaryMask::zeros(height, width);
    for c in contours {
        m = m.union(&rasterize(c, height, width)?)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_and_tiny_components() {
        let dot = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (2, 2));
        assert_eq!(trace_component(&dot).points, vec![(2, 2)]);
        assert!(trace_contours(&dot).is_err());
        let bar = BinaryMask::from_fn(5, 5, |x, y| y == 2 && (1..4).contains(&x));
        assert!(trace_contours(&bar).is_err());
        assert_eq!(trace_component(&bar).len(), 4);
    }

    #[test]
    fn consecutive_points_are_neighbours() {
        let m = BinaryMask::from_fn(12, 12, |x, y| {
            let (dx, dy) = (x as f64 - 5.5, y as f64 - 5.0);
            dx * dx / 20.0 + dy * dy / 9.0 <= 1.0 || (x == 9 && y > 5)
        });
        let c = trace_component(&m);
        for i in 0..c.len() {
            let (a, b) = (c.points[i], c.points[(i + 1) % c.len()]);
            assert!((a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1 && a != b);
        }
        assert!(c.signed_area2() > 0);
    }
}
