use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 0/1 raster. `1` marks the region to keep.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y) as u8);
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    /// Accepts any bytes; nonzero maps to 1.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::usage(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits: bits.into_iter().map(|b| (b != 0) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    /// Out-of-frame coordinates read as 0.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn coverage(&self) -> f64 {
        self.area() as f64 / self.bits.len() as f64
    }

    fn same_frame(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::usage(format!(
                "mask extents differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_frame(other).is_ok() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        self.same_frame(other)?;
        Ok(Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
            ..self.clone()
        })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<Self> {
        self.same_frame(other)?;
        Ok(Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect(),
            ..self.clone()
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
            ..self.clone()
        }
    }

    /// `(x_min, y_min, x_max, y_max)` inclusive, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Mask replicated over `channels` as a `[1, channels, H, W]` tensor.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let plane = self.bits.len();
        Tensor::from_fn(&[1, channels, self.height, self.width], |i| {
            self.bits[i % plane] as f32
        })
    }

    /// Sets every background pixel not 4-connected to the frame border.
    pub fn fill_holes(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut outside = vec![false; h * w];
        let mut stack: Vec<usize> = (0..h * w)
            .filter(|&i| {
                let (x, y) = (i % w, i / w);
                (x == 0 || y == 0 || x == w - 1 || y == h - 1) && self.bits[i] == 0
            })
            .collect();
        for &i in &stack {
            outside[i] = true;
        }
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if self.bits[j] == 0 && !outside[j] {
                    outside[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        Self {
            bits: outside.iter().map(|&o| (!o) as u8).collect(),
            ..self.clone()
        }
    }

    /// Binary PGM with 0 outside and 255 inside.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| b * 255));
        out
    }

    /// Reads a grayscale PGM; values above 127 map to 1.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let img = crate::image::decode(bytes)?;
        let s = img.shape();
        if s[1] != 1 {
            return Err(Error::Format("masks must be single-channel PGM".into()));
        }
        // decode scales by 1/255, so 127 → 0.498 and 128 → 0.502
        let bits = img.data().iter().map(|&v| (v > 0.5) as u8).collect();
        Self::from_bits(s[2], s[3], bits)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    /// 8-connected components, each as its own mask, in raster order of
    /// their first pixel.
    pub fn components(&self) -> Vec<BinaryMask> {
        let mut label = vec![usize::MAX; self.bits.len()];
        let mut comps = Vec::new();
        for start in 0..self.bits.len() {
            if self.bits[start] == 0 || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut comp = BinaryMask::zeros(self.height, self.width);
            let mut stack = vec![start];
            label[start] = id;
            while let Some(p) = stack.pop() {
                comp.bits[p] = 1;
                let (x, y) = ((p % self.width) as isize, (p / self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if self.get_signed(nx, ny) {
                            let q = ny as usize * self.width + nx as usize;
                            if label[q] == usize::MAX {
                                label[q] = id;
                                stack.push(q);
                            }
                        }
                    }
                }
            }
            comps.push(comp);
        }
        comps
    }
}
