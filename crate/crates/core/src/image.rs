//! Binary PGM (P5) and PPM (P6) images, 8-bit, mapped linearly to [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses a P5/P6 file into a `[1, C, H, W]` tensor (C = 1 or 3).
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated image header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported image magic '{other}'"))),
    };
    let mut num = || -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::Format(format!("bad header number '{t}'")))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "unsupported image {w}x{h} with maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates header and raster
    let body = &bytes[pos + 1..];
    let need = w * h * channels;
    if body.len() < need {
        return Err(Error::Format(format!(
            "image raster has {} bytes, expected {need}",
            body.len()
        )));
    }
    // interleaved raster → planar tensor
    let plane = w * h;
    let scale = 1.0 / maxval as f32;
    Ok(Tensor::from_fn(&[1, channels, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        body[p * channels + c] as f32 * scale
    }))
}

/// Encodes a `[1, C, H, W]` tensor (C = 1 or 3) as P5/P6, rounding to the
/// nearest 8-bit level after clamping to [0, 1].
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 4 || s[0] != 1 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::usage(format!(
            "images must be [1, 1|3, H, W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            let v = img.data()[ch * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

pub fn save(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}

/// Rounds to the 8-bit grid, as a save/load round trip would.
pub fn quantize8(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
