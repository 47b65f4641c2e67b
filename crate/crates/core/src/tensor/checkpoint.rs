//! `DGCKPT1` tensor archive: little-endian, magic `DGCKPT1\0`, u32 count,
//! then per tensor u16 name length, UTF-8 name, u8 rank, u32 extents and the
//! f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::array::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DGCKPT1\0";

pub fn write_tensors<W: Write>(mut out: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::usage(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::usage(format!("tensor '{name}' has too many axes")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::usage("extent exceeds u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = read_u32(&mut input)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut input)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        input.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(tensors)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    read_tensors(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let tensors = BTreeMap::from([("ab".to_string(), Tensor::vector(&[1.0, -2.5]))]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        let mut want = MAGIC.to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u16.to_le_bytes());
        want.extend(b"ab");
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensors(&b"DGCKPT2\0\0\0\0\0"[..]).is_err());
        let tensors = BTreeMap::from([("x".to_string(), Tensor::zeros(&[3, 2]))]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensors(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::btree_map(
                "[a-z_.0-9]{1,12}",
                (prop::collection::vec(1usize..4, 0..4), any::<u32>()),
                1..5,
            )
        ) {
            let tensors: BTreeMap<String, Tensor> = entries
                .into_iter()
                .map(|(name, (shape, bits))| {
                    let t = Tensor::from_fn(&shape, |i| f32::from_bits(bits.wrapping_add(i as u32 * 7919)));
                    (name, t)
                })
                .collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (k, t) in &tensors {
                let b = &back[k];
                prop_assert_eq!(b.shape(), t.shape());
                let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
