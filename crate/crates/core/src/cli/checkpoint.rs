//! Binary parameter snapshots.
//!
//! Layout (little-endian): magic `CDNT`, u32 version, u32 tensor count; per
//! tensor u16 name length, UTF-8 name, u8 dtype (0 f32, 1 f64), u8 rank,
//! rank × u32 extents, payload; then a u32 CRC32 of everything before it.

use std::path::Path;

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::numeric::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CDNT";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Contract(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("{name}: rank {} too large", t.rank())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("{name}: extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint, converting every tensor to `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamSet<T>> {
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint(format!("{} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::CorruptCheckpoint(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(Error::CorruptCheckpoint(format!("{name}: unknown dtype {d}"))),
        };
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: size overflow")))?, "payload")?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        if params.contains(&name) {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(params)
}

pub fn save<T: Element>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    std::fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<ParamSet<T>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn params() -> ParamSet<f32> {
        let mut rng = Rng::new(4);
        let mut p = ParamSet::new();
        p.insert("a.weight", Tensor::randn(&[2, 3, 1, 1], 1.0, &mut rng));
        p.insert("a.bias", Tensor::randn(&[2], 1.0, &mut rng));
        p.insert("scalar", Tensor::scalar(0.5));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..4], b"CDNT");
        assert_eq!(decode::<f32>(&bytes).unwrap(), p);
        assert_eq!(encode(&decode::<f32>(&bytes).unwrap()).unwrap(), bytes);
        let wide = p.cast::<f64>();
        assert_eq!(decode::<f64>(&encode(&wide).unwrap()).unwrap(), wide);
    }

    #[test]
    fn layout_of_a_single_scalar() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::scalar(1.0));
        let bytes = encode(&p).unwrap();
        let mut want = b"CDNT".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'x');
        want.extend_from_slice(&[1, 0]);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&crc32fast::hash(&want).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let bytes = encode(&params()).unwrap();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(matches!(decode::<f32>(&b), Err(Error::CorruptCheckpoint(_))), "byte {i} bit {bit}");
            }
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode(&params()).unwrap();
        for n in [0, 3, 15, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..n]), Err(Error::CorruptCheckpoint(_))));
        }
    }
}
