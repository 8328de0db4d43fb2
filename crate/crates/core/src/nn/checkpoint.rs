//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SGDCKPT1"                    8 bytes
//! version = 1                   u32
//! tensor count                  u32
//! per tensor:
//!   name length                 u16
//!   name                        UTF-8 bytes
//!   dtype (0 = f32, 1 = f64)    u8
//!   rank                        u8
//!   extents                     rank × u32
//!   payload                     raw little-endian elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGDCKPT1";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidTensor(format!("tensor name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(u8::try_from(t.rank()).map_err(|_| Error::InvalidTensor("rank above 255".into()))?);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::InvalidTensor(format!("extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (needed {n} more)", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let fail = |detail: String| Error::format(origin, detail);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(&fail)? != MAGIC {
        return Err(fail("bad checkpoint magic".into()));
    }
    let version = r.u32().map_err(&fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32().map_err(&fail)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16().map_err(&fail)? as usize;
        let name = std::str::from_utf8(r.take(len).map_err(&fail)?)
            .map_err(|e| fail(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.u8().map_err(&fail)?;
        if dtype != T::DTYPE {
            return Err(fail(format!("tensor `{name}` has dtype {dtype}, expected {}", T::DTYPE)));
        }
        let rank = r.u8().map_err(&fail)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(&fail)?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * T::BYTES).map_err(&fail)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| fail(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let bytes = encode(&model.state())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]).unwrap();
        let mut expect = b"SGDCKPT1".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend([1, 0, b'w', 0, 1, 2, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]).unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad, p).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1], p).is_err());
        assert!(decode::<f64>(&bytes, p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode::<f32>(&long, p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(shape in proptest::collection::vec(1usize..4, 1..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff));
            let named = vec![("encoder.0.weight".to_string(), t)];
            let bytes = encode(&named).unwrap();
            let back = decode::<f32>(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            let same = back[0].1.data().iter().zip(named[0].1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
