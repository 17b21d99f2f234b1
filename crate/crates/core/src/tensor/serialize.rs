//! Binary tensor format used by checkpoints.
//!
//! Layout, all little-endian:
//!   magic "CLTZ" | version u32 | dtype u8 (0=f32, 1=f64) | rank u8
//!   | extents rank×u64 | payload row-major
//!
//! Readers reject unknown magic/version/dtype and truncated payloads loudly;
//! a checkpoint that does not match the model asking for it must never load.

use super::{Scalar, Tensor};
use crate::{Error, Result};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"CLTZ";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE as u8, t.shape().len() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serde(format!(
            "bad tensor magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Serde(format!(
            "unsupported tensor version {version}, expected {VERSION}"
        )));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let dtype = match hdr[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Serde(format!("unknown dtype tag {other}"))),
    };
    if dtype != T::DTYPE {
        return Err(Error::Serde(format!(
            "tensor stored as {dtype:?} but {:?} requested",
            T::DTYPE
        )));
    }
    let rank = hdr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e8 = [0u8; 8];
        r.read_exact(&mut e8)?;
        shape.push(u64::from_le_bytes(e8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(T::from_f64(f64::from_le_bytes(buf)));
            }
        }
    }
    // trailing garbage would mean a concatenation bug upstream; single-tensor
    // streams are read to completion by the caller
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32_bit_exact() {
        let t = Tensor::<f32>::new(
            vec![2, 3],
            vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE, 1e30, -7.125],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn roundtrip_f64_bit_exact() {
        let t = Tensor::<f64>::new(vec![1, 2, 2], vec![std::f64::consts::PI, -0.0, 1e-300, 42.0])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic_version_dtype_truncation() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_tensor::<f32, _>(&mut bad_magic.as_slice()).is_err());

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(read_tensor::<f32, _>(&mut bad_version.as_slice()).is_err());

        // stored f32, requested f64
        assert!(read_tensor::<f64, _>(&mut buf.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 2];
        assert!(read_tensor::<f32, _>(&mut &truncated[..]).is_err());
    }
}
