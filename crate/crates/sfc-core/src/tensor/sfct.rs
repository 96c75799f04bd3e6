//! Flat binary tensor container.
//!
//! Layout: magic "SFCT" | u8 version (1) | u8 dtype (0 = f32, 1 = f64) |
//! u8 rank | rank × u64 little-endian dims | raw little-endian values.

use std::fs;
use std::path::Path;

use super::{numel, Dtype, Scalar, Tensor};
use crate::error::{Result, SfcError};

const MAGIC: &[u8; 4] = b"SFCT";
const VERSION: u8 = 1;

fn bad(detail: impl Into<String>) -> SfcError {
    SfcError::Format { what: "sfct", detail: detail.into() }
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.shape().len() + t.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        match T::DTYPE {
            Dtype::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    out
}

/// Parse header only: (dtype, shape, offset-of-values).
fn parse_header(b: &[u8]) -> Result<(Dtype, Vec<usize>, usize)> {
    if b.len() < 7 || &b[0..4] != MAGIC {
        return Err(bad("missing SFCT magic"));
    }
    if b[4] != VERSION {
        return Err(bad(format!("unsupported version {}", b[4])));
    }
    let dtype = Dtype::from_tag(b[5])?;
    let rank = b[6] as usize;
    let mut off = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if off + 8 > b.len() {
            return Err(bad("truncated dims"));
        }
        shape.push(u64::from_le_bytes(b[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if b.len() != off + numel(&shape) * width {
        return Err(bad(format!(
            "payload is {} bytes, header promises {}",
            b.len() - off,
            numel(&shape) * width
        )));
    }
    Ok((dtype, shape, off))
}

/// Strict read: the stored dtype must match `T`.
pub fn from_bytes<T: Scalar>(b: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, off) = parse_header(b)?;
    if dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {dtype:?} does not match requested {:?}", T::DTYPE)));
    }
    let n = numel(&shape);
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            for c in b[off..].chunks_exact(4) {
                data.push(T::f(f32::from_le_bytes(c.try_into().unwrap()) as f64));
            }
        }
        Dtype::F64 => {
            for c in b[off..].chunks_exact(8) {
                data.push(T::f(f64::from_le_bytes(c.try_into().unwrap())));
            }
        }
    }
    Tensor::from_vec(&shape, data)
}

/// Dtype-agnostic read, widening to f64 (for inspection tools).
pub fn from_bytes_any(b: &[u8]) -> Result<(Dtype, Tensor<f64>)> {
    let (dtype, shape, off) = parse_header(b)?;
    let mut data = Vec::with_capacity(numel(&shape));
    match dtype {
        Dtype::F32 => {
            for c in b[off..].chunks_exact(4) {
                data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for c in b[off..].chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
    }
    Ok((dtype, Tensor::from_vec(&shape, data)?))
}

pub fn write_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn read_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    from_bytes(&fs::read(path)?)
}

pub fn read_file_any(path: &Path) -> Result<(Dtype, Tensor<f64>)> {
    from_bytes_any(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 3], vec![1.5f64, -2.25, 1e-300, 0.0, 3.7, -0.125]).unwrap();
        let b = to_bytes(&t);
        let back: Tensor<f64> = from_bytes(&b).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (x, y) in t.data().iter().zip(back.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn f32_roundtrip_preserves_values_and_scalar_rank_zero_works() {
        let t = Tensor::from_vec(&[4], vec![0.5f32, -1.0, 3.25, 100.0]).unwrap();
        let back: Tensor<f32> = from_bytes(&to_bytes(&t)).unwrap();
        assert_eq!(back.data(), t.data());
        let s = Tensor::scalar(7.0f32);
        let back: Tensor<f32> = from_bytes(&to_bytes(&s)).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[7.0]);
    }

    #[test]
    fn dtype_mismatch_and_truncation_are_rejected() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = to_bytes(&t);
        assert!(from_bytes::<f64>(&b).is_err());
        assert!(from_bytes::<f32>(&b[..b.len() - 1]).is_err());
        let (dtype, wide) = from_bytes_any(&b).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(wide.data(), &[1.0f64, 2.0]);
    }
}
