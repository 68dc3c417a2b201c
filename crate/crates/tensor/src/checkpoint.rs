//! `SPT1` flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "SPT1"
//! u32     tensor count
//! per tensor:
//!   u32   name length in bytes, then the UTF-8 name
//!   u8    dtype code (0 = f32, 1 = f64)
//!   u32   rank
//!   u64   extent, repeated rank times
//!   raw little-endian element data, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPT1";

/// A tensor of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Wraps a tensor of any element type, keeping its dtype.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Converts to `T`, casting if the stored dtype differs.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn fmt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&[T::DTYPE.code()])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, AnyTensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    let count = u32::try_from(entries.len()).map_err(|_| fmt_err("too many tensors"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| fmt_err("name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        match t {
            AnyTensor::F32(t) => write_tensor(&mut w, t)?,
            AnyTensor::F64(t) => write_tensor(&mut w, t)?,
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| fmt_err(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(
        read_exact(r, 4)?.try_into().expect("4 bytes"),
    ))
}

fn read_body<T: Element, R: Read>(r: &mut R, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let size = T::DTYPE.size_of();
    let raw = read_exact(r, numel * size)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, AnyTensor)>> {
    let magic = read_exact(&mut r, 4)?;
    if magic != MAGIC {
        return Err(fmt_err(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact(&mut r, len)?)
            .map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        let code = read_exact(&mut r, 1)?[0];
        let dtype =
            DType::from_code(code).ok_or_else(|| fmt_err(format!("unknown dtype code {code}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_exact(&mut r, 8)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| fmt_err("extent overflows usize"))?);
        }
        let t = match dtype {
            DType::F32 => AnyTensor::F32(read_body(&mut r, shape)?),
            DType::F64 => AnyTensor::F64(read_body(&mut r, shape)?),
        };
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[(String, AnyTensor)]) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), entries)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let t = Tensor::from_vec([2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), t.into())]).unwrap();
        assert_eq!(&buf[..4], b"SPT1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'w');
        assert_eq!(buf[13], 0);
        assert_eq!(&buf[14..18], &1u32.to_le_bytes());
        assert_eq!(&buf[18..26], &2u64.to_le_bytes());
        assert_eq!(&buf[26..30], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 34);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_checkpoint(&b"SPT2\0\0\0\0"[..]),
            Err(TensorError::Format(_))
        ));
        let t = Tensor::from_vec([3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("x".into(), t.into())]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            read_checkpoint(&buf[..]),
            Err(TensorError::Format(_))
        ));
    }
}
