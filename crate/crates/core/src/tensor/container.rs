//! `OSVT` tensor container: magic, version, dtype, rank, little-endian u64
//! dims, then the row-major little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OSVT";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_tensor_to<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + t.numel() * T::DTYPE.width());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE as u8);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.to_le_bytes_vec(&mut buf);
    }
    w.write_all(&buf)
}

/// Reads one tensor. A stored dtype different from `T` is converted.
pub fn read_tensor_from<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let bad = |reason: String| Error::format("OSVT tensor", reason);
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(|e| bad(e.to_string()))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    if head[4] != VERSION {
        return Err(bad(format!("unsupported version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => DType::F32,
        1 => DType::F64,
        d => return Err(bad(format!("unknown dtype {d}"))),
    };
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(|e| bad(e.to_string()))?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.width()];
    r.read_exact(&mut payload).map_err(|e| bad(e.to_string()))?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_slice(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_slice(c)))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor_to(&mut f, t).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut bytes.as_slice())
}
