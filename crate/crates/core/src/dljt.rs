//! DLJT binary tensor files.
//!
//! Layout: `b"DLJT"`, `u8` version (1), `u8` dtype code, `u8` rank (4),
//! `u8` reserved (0), four little-endian `u32` extents in NCHW order, then the
//! raw little-endian elements at their declared width.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use half::bf16;
use thiserror::Error;

use crate::scalar::DType;
use crate::tensor::{Shape, Tensor, TensorData, TensorError};

pub const MAGIC: &[u8; 4] = b"DLJT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8 + 16;

#[derive(Debug, Error)]
pub enum DljtError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("rank must be 4, got {0}")]
    BadRank(u8),
    #[error("truncated data: expected {expected} bytes, found {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("{0} trailing bytes after tensor data")]
    TrailingData(usize),
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.byte_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, t.dtype().code(), 4, 0]);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::BF16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, DljtError> {
    if bytes.len() < 4 {
        return Err(DljtError::TruncatedData {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DljtError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DljtError::TruncatedData {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(DljtError::UnsupportedVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5]).ok_or(DljtError::BadDType(bytes[5]))?;
    if bytes[6] != 4 {
        return Err(DljtError::BadRank(bytes[6]));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape::from_dims(dims)?;
    let width = dtype.byte_width();
    let payload = &bytes[HEADER_LEN..];
    let expected = shape.element_count() * width;
    if payload.len() < expected {
        return Err(DljtError::TruncatedData {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DljtError::TrailingData(payload.len() - expected));
    }
    let chunks = payload.chunks_exact(width);
    let data = match dtype {
        DType::F32 => TensorData::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::F64 => TensorData::F64(chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::BF16 => TensorData::BF16(
            chunks
                .map(|c| bf16::from_bits(u16::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        ),
    };
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> io::Result<()> {
    w.write_all(&to_bytes(t))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, DljtError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor) -> io::Result<()> {
    fs::write(path, to_bytes(t))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor, DljtError> {
    from_bytes(&fs::read(path)?)
}
