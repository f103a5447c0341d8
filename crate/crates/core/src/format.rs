//! SMT1 binary tensor files.
//!
//! Layout: magic `SMT1`, one dtype byte (1 = f32, 2 = f64), one rank
//! byte, `rank` little-endian `u32` dimensions, then the row-major
//! little-endian payload. No padding anywhere.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SMT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    assert!(t.ndim() <= u8::MAX as usize, "rank exceeds 255");
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).expect("dimension fits in u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Header fields of an SMT1 buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload_offset: usize,
}

pub fn decode_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = *bytes.get(4).ok_or_else(|| err(4, "missing dtype byte".into()))?;
    let dtype = DType::from_code(dtype).ok_or_else(|| err(4, format!("unknown dtype code {dtype}")))?;
    let ndim = *bytes.get(5).ok_or_else(|| err(5, "missing rank byte".into()))? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut pos = 6;
    for i in 0..ndim {
        let chunk = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| err(pos, format!("truncated dimension {i}")))?;
        shape.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(6, format!("dimensions {shape:?} overflow")))?;
    let expected = numel
        .checked_mul(dtype.size())
        .and_then(|n| n.checked_add(pos))
        .ok_or_else(|| err(6, format!("dimensions {shape:?} overflow")))?;
    if bytes.len() < expected {
        return Err(err(
            bytes.len(),
            format!("payload truncated: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(err(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok(Header {
        dtype,
        shape,
        payload_offset: pos,
    })
}

/// Decodes a buffer whose dtype must match `T`.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let header = decode_header(bytes, path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 4,
            msg: format!("dtype {:?} where {:?} was expected", header.dtype, T::DTYPE),
        });
    }
    let size = T::DTYPE.size();
    let data = bytes[header.payload_offset..]
        .chunks_exact(size)
        .map(T::read_le)
        .collect();
    Tensor::new(&header.shape, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: header.payload_offset,
        msg: e.to_string(),
    })
}

/// Decodes a buffer of either dtype, converting to `T`.
pub fn decode_any<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    match decode_header(bytes, path)?.dtype {
        DType::F32 => decode::<f32>(bytes, path).map(|t| t.cast()),
        DType::F64 => decode::<f64>(bytes, path).map(|t| t.cast()),
    }
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_any<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes, path)
}
