//! Binary tensor container used for checkpoints and dataset arrays.
//!
//! Layout: magic bytes `O3VT`, one dtype byte (0 = fp32, 1 = fp64,
//! 2 = u8), one rank byte, `rank` little-endian u64 extents, then the
//! row-major little-endian payload.

use std::path::Path;

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"O3VT";

fn encode_header(dtype: Dtype, dims: &[usize], out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn save_scalar<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    assert!(t.rank() <= u8::MAX as usize, "rank too large for container");
    let mut buf = Vec::with_capacity(6 + 8 * t.rank() + T::BYTES * t.numel());
    encode_header(T::DTYPE, t.dims(), &mut buf);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn save_u8(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let n: usize = dims.iter().product();
    assert!(n == data.len(), "u8 tensor shape {:?} wants {} bytes, got {}", dims, n, data.len());
    let mut buf = Vec::with_capacity(6 + 8 * dims.len() + data.len());
    encode_header(Dtype::U8, dims, &mut buf);
    buf.extend_from_slice(data);
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Header {
    dtype: Dtype,
    dims: Vec<usize>,
    payload_at: usize,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { at: bytes.len(), missing: 4 - bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated { at: bytes.len(), missing: 6 - bytes.len() });
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or(Error::BadDtype(bytes[4]))?;
    let rank = bytes[5] as usize;
    let dims_end = 6 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Truncated { at: bytes.len(), missing: dims_end - bytes.len() });
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 6 + 8 * i;
        dims.push(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize);
    }
    Ok(Header { dtype, dims, payload_at: dims_end })
}

fn check_payload(bytes: &[u8], header: &Header, elem_bytes: usize) -> Result<usize> {
    let n: usize = header.dims.iter().product();
    let want = header.payload_at + n * elem_bytes;
    if bytes.len() < want {
        return Err(Error::Truncated { at: bytes.len(), missing: want - bytes.len() });
    }
    Ok(n)
}

/// Load a float tensor, converting between fp32 and fp64 as needed.
pub fn load_scalar<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(&bytes)?;
    match header.dtype {
        Dtype::F32 => {
            let n = check_payload(&bytes, &header, 4)?;
            let data = (0..n)
                .map(|i| T::from_f64(f32::read_le(&bytes[header.payload_at + 4 * i..]) as f64))
                .collect();
            Ok(Tensor::from_vec(header.dims, data))
        }
        Dtype::F64 => {
            let n = check_payload(&bytes, &header, 8)?;
            let data = (0..n)
                .map(|i| T::from_f64(f64::read_le(&bytes[header.payload_at + 8 * i..])))
                .collect();
            Ok(Tensor::from_vec(header.dims, data))
        }
        Dtype::U8 => Err(Error::DtypeMismatch { found: Dtype::U8, expected: T::DTYPE }),
    }
}

/// Load any float tensor as fp64.
pub fn load_f64(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    load_scalar::<f64>(path)
}

pub fn load_u8(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(&bytes)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::DtypeMismatch { found: header.dtype, expected: Dtype::U8 });
    }
    let n = check_payload(&bytes, &header, 1)?;
    Ok((header.dims.clone(), bytes[header.payload_at..header.payload_at + n].to_vec()))
}
