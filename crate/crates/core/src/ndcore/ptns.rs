//! The PTNS raw tensor container.
//!
//! Little-endian throughout: magic `b"PTNS"`, `u32` version (1), `u32` dtype
//! (0 = f32, 1 = f64), `u32` ndim, `ndim × u64` extents, then the contiguous
//! row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Result};
use crate::ndcore::tensor::{Shape, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"PTNS";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let dims = t.dims();
    let width = std::mem::size_of::<T>();
    let mut out = Vec::with_capacity(16 + 8 * dims.len() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_le_bytes(b.try_into().expect("4 bytes"))),
        None => bail!(Format, "PTNS header truncated at byte {at}"),
    }
}

/// Decodes a PTNS buffer, converting the payload to `T` if the stored dtype differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        bail!(Format, "missing PTNS magic");
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        bail!(Format, "unsupported PTNS version {version}");
    }
    let dtype = read_u32(bytes, 8)?;
    let ndim = read_u32(bytes, 12)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut at = 16;
    for _ in 0..ndim {
        let Some(b) = bytes.get(at..at + 8) else {
            bail!(Format, "PTNS extents truncated");
        };
        let d = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        dims.push(usize::try_from(d).map_err(|_| crate::Error::Size(format!("extent {d}")))?);
        at += 8;
    }
    let shape = Shape::new(dims)?;
    let n = shape.numel();
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => bail!(Format, "unknown PTNS dtype {other}"),
    };
    let payload = &bytes[at..];
    if payload.len() != n * width {
        bail!(
            Format,
            "PTNS payload is {} bytes, expected {}",
            payload.len(),
            n * width
        );
    }
    let data: Vec<T> = match dtype {
        0 => payload
            .chunks_exact(4)
            .map(|c| T::c(f32::read_le(c) as f64))
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| T::c(f64::read_le(c)))
            .collect(),
    };
    Tensor::from_vec(shape, data)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}
