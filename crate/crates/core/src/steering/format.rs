//! Binary basis file.
//!
//! Layout (little-endian): magic `LPSB`, version `u16`, dim `u32`, count
//! `u32`, layer `u16`, cfg digest `u64`, then `count * dim` `f32` values in
//! vector order. Loading checks every field and rejects vectors that are not
//! unit-norm.

use std::io::{Read, Write};

use super::{SteeringBasis, UNIT_TOLERANCE};
use crate::error::{LpsrError, Result};
use crate::numerics::{norm, Vector};

pub const MAGIC: [u8; 4] = *b"LPSB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

fn format_err(offset: usize, msg: impl Into<String>) -> LpsrError {
    LpsrError::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn to_bytes(basis: &SteeringBasis) -> Result<Vec<u8>> {
    let dim = u32::try_from(basis.dim()).map_err(|_| format_err(6, "dim exceeds u32"))?;
    let count = u32::try_from(basis.count()).map_err(|_| format_err(10, "count exceeds u32"))?;
    let layer = u16::try_from(basis.layer()).map_err(|_| format_err(14, "layer exceeds u16"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + basis.count() * basis.dim() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&layer.to_le_bytes());
    out.extend_from_slice(&basis.cfg_digest().to_le_bytes());
    for v in basis.vectors() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<SteeringBasis> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dim = u32_at(6) as usize;
    if dim == 0 {
        return Err(format_err(6, "zero dimension"));
    }
    let count = u32_at(10) as usize;
    if count == 0 {
        return Err(format_err(10, "empty basis"));
    }
    let layer = u16_at(14) as usize;
    let digest = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));

    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(6, "payload size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format_err(
            HEADER_LEN + payload.len().min(expected),
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(count);
    for i in 0..count {
        let start = HEADER_LEN + i * dim * 4;
        let mut xs = Vec::with_capacity(dim);
        for j in 0..dim {
            let o = start + j * 4;
            let x = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(format_err(o, "non-finite float"));
            }
            xs.push(x);
        }
        let n = norm(&xs);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(format_err(start, format!("vector {i} has norm {n}")));
        }
        vectors.push(Vector::new(xs)?);
    }
    SteeringBasis::new(vectors, layer, digest)
}

pub fn write_basis(basis: &SteeringBasis, mut w: impl Write) -> std::io::Result<()> {
    let bytes = to_bytes(basis).map_err(std::io::Error::other)?;
    w.write_all(&bytes)
}

pub fn read_basis(mut r: impl Read) -> std::io::Result<Result<SteeringBasis>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Ok(from_bytes(&bytes))
}
