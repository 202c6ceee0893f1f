//! Raw little-endian tensor files.
//!
//! Layout: 8-byte magic `UUTENSR1`, u8 dtype code (1 = f32, 2 = f64),
//! u8 rank, `rank` u64 extents, then the packed row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 8] = b"UUTENSR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawDtype {
    F32,
    F64,
}

impl RawDtype {
    pub fn code(self) -> u8 {
        match self {
            RawDtype::F32 => 1,
            RawDtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(RawDtype::F32),
            2 => Some(RawDtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            RawDtype::F32 => 4,
            RawDtype::F64 => 8,
        }
    }
}

/// Appends the encoding of `t` to `out`.
pub fn encode_raw_into(out: &mut Vec<u8>, t: &Tensor, dtype: RawDtype) {
    assert!(t.rank() <= u8::MAX as usize);
    out.extend_from_slice(RAW_MAGIC);
    out.push(dtype.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        RawDtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        RawDtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_raw(t: &Tensor, dtype: RawDtype) -> Vec<u8> {
    let mut out = Vec::new();
    encode_raw_into(&mut out, t, dtype);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated {what}: need {n} bytes, found {}", bytes.len()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Decodes one tensor from the front of `bytes` and advances past it.
pub fn decode_raw_from(bytes: &mut &[u8]) -> std::result::Result<Tensor, String> {
    if take(bytes, 8, "header")? != RAW_MAGIC {
        return Err("bad magic: not a raw tensor".into());
    }
    let code = take(bytes, 1, "header")?[0];
    let dtype = RawDtype::from_code(code).ok_or(format!("unknown dtype code {code}"))?;
    let rank = take(bytes, 1, "header")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, 8, "header")?.try_into().unwrap());
        if d == 0 {
            return Err("zero extent in shape".into());
        }
        shape.push(usize::try_from(d).map_err(|_| "extent too large".to_string())?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.width()).map(|b| (n, b)));
    let (n, nbytes) = n.ok_or("shape too large")?;
    let payload = take(bytes, nbytes, "payload")?;
    let data: Vec<f64> = match dtype {
        RawDtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        RawDtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    debug_assert_eq!(data.len(), n);
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode_raw(mut bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let t = decode_raw_from(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(format!("{} trailing bytes after payload", bytes.len()));
    }
    Ok(t)
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes).map_err(|d| Error::format(path, d))
}

pub fn write_raw(path: &Path, t: &Tensor, dtype: RawDtype) -> Result<()> {
    std::fs::write(path, encode_raw(t, dtype)).map_err(|e| Error::io(path, e))
}
