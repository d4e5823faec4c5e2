//! MFDT binary tensor format.
//!
//! Layout: `b"MFDT"`, version `0x01`, dtype byte (0 = f64, 1 = f32, 2 = u8),
//! rank byte, `rank` little-endian u64 extents, then the row-major payload in
//! little-endian order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFDT";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(DType::F64),
            "f32" => Ok(DType::F32),
            "u8" => Ok(DType::U8),
            _ => Err(Error::Format(format!("unknown dtype `{s}`"))),
        }
    }
}

/// Serialises `t`. u8 payloads round and saturate to `0..=255`.
pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::U8 => t.data().iter().for_each(|v| out.push(v.round().clamp(0.0, 255.0) as u8)),
    }
    Ok(out)
}

/// Parses one tensor from the front of `bytes`, returning it together with
/// its stored dtype and the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType, usize)> {
    let mut cur = bytes;
    let (t, dt) = read(&mut cur)?;
    Ok((t, dt, bytes.len() - cur.len()))
}

pub fn write<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(&encode(t, dtype)?)?;
    Ok(())
}

pub fn read<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = DType::from_code(head[5])?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        let e = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?;
        numel = numel.checked_mul(e).ok_or_else(|| Error::Format("extent overflow".into()))?;
        shape.push(e);
    }
    let nbytes = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("payload overflow".into()))?;
    let mut payload = Vec::new();
    r.take(nbytes as u64).read_to_end(&mut payload)?;
    if payload.len() != nbytes {
        return Err(Error::Format(format!("payload truncated: {} of {nbytes} bytes", payload.len())));
    }
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("header truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode(t, dtype)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, _, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}
