//! Shared binary container: magic, version, JSON header, raw little-endian payload.
//!
//! ```text
//! offset  size  field
//! 0       8     magic
//! 8       4     format version (u32 LE)
//! 12      4     header length H (u32 LE)
//! 16      H     header, UTF-8 JSON
//! 16+H    ...   payload
//! ```

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("truncated payload at byte offset {0}")]
    Truncated(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn write_header<W: Write, H: Serialize>(
    w: &mut W,
    magic: &[u8; 8],
    version: u32,
    header: &H,
) -> Result<u64, ContainerError> {
    let json = serde_json::to_vec(header).map_err(|e| ContainerError::Header(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| ContainerError::Header("header too large".into()))?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    Ok(16 + json.len() as u64)
}

pub(crate) fn read_header<R: Read, H: DeserializeOwned>(
    r: &mut R,
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, u64), ContainerError> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found).map_err(|_| ContainerError::Truncated(0))?;
    if &found != magic {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let found_version = read_u32(r, 8)?;
    if found_version != version {
        return Err(ContainerError::VersionMismatch {
            found: found_version,
            expected: version,
        });
    }
    let len = read_u32(r, 12)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| ContainerError::Truncated(16))?;
    let header = serde_json::from_slice(&json).map_err(|e| ContainerError::Header(e.to_string()))?;
    Ok((header, 16 + len as u64))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, offset: u64) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ContainerError::Truncated(offset))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u16<R: Read>(r: &mut R, offset: u64) -> Result<u16, ContainerError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| ContainerError::Truncated(offset))?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, offset: u64) -> Result<Vec<f32>, ContainerError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|_| ContainerError::Truncated(offset))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
