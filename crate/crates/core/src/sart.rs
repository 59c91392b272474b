//! `SART` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SART" | version: u8 | dtype: u8 | rank: u8 | dims: rank x u32 | payload
//! ```
//!
//! The payload is the row-major element data: `float32` for dtype code 2 and
//! `uint8` for dtype code 1. Several records may be concatenated in one file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SarError};

pub const MAGIC: &[u8; 4] = b"SART";
pub const VERSION: u8 = 1;
pub const DTYPE_U8: u8 = 1;
pub const DTYPE_F32: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum SartData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SartTensor {
    pub dims: Vec<u32>,
    pub data: SartData,
}

impl SartTensor {
    pub fn f32(dims: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: SartData::F32(data),
        }
    }

    pub fn u8(dims: &[usize], data: Vec<u8>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: SartData::U8(data),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            SartData::F32(v) => Some(v),
            SartData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            SartData::U8(v) => Some(v),
            SartData::F32(_) => None,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match self.data {
            SartData::U8(_) => DTYPE_U8,
            SartData::F32(_) => DTYPE_F32,
        });
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            SartData::U8(v) => out.extend_from_slice(v),
            SartData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    /// Decode one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        if bytes.len() < 7 || &bytes[0..4] != MAGIC {
            return Err("missing SART magic".into());
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let dtype = bytes[5];
        let rank = bytes[6] as usize;
        let mut pos = 7;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| "truncated header".to_string())?;
            dims.push(u32::from_le_bytes(raw.try_into().unwrap()));
            pos += 4;
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let data = match dtype {
            DTYPE_U8 => {
                let raw = bytes
                    .get(pos..pos + count)
                    .ok_or_else(|| "truncated payload".to_string())?;
                pos += count;
                SartData::U8(raw.to_vec())
            }
            DTYPE_F32 => {
                let raw = bytes
                    .get(pos..pos + 4 * count)
                    .ok_or_else(|| "truncated payload".to_string())?;
                pos += 4 * count;
                SartData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(format!("unknown dtype code {other}")),
        };
        Ok((Self { dims, data }, pos))
    }
}

pub fn write_all(path: &Path, tensors: &[SartTensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        t.encode(&mut buf);
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write(path: &Path, tensor: &SartTensor) -> Result<()> {
    write_all(path, std::slice::from_ref(tensor))
}

pub fn read_all(path: &Path) -> Result<Vec<SartTensor>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, used) = SartTensor::decode(&bytes[pos..]).map_err(|reason| SarError::Format {
            path: path.to_path_buf(),
            reason,
        })?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<SartTensor> {
    let mut all = read_all(path)?;
    if all.len() != 1 {
        return Err(SarError::Format {
            path: path.to_path_buf(),
            reason: format!("expected one tensor, found {}", all.len()),
        });
    }
    Ok(all.remove(0))
}
