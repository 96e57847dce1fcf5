//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "CLTB"        4 bytes
//! version              u8   (1)
//! dtype                u8   (0 = f32)
//! ndim                 u8
//! dims                 ndim x u64
//! payload              product(dims) x f32, row-major
//! ```

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const MAGIC: [u8; 4] = *b"CLTB";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug)]
pub struct TensorBlob {
    dims: Vec<u64>,
    data: Vec<f32>,
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
impl PartialEq for TensorBlob {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn element_count(dims: &[u64]) -> Result<usize> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| invalid(format!("tensor dims {dims:?} overflow")))
}

struct Header {
    dims: Vec<u64>,
    payload_offset: u64,
}

fn parse_header(mut r: impl Read) -> Result<Header> {
    let mut fixed = [0u8; 7];
    r.read_exact(&mut fixed)
        .map_err(|_| Error::Parse("tensor header truncated".into()))?;
    if fixed[..4] != MAGIC {
        return Err(Error::Parse("bad tensor magic".into()));
    }
    if fixed[4] != VERSION {
        return Err(Error::Parse(format!("unsupported tensor version {}", fixed[4])));
    }
    if fixed[5] != DTYPE_F32 {
        return Err(Error::Parse(format!("unsupported dtype {}", fixed[5])));
    }
    let ndim = fixed[6] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Parse("tensor dims truncated".into()))?;
        dims.push(u64::from_le_bytes(buf));
    }
    Ok(Header {
        dims,
        payload_offset: 7 + 8 * ndim as u64,
    })
}

impl TensorBlob {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(invalid("too many tensor dimensions"));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(invalid(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let n = element_count(&header.dims)?;
        let payload = &bytes[header.payload_offset as usize..];
        if payload.len() != n * 4 {
            return Err(Error::Parse(format!(
                "tensor payload is {} bytes, expected {}",
                payload.len(),
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            dims: header.dims,
            data,
        })
    }

    /// Read only the `index`-th slice along the outermost dimension of a
    /// stored tensor, without loading the rest of the payload.
    pub fn read_outer_slice(path: &Path, index: u64) -> Result<Self> {
        let mut f = File::open(path)?;
        let header = parse_header(&mut f)?;
        let Some((&outer, inner)) = header.dims.split_first() else {
            return Err(invalid("cannot slice a scalar tensor"));
        };
        if index >= outer {
            return Err(invalid(format!("slice {index} out of range 0..{outer}")));
        }
        let n = element_count(inner)?;
        f.seek(SeekFrom::Start(header.payload_offset + index * n as u64 * 4))?;
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Parse("tensor payload truncated".into()))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(inner.to_vec(), data)
    }
}
