//! Run-length encoding of binary masks.
//!
//! Uses the column-major run layout and compressed ASCII count string of the
//! COCO mask format, so encoded masks are interchangeable with `pycocotools`.
//! Runs alternate starting with background; a mask that begins with a set
//! pixel therefore starts with a zero-length run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized mask: `size` is `[height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: String,
}

/// Run lengths of a row-major bitmap, scanned column by column.
pub fn runs_from_bits(bits: &[bool], height: u32, width: u32) -> Vec<u32> {
    let (h, w) = (height as usize, width as usize);
    debug_assert_eq!(bits.len(), h * w);
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = bits[y * w + x];
            if v != current {
                runs.push(len);
                len = 0;
                current = v;
            }
            len += 1;
        }
    }
    runs.push(len);
    runs
}

/// Inverse of [`runs_from_bits`].
pub fn bits_from_runs(runs: &[u32], height: u32, width: u32) -> Result<Vec<bool>> {
    let (h, w) = (height as usize, width as usize);
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Parse(format!("run lengths sum to {total}, expected {}", h * w)));
    }
    let mut bits = vec![false; h * w];
    let mut pos = 0usize;
    let mut value = false;
    for &run in runs {
        if value {
            for i in pos..pos + run as usize {
                let (x, y) = (i / h, i % h);
                bits[y * w + x] = true;
            }
        }
        pos += run as usize;
        value = !value;
    }
    Ok(bits)
}

/// Compressed count string (delta against the run two places back, 5-bit
/// little-endian groups offset by ASCII `'0'`).
pub fn runs_to_string(runs: &[u32]) -> String {
    let mut out = String::with_capacity(runs.len() * 2);
    for (i, &run) in runs.iter().enumerate() {
        let mut x = run as i64;
        if i > 2 {
            x -= runs[i - 2] as i64;
        }
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn string_to_runs(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut runs: Vec<u32> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::Parse("truncated run-length string".into()));
            };
            if !(48..48 + 64).contains(&b) {
                return Err(Error::Parse(format!("invalid character {:?} at offset {p}", b as char)));
            }
            if k >= 12 {
                return Err(Error::Parse("run length overflows".into()));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = runs.len();
        if m > 2 {
            x += runs[m - 2] as i64;
        }
        let run = u32::try_from(x).map_err(|_| Error::Parse(format!("run {m} decodes to out-of-range value {x}")))?;
        runs.push(run);
    }
    Ok(runs)
}

/// Encode a row-major bitmap into the compressed count string.
pub fn rle_encode(bits: &[bool], height: u32, width: u32) -> String {
    runs_to_string(&runs_from_bits(bits, height, width))
}

/// Decode a compressed count string into a row-major bitmap.
pub fn rle_decode(counts: &str, height: u32, width: u32) -> Result<Vec<bool>> {
    bits_from_runs(&string_to_runs(counts)?, height, width)
}
