//! Little-endian binary tensor container shared by embedding sets,
//! distance matrices and named tensors.
//!
//! Layout:
//! - magic: 4 bytes (`REMB` for embeddings and tensors, `RDMX` for distances)
//! - version: u32 = 1
//! - N, D, S, Dl: u32 each
//! - N·D f32 values, row-major
//! - N·S·Dl f32 values in (row, stripe, dim) order
//!
//! `S = 0` and `Dl = 0` together mean "no local block".

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"REMB";
pub const DISTANCE_MAGIC: [u8; 4] = *b"RDMX";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub rows: u32,
    pub dim: u32,
    pub stripes: u32,
    pub local_dim: u32,
}

impl Header {
    fn payload_floats(&self) -> Option<usize> {
        let n = self.rows as usize;
        let global = n.checked_mul(self.dim as usize)?;
        let local = n
            .checked_mul(self.stripes as usize)?
            .checked_mul(self.local_dim as usize)?;
        global.checked_add(local)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::shape(format!("{what} = {v} does not fit in u32")))
}

/// Serialize a global block and an optional local block. Values are
/// written as-is; callers validate finiteness.
pub fn encode(
    magic: [u8; 4],
    global: ArrayView2<'_, f32>,
    local: Option<ArrayView3<'_, f32>>,
) -> Result<Vec<u8>> {
    let (n, d) = global.dim();
    let (s, dl) = match &local {
        Some(l) => {
            let (ln, s, dl) = l.dim();
            if ln != n {
                return Err(Error::shape(format!(
                    "local block has {ln} rows, global has {n}"
                )));
            }
            if s == 0 || dl == 0 {
                return Err(Error::shape("local block must have S >= 1 and Dl >= 1"));
            }
            (s, dl)
        }
        None => (0, 0),
    };
    let header = Header {
        rows: to_u32(n, "N")?,
        dim: to_u32(d, "D")?,
        stripes: to_u32(s, "S")?,
        local_dim: to_u32(dl, "Dl")?,
    };
    let floats = header
        .payload_floats()
        .ok_or_else(|| Error::shape("payload size overflows"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * floats);
    out.extend_from_slice(&magic);
    for v in [VERSION, header.rows, header.dim, header.stripes, header.local_dim] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    // `iter()` walks in logical (row-major) order regardless of memory layout.
    for &v in global.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = local {
        for &v in l.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_header(magic: [u8; 4], bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let header = Header {
        rows: word(2),
        dim: word(3),
        stripes: word(4),
        local_dim: word(5),
    };
    if (header.stripes == 0) != (header.local_dim == 0) {
        return Err(Error::shape(format!(
            "S = {} and Dl = {} must both be zero or both be positive",
            header.stripes, header.local_dim
        )));
    }
    Ok(header)
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<(Array2<f32>, Option<Array3<f32>>)> {
    let header = read_header(magic, bytes)?;
    let floats = header
        .payload_floats()
        .ok_or_else(|| Error::shape("payload size overflows"))?;
    let expected = floats
        .checked_mul(4)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::shape("payload size overflows"))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::shape(format!(
            "{} trailing bytes after payload of {expected} bytes",
            bytes.len() - expected
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let n = header.rows as usize;
    let d = header.dim as usize;
    let global: Vec<f32> = values.by_ref().take(n * d).collect();
    let global = Array2::from_shape_vec((n, d), global).expect("length checked above");
    let local = if header.stripes > 0 {
        let s = header.stripes as usize;
        let dl = header.local_dim as usize;
        let local: Vec<f32> = values.collect();
        Some(Array3::from_shape_vec((n, s, dl), local).expect("length checked above"))
    } else {
        None
    };
    Ok((global, local))
}
