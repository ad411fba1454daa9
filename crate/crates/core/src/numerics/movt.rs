//! MOVT binary tensor files.
//!
//! Layout: magic `MOVT`, version byte `0x01`, rank byte, `rank` little-endian
//! u32 extents, then the row-major values as little-endian f32. Values are
//! narrowed to f32 on save and widened back to f64 on load.

use std::fs;
use std::path::Path;

use crate::error::{MovaError, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MOVT";
pub const VERSION: u8 = 0x01;

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| MovaError::Format(format!("rank {} exceeds 255", tensor.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in tensor.dims() {
        let d = u32::try_from(d)
            .map_err(|_| MovaError::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in tensor.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(MovaError::Numeric {
                context: "f32 narrowing".into(),
                index: i,
            });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 || bytes[..4] != MAGIC {
        return Err(MovaError::Format("missing MOVT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(MovaError::Format(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(MovaError::Format("truncated extents".into()));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != 4 * count {
        return Err(MovaError::Format(format!(
            "expected {} value bytes for dims {dims:?}, found {}",
            4 * count,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn save(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)?).map_err(|e| MovaError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MovaError::io(path, e))?;
    decode(&bytes)
}
