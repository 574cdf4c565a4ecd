use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{FrameSequence, Segmentation};
use crate::error::{Error, Result};

pub const FRAMES_MAGIC: &[u8; 4] = b"SQP1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Encodes a sequence as `SQP1 | u32 T | u32 D | f64 period | f32[T*D]`,
/// little-endian, row-major by frame. Values are narrowed to `f32`.
pub fn encode_frames(seq: &FrameSequence) -> Result<Vec<u8>> {
    let (t, d) = seq.data().dim();
    let t32 = u32::try_from(t).map_err(|_| Error::InvalidArgument("T exceeds u32".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::InvalidArgument("D exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&t32.to_le_bytes());
    buf.extend_from_slice(&d32.to_le_bytes());
    buf.extend_from_slice(&seq.frame_period_ms().to_le_bytes());
    for &v in seq.data().iter() {
        let v = v as f32;
        if !v.is_finite() {
            return Err(Error::NonFinite("value overflows f32".into()));
        }
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_frames(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != FRAMES_MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let period = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if t == 0 || d == 0 {
        return Err(Error::EmptySequence);
    }
    let expected = HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((t, d), values).expect("length checked above");
    FrameSequence::new(data, period)
}

pub fn save_frames(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_frames(seq)?)?;
    Ok(())
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameSequence> {
    decode_frames(&fs::read(path)?)
}

pub fn save_segmentation(seg: &Segmentation, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string(seg)?)?;
    Ok(())
}

pub fn load_segmentation(path: impl AsRef<Path>) -> Result<Segmentation> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
