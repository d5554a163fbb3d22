//! Raw frame container: a 32-byte header (8-byte magic, then `T`, `h`, `w`,
//! `c` as little-endian u32, then reserved padding) followed by row-major
//! little-endian 32-bit floats. Round trips are bit-exact at f32 precision.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"RSCLIP01";
pub const HEADER_LEN: usize = 32;

pub fn encode_frames(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.shape.len() != 4 {
        return Err(CoreError::Dimension(format!(
            "frame tensor must be [t, h, w, c], got {:?}",
            frames.shape
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + frames.numel() * 4);
    out.extend_from_slice(MAGIC);
    for dim in &frames.shape {
        let v = u32::try_from(*dim)
            .map_err(|_| CoreError::Format(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.resize(HEADER_LEN, 0);
    for &v in &frames.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(CoreError::Format("frame container too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            MAGIC
        )));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 8 + i * 4;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let numel: usize = dims.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != numel * 4 {
        return Err(CoreError::Format(format!(
            "expected {} payload bytes for {:?}, got {}",
            numel * 4,
            dims,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn write_frames_file(path: &Path, frames: &Tensor) -> Result<()> {
    let bytes = encode_frames(frames)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_frames_file(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_frames(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 3)
            .map(|i| f64::from((i as f32) * 0.12345 - 3.25))
            .collect();
        let t = Tensor::new(vec![2, 3, 4, 3], data).unwrap();
        let bytes = encode_frames(&t).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + t.numel() * 4);
        let back = decode_frames(&bytes).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in t.data.iter().zip(&back.data) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let t = Tensor::zeros(vec![1, 2, 2, 3]);
        let mut bytes = encode_frames(&t).unwrap();
        bytes[0] = b'X';
        assert!(decode_frames(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::zeros(vec![1, 2, 2, 3]);
        let bytes = encode_frames(&t).unwrap();
        assert!(decode_frames(&bytes[..bytes.len() - 4]).is_err());
    }
}
