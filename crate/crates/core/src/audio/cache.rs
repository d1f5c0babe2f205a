//! Feature cache layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "SMFEATS1"
//! version u32
//! frames  u32
//! width   u32
//! values  f32 × frames × width
//! has_norm u8, then (if 1) mean f32 × width, std f32 × width
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AudioFeatureMatrix, FeatureConfig, FeatureNormalizer, FEATURE_WIDTH};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"SMFEATS1";
pub const CACHE_VERSION: u32 = 1;

/// Hex SHA-256 over the raw audio bytes and the serialized feature config.
pub fn feature_cache_key(audio_bytes: &[u8], config: &FeatureConfig) -> String {
    let mut h = Sha256::new();
    h.update(audio_bytes);
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_feature_cache(m: &AudioFeatureMatrix, norm: Option<&FeatureNormalizer>) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + m.values.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.frames as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_WIDTH as u32).to_le_bytes());
    put_f32s(&mut out, &m.values);
    match norm {
        Some(n) => {
            out.push(1);
            put_f32s(&mut out, &n.mean);
            put_f32s(&mut out, &n.std);
        }
        None => out.push(0),
    }
    out
}

pub fn decode_feature_cache(
    bytes: &[u8],
) -> std::result::Result<(AudioFeatureMatrix, Option<FeatureNormalizer>), String> {
    let mut pos = 0;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("truncated feature cache")?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CACHE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let frames = u32_at(take(4)?) as usize;
    let width = u32_at(take(4)?) as usize;
    if width != FEATURE_WIDTH {
        return Err(format!("width {width}, expected {FEATURE_WIDTH}"));
    }
    let floats = |s: &[u8]| -> Vec<f64> {
        s.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    let values = floats(take(frames * width * 4)?);
    let norm = match take(1)?[0] {
        0 => None,
        1 => {
            let mean = floats(take(width * 4)?);
            let std = floats(take(width * 4)?);
            Some(FeatureNormalizer { mean, std })
        }
        f => return Err(format!("bad normalization flag {f}")),
    };
    if pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    let m = AudioFeatureMatrix::new(frames, values).map_err(|e| e.to_string())?;
    Ok((m, norm))
}

pub fn write_feature_cache(path: &Path, m: &AudioFeatureMatrix, norm: Option<&FeatureNormalizer>) -> Result<()> {
    std::fs::write(path, encode_feature_cache(m, norm)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<(AudioFeatureMatrix, Option<FeatureNormalizer>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes).map_err(|d| Error::format(path, d))
}
