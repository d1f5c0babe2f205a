//! Motion file format: a JSON header carrying metadata and the SSL track,
//! with the `p`/`r`/`v` blocks stored as little-endian `f64` either inline
//! (base64) or in sibling `.bin` files.

use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::motion::MotionSequence;
use super::GenreLabel;
use crate::error::{Error, Result};

pub const MOTION_FORMAT: &str = "spatial-motion";
pub const MOTION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockEncoding {
    Base64,
    Sibling,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    fps: f64,
    joints: usize,
    frames: usize,
    joint_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    genre: Option<GenreLabel>,
    #[serde(default)]
    ssl: Vec<[f64; 3]>,
    encoding: BlockEncoding,
    p: String,
    r: String,
    v: String,
}

/// Everything stored in one motion file.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFile {
    pub motion: MotionSequence,
    pub joint_names: Vec<String>,
    pub genre: Option<GenreLabel>,
    /// World-frame sound source positions, one per frame (may be empty).
    pub ssl: Vec<[f64; 3]>,
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("block has {} bytes, expected {}", bytes.len(), expected * 8),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn sibling(path: &Path, block: &str) -> PathBuf {
    let stem = path
        .file_name()
        .map(|s| s.to_string_lossy().trim_end_matches(".json").to_string())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{block}.bin"))
}

pub fn write_motion_file(path: &Path, file: &MotionFile, encoding: BlockEncoding) -> Result<()> {
    let m = &file.motion;
    let blocks = [("p", &m.positions), ("r", &m.rotations), ("v", &m.velocities)];
    let mut refs = Vec::with_capacity(3);
    for (name, data) in blocks {
        let bytes = to_bytes(data);
        match encoding {
            BlockEncoding::Base64 => refs.push(B64.encode(bytes)),
            BlockEncoding::Sibling => {
                let target = sibling(path, name);
                std::fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
                refs.push(target.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    let [p, r, v]: [String; 3] = refs.try_into().unwrap();
    let header = Header {
        format: MOTION_FORMAT.into(),
        version: MOTION_VERSION,
        fps: m.fps,
        joints: m.joints,
        frames: m.frames,
        joint_names: file.joint_names.clone(),
        genre: file.genre,
        ssl: file.ssl.clone(),
        encoding,
        p,
        r,
        v,
    };
    let text = serde_json::to_string(&header).expect("header serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_motion_file(path: &Path) -> Result<MotionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: Header = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if h.format != MOTION_FORMAT || h.version != MOTION_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format {} v{}", h.format, h.version),
        ));
    }
    let load = |reference: &str, width: usize| -> Result<Vec<f64>> {
        let bytes = match h.encoding {
            BlockEncoding::Base64 => B64
                .decode(reference)
                .map_err(|e| Error::format(path, e.to_string()))?,
            BlockEncoding::Sibling => {
                let target = path.with_file_name(reference);
                std::fs::read(&target).map_err(|e| Error::io(&target, e))?
            }
        };
        from_bytes(path, &bytes, h.frames * h.joints * width)
    };
    let motion = MotionSequence::new(h.fps, h.joints, load(&h.p, 3)?, load(&h.r, 6)?, load(&h.v, 3)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if !h.ssl.is_empty() && h.ssl.len() != h.frames {
        return Err(Error::format(path, "SSL track length differs from frame count"));
    }
    Ok(MotionFile {
        motion,
        joint_names: h.joint_names,
        genre: h.genre,
        ssl: h.ssl,
    })
}

/// Flat per-frame CSV of global joint positions for external viewers.
pub fn export_csv<W: Write>(mut w: W, motion: &MotionSequence, joint_names: &[String]) -> std::io::Result<()> {
    let mut header = vec!["frame".to_string(), "time".to_string()];
    for j in 0..motion.joints {
        let name = joint_names
            .get(j)
            .cloned()
            .unwrap_or_else(|| format!("joint{j}"));
        for axis in ["x", "y", "z"] {
            header.push(format!("{name}_{axis}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for t in 0..motion.frames {
        let mut row = vec![t.to_string(), format!("{:.6}", t as f64 / motion.fps)];
        let base = t * motion.joints * 3;
        row.extend(
            motion.positions[base..base + motion.joints * 3]
                .iter()
                .map(|v| format!("{v:.6}")),
        );
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MotionFile {
        let frames = 3;
        let motion = MotionSequence::new(
            30.0,
            2,
            (0..frames * 6).map(|i| i as f64 * 0.1).collect(),
            (0..frames * 12).map(|i| (i as f64).sin()).collect(),
            (0..frames * 6).map(|i| -(i as f64)).collect(),
        )
        .unwrap();
        MotionFile {
            motion,
            joint_names: vec!["root".into(), "tip".into()],
            genre: Some(GenreLabel::Sensitive),
            ssl: vec![[1.0, 2.0, 3.0]; frames],
        }
    }

    #[test]
    fn both_encodings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for enc in [BlockEncoding::Base64, BlockEncoding::Sibling] {
            let path = dir.path().join(format!("m_{enc:?}.json"));
            write_motion_file(&path, &sample(), enc).unwrap();
            assert_eq!(read_motion_file(&path).unwrap(), sample());
        }
        assert!(dir.path().join("m_Sibling.p.bin").exists());
    }

    #[test]
    fn truncated_block_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_motion_file(&path, &sample(), BlockEncoding::Sibling).unwrap();
        std::fs::write(dir.path().join("m.r.bin"), [0u8; 8]).unwrap();
        assert!(matches!(read_motion_file(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_has_header_and_one_row_per_frame() {
        let mut buf = Vec::new();
        let f = sample();
        export_csv(&mut buf, &f.motion, &f.joint_names).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("frame,time,root_x"));
        assert_eq!(lines[1].split(',').count(), 2 + 6);
    }
}
