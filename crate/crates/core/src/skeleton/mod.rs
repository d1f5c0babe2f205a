//! Skeleton definition, rotation representations, forward kinematics and the
//! per-frame motion vector layout `[positions | 6D rotations | velocities]`.

pub mod contacts;
pub mod io;
pub mod kinematics;
pub mod motion;
pub mod normalize;
pub mod rotation;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contacts::{detect_foot_contacts, ContactThresholds};
pub use kinematics::{forward_kinematics, FkTree};
pub use motion::{assemble_vector, compute_velocities, disassemble_vector, MotionSequence};
pub use normalize::{facing_yaw, normalize_sequence, SslTrack};
pub use rotation::{matrix_to_sixd, sixd_to_matrix};

/// Body joints modeled (fingers and face excluded).
pub const JOINT_COUNT: usize = 25;
/// Width of one frame of the motion vector: `J * (3 + 6 + 3)`.
pub const MOTION_WIDTH: usize = JOINT_COUNT * 12;

const NEUTRAL_SKELETON: &str = include_str!("../../assets/skeleton_neutral.txt");

/// Kinematic tree with rest offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
    feet: Vec<usize>,
}

impl SkeletonSpec {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vector3<f64>>,
        feet: Vec<usize>,
    ) -> Result<Self> {
        let n = names.len();
        if parents.len() != n || offsets.len() != n {
            return Err(Error::Contract("skeleton arrays differ in length".into()));
        }
        if n == 0 {
            return Err(Error::Contract("skeleton has no joints".into()));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || parents[0].is_some() {
            return Err(Error::Contract(format!(
                "skeleton must have exactly one root at index 0 (found {roots})"
            )));
        }
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j {
                    return Err(Error::Contract(format!(
                        "joint {j} ({}) has parent {p}; parents must precede children",
                        names[j]
                    )));
                }
            }
        }
        if offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::Contract("non-finite rest offset".into()));
        }
        if let Some(f) = feet.iter().find(|&&f| f >= n) {
            return Err(Error::Contract(format!("foot joint {f} out of range")));
        }
        Ok(Self {
            names,
            parents,
            offsets,
            feet,
        })
    }

    /// The bundled neutral body.
    pub fn neutral() -> Self {
        Self::parse(NEUTRAL_SKELETON).expect("bundled skeleton is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Parses the plain-text format: one `name parent x y z` line per joint
    /// (`-` marks the root) and an `@feet a b` line naming the foot joints.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut parents = Vec::new();
        let mut offsets = Vec::new();
        let mut feet_names: Vec<String> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "@feet" {
                feet_names = fields[1..].iter().map(|s| s.to_string()).collect();
                continue;
            }
            if fields.len() != 5 {
                return Err(Error::Contract(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parent = if fields[1] == "-" {
                None
            } else {
                Some(names.iter().position(|n| n == fields[1]).ok_or_else(|| {
                    Error::Contract(format!(
                        "line {}: parent {} is not defined before its child",
                        lineno + 1,
                        fields[1]
                    ))
                })?)
            };
            let coord = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Contract(format!("line {}: bad number {s}", lineno + 1)))
            };
            names.push(fields[0].to_string());
            parents.push(parent);
            offsets.push(Vector3::new(coord(fields[2])?, coord(fields[3])?, coord(fields[4])?));
        }
        let feet = feet_names
            .iter()
            .map(|f| {
                names
                    .iter()
                    .position(|n| n == f)
                    .ok_or_else(|| Error::Contract(format!("unknown foot joint {f}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, parents, offsets, feet)
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn root(&self) -> usize {
        0
    }

    /// Joints used for contact detection and the foot loss.
    pub fn foot_joints(&self) -> &[usize] {
        &self.feet
    }

    pub fn joint(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Reaction-intensity class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum GenreLabel {
    Dull,
    Neutral,
    Sensitive,
}

impl GenreLabel {
    pub const ALL: [GenreLabel; 3] = [GenreLabel::Dull, GenreLabel::Neutral, GenreLabel::Sensitive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Index { index: i, max: 2 })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GenreLabel::Dull => "dull",
            GenreLabel::Neutral => "neutral",
            GenreLabel::Sensitive => "sensitive",
        }
    }
}

impl fmt::Display for GenreLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenreLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dull" => Ok(GenreLabel::Dull),
            "neutral" => Ok(GenreLabel::Neutral),
            "sensitive" => Ok(GenreLabel::Sensitive),
            other => Err(Error::Config(format!(
                "unknown genre {other:?} (expected dull, neutral or sensitive)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_skeleton_has_25_joints_and_two_feet() {
        let s = SkeletonSpec::neutral();
        assert_eq!(s.joint_count(), JOINT_COUNT);
        assert_eq!(MOTION_WIDTH, 300);
        assert_eq!(s.foot_joints(), &[10, 11]);
        assert_eq!(s.joint("head"), Some(15));
    }

    #[test]
    fn rejects_unsorted_or_multi_root_trees() {
        let names = vec!["a".to_string(), "b".to_string()];
        let offs = vec![Vector3::zeros(); 2];
        assert!(SkeletonSpec::new(names.clone(), vec![None, None], offs.clone(), vec![]).is_err());
        assert!(SkeletonSpec::new(names, vec![Some(1), None], offs, vec![]).is_err());
        assert!(SkeletonSpec::parse("a - 0 0 0\nb c 0 0 0\n").is_err());
    }

    #[test]
    fn genre_parses_case_insensitively() {
        assert_eq!("Sensitive".parse::<GenreLabel>().unwrap(), GenreLabel::Sensitive);
        assert!("loud".parse::<GenreLabel>().is_err());
        assert_eq!(GenreLabel::from_index(0).unwrap(), GenreLabel::Dull);
    }
}
