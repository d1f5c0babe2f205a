use serde::{Deserialize, Serialize};

use super::motion::compute_velocities;
use crate::error::Result;

/// A foot is planted when both its speed and its height are below threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// m/s
    pub speed: f64,
    /// m above the z = 0 ground plane
    pub height: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self {
            speed: 0.1,
            height: 0.06,
        }
    }
}

/// Per-foot contact masks (`result[foot][frame]`) for global `positions`
/// laid out `frames × joints × 3`.
pub fn detect_foot_contacts(
    positions: &[f64],
    joints: usize,
    fps: f64,
    foot_joints: &[usize],
    thresholds: ContactThresholds,
) -> Result<Vec<Vec<bool>>> {
    let frames = positions.len() / (joints * 3);
    let mut masks = Vec::with_capacity(foot_joints.len());
    for &foot in foot_joints {
        let track: Vec<f64> = (0..frames)
            .flat_map(|t| {
                let i = (t * joints + foot) * 3;
                positions[i..i + 3].to_vec()
            })
            .collect();
        let vel = compute_velocities(&track, 1, fps)?;
        let mask = (0..frames)
            .map(|t| {
                let v = &vel[t * 3..t * 3 + 3];
                let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                speed < thresholds.speed && track[t * 3 + 2] < thresholds.height
            })
            .collect();
        masks.push(mask);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_feet(frames: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Vec<f64> {
        (0..frames)
            .flat_map(|t| (0..2).flat_map(|k| f(t, k)).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn stationary_grounded_feet_are_in_contact() {
        let p = two_feet(10, |_, k| [k as f64 * 0.2, 0.0, 0.02]);
        let m = detect_foot_contacts(&p, 2, 30.0, &[0, 1], ContactThresholds::default()).unwrap();
        assert!(m.iter().all(|foot| foot.iter().all(|&c| c)));
    }

    #[test]
    fn fast_feet_are_never_in_contact() {
        let p = two_feet(10, |t, k| [k as f64 * 0.2, t as f64 * 0.1, 0.02]);
        let m = detect_foot_contacts(&p, 2, 30.0, &[0, 1], ContactThresholds::default()).unwrap();
        assert!(m.iter().all(|foot| foot.iter().all(|&c| !c)));
    }

    #[test]
    fn raised_still_feet_are_not_in_contact() {
        let p = two_feet(5, |_, _| [0.0, 0.0, 0.3]);
        let m = detect_foot_contacts(&p, 2, 30.0, &[0, 1], ContactThresholds::default()).unwrap();
        assert!(m.iter().all(|foot| foot.iter().all(|&c| !c)));
    }
}
