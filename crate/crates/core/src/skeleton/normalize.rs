use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::motion::MotionSequence;
use super::rotation::rot_z;
use crate::error::{Error, Result};

/// Sound-source positions in the character's per-frame local frame
/// (heading frame: forward is -y, up is +z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslTrack {
    pub positions: Vec<[f64; 3]>,
}

impl SslTrack {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }
}

/// Yaw angle of the ground-plane projection of the rotation's forward (-y)
/// axis, measured so that yaw 0 faces -y. `None` when the forward axis is
/// vertical.
pub fn facing_yaw(root_rotation: &Matrix3<f64>) -> Option<f64> {
    let f = root_rotation * Vector3::new(0.0, -1.0, 0.0);
    if f.x.hypot(f.y) < 1e-9 {
        return None;
    }
    Some(f.x.atan2(-f.y))
}

/// Rotates and translates a sequence so that frame 0 has its root above the
/// ground-plane origin and faces -y, and re-expresses world-frame sound
/// source positions in the character's per-frame heading frame.
///
/// Height is preserved so the ground stays at z = 0.
pub fn normalize_sequence(m: &MotionSequence, ssl_world: &[[f64; 3]]) -> Result<(MotionSequence, SslTrack)> {
    if ssl_world.len() != m.frames {
        return Err(Error::Contract(format!(
            "SSL track has {} frames, motion has {}",
            ssl_world.len(),
            m.frames
        )));
    }
    let root0 = m.rotation(0, 0)?;
    let yaw0 = facing_yaw(&root0)
        .ok_or_else(|| Error::Contract("frame-0 root faces straight up or down".into()))?;
    let q = rot_z(-yaw0);
    let p0 = m.position(0, 0);
    let origin = Vector3::new(p0.x, p0.y, 0.0);

    let mut out = m.clone();
    for t in 0..m.frames {
        for j in 0..m.joints {
            let p = q * (m.position(t, j) - origin);
            out.set_position(t, j, &p);
            let i = (t * m.joints + j) * 3;
            let v = q * Vector3::new(m.velocities[i], m.velocities[i + 1], m.velocities[i + 2]);
            out.velocities[i..i + 3].copy_from_slice(v.as_slice());
        }
        let root = q * m.rotation(t, 0)?;
        out.set_rotation(t, 0, &root);
    }

    let mut local = Vec::with_capacity(m.frames);
    let mut last_yaw = 0.0;
    for (t, s) in ssl_world.iter().enumerate() {
        let yaw = facing_yaw(&out.rotation(t, 0)?).unwrap_or(last_yaw);
        last_yaw = yaw;
        let s_norm = q * (Vector3::new(s[0], s[1], s[2]) - origin);
        let rel = rot_z(-yaw) * (s_norm - out.position(t, 0));
        local.push([rel.x, rel.y, rel.z]);
    }
    Ok((out, SslTrack { positions: local }))
}
