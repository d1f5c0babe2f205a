use crate::error::{Error, Result};
use crate::skeleton::rotation::{interpolate_rotation, matrix_to_sixd};
use crate::skeleton::{compute_velocities, MotionSequence};

/// Frame count when resampling `frames` frames from `from` to `to` fps on a
/// grid starting at the first frame and never extrapolating past the last.
pub fn resampled_frames(frames: usize, from: f64, to: f64) -> usize {
    if frames == 0 {
        return 0;
    }
    ((frames - 1) as f64 * to / from + 1e-9).floor() as usize + 1
}

fn grid(frames: usize, from: f64, to: f64) -> impl Iterator<Item = (usize, usize, f64)> {
    (0..resampled_frames(frames, from, to)).map(move |k| {
        let s = k as f64 * from / to;
        let i = (s.floor() as usize).min(frames - 1);
        let j = (i + 1).min(frames - 1);
        (i, j, s - i as f64)
    })
}

/// Resamples to `fps`: positions linearly, rotations along the geodesic per
/// joint, velocities recomputed from the resampled positions. A sequence
/// already at `fps` is returned unchanged.
pub fn resample_motion(m: &MotionSequence, fps: f64) -> Result<MotionSequence> {
    if !(fps > 0.0) || !(m.fps > 0.0) {
        return Err(Error::Config(format!("cannot resample {} fps to {fps} fps", m.fps)));
    }
    if (m.fps - fps).abs() < 1e-9 {
        return Ok(m.clone());
    }
    let joints = m.joints;
    let mut positions = Vec::new();
    let mut rotations = Vec::new();
    for (i, j, w) in grid(m.frames, m.fps, fps) {
        for k in 0..joints {
            let (a, b) = (m.position(i, k), m.position(j, k));
            positions.extend_from_slice((a + (b - a) * w).as_slice());
            let r = interpolate_rotation(&m.rotation(i, k)?, &m.rotation(j, k)?, w);
            rotations.extend_from_slice(&matrix_to_sixd(&r)?);
        }
    }
    let velocities = compute_velocities(&positions, joints, fps)?;
    MotionSequence::new(fps, joints, positions, rotations, velocities)
}

/// Linear resampling of a per-frame 3D track on the same grid as
/// [`resample_motion`].
pub fn resample_track(track: &[[f64; 3]], from: f64, to: f64) -> Vec<[f64; 3]> {
    if track.is_empty() || (from - to).abs() < 1e-9 {
        return track.to_vec();
    }
    grid(track.len(), from, to)
        .map(|(i, j, w)| std::array::from_fn(|c| track[i][c] + w * (track[j][c] - track[i][c])))
        .collect()
}
