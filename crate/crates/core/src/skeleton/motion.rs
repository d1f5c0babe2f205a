use nalgebra::{Matrix3, Vector3};

use super::rotation::{orthonormality_error, sixd_to_matrix};
use crate::error::{Error, Result};
use crate::math::Tensor;

/// A motion clip: global positions, local 6D rotations and velocities for
/// `joints` joints over `frames` frames, all row-major per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub joints: usize,
    pub frames: usize,
    /// `frames × joints × 3`, meters.
    pub positions: Vec<f64>,
    /// `frames × joints × 6`.
    pub rotations: Vec<f64>,
    /// `frames × joints × 3`, meters per second.
    pub velocities: Vec<f64>,
}

impl MotionSequence {
    pub fn new(
        fps: f64,
        joints: usize,
        positions: Vec<f64>,
        rotations: Vec<f64>,
        velocities: Vec<f64>,
    ) -> Result<Self> {
        if joints == 0 || !(fps > 0.0) {
            return Err(Error::Layout(format!("joints {joints}, fps {fps}")));
        }
        let frames = positions.len() / (joints * 3);
        if positions.len() != frames * joints * 3
            || rotations.len() != frames * joints * 6
            || velocities.len() != frames * joints * 3
        {
            return Err(Error::Layout(format!(
                "inconsistent lengths p={} r={} v={} for {joints} joints",
                positions.len(),
                rotations.len(),
                velocities.len()
            )));
        }
        Ok(Self {
            fps,
            joints,
            frames,
            positions,
            rotations,
            velocities,
        })
    }

    /// The first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames {
            return Err(Error::Layout(format!("cannot crop {} frames to {frames}", self.frames)));
        }
        let j = self.joints;
        Self::new(
            self.fps,
            j,
            self.positions[..frames * j * 3].to_vec(),
            self.rotations[..frames * j * 6].to_vec(),
            self.velocities[..frames * j * 3].to_vec(),
        )
    }

    pub fn zeros(fps: f64, joints: usize, frames: usize) -> Self {
        Self {
            fps,
            joints,
            frames,
            positions: vec![0.0; frames * joints * 3],
            rotations: vec![0.0; frames * joints * 6],
            velocities: vec![0.0; frames * joints * 3],
        }
    }

    /// Builds a sequence from per-frame local rotation matrices and global
    /// positions; velocities are derived from positions.
    pub fn from_parts(
        fps: f64,
        positions: &[Vec<Vector3<f64>>],
        rotations: &[Vec<Matrix3<f64>>],
    ) -> Result<Self> {
        let frames = positions.len();
        if frames != rotations.len() || frames == 0 {
            return Err(Error::Layout("positions/rotations frame count mismatch".into()));
        }
        let joints = positions[0].len();
        let mut p = Vec::with_capacity(frames * joints * 3);
        let mut r = Vec::with_capacity(frames * joints * 6);
        for (pf, rf) in positions.iter().zip(rotations) {
            if pf.len() != joints || rf.len() != joints {
                return Err(Error::Layout("ragged joint count".into()));
            }
            for v in pf {
                p.extend_from_slice(&[v.x, v.y, v.z]);
            }
            for m in rf {
                r.extend_from_slice(&[m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]);
            }
        }
        let v = compute_velocities(&p, joints, fps)?;
        Self::new(fps, joints, p, r, v)
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn position(&self, frame: usize, joint: usize) -> Vector3<f64> {
        let i = (frame * self.joints + joint) * 3;
        Vector3::new(self.positions[i], self.positions[i + 1], self.positions[i + 2])
    }

    pub fn set_position(&mut self, frame: usize, joint: usize, v: &Vector3<f64>) {
        let i = (frame * self.joints + joint) * 3;
        self.positions[i..i + 3].copy_from_slice(v.as_slice());
    }

    pub fn velocity(&self, frame: usize, joint: usize) -> Vector3<f64> {
        let i = (frame * self.joints + joint) * 3;
        Vector3::new(self.velocities[i], self.velocities[i + 1], self.velocities[i + 2])
    }

    pub fn sixd(&self, frame: usize, joint: usize) -> [f64; 6] {
        let i = (frame * self.joints + joint) * 6;
        self.rotations[i..i + 6].try_into().unwrap()
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> Result<Matrix3<f64>> {
        sixd_to_matrix(&self.sixd(frame, joint))
    }

    pub fn set_rotation(&mut self, frame: usize, joint: usize, m: &Matrix3<f64>) {
        let i = (frame * self.joints + joint) * 6;
        self.rotations[i..i + 6]
            .copy_from_slice(&[m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]);
    }

    /// Root joint trajectory, one point per frame.
    pub fn root_track(&self) -> Vec<Vector3<f64>> {
        (0..self.frames).map(|f| self.position(f, 0)).collect()
    }

    /// Checks every 6D block decodes to an orthonormal matrix within `tol`.
    pub fn validate_rotations(&self, tol: f64) -> Result<()> {
        for f in 0..self.frames {
            for j in 0..self.joints {
                let m = self.rotation(f, j)?;
                let err = orthonormality_error(&m);
                if err > tol {
                    return Err(Error::Contract(format!(
                        "frame {f} joint {j}: orthonormality error {err:e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replaces velocities with forward differences of the positions.
    pub fn recompute_velocities(&mut self) -> Result<()> {
        self.velocities = compute_velocities(&self.positions, self.joints, self.fps)?;
        Ok(())
    }
}

/// Forward-difference velocities scaled by `fps`; the last frame repeats the
/// second-to-last value. `positions` is `frames × joints × 3`.
pub fn compute_velocities(positions: &[f64], joints: usize, fps: f64) -> Result<Vec<f64>> {
    let width = joints * 3;
    let frames = positions.len() / width.max(1);
    if frames < 2 {
        return Err(Error::TooShort { need: 2, got: frames });
    }
    let mut v = vec![0.0; positions.len()];
    for t in 0..frames - 1 {
        for k in 0..width {
            v[t * width + k] = (positions[(t + 1) * width + k] - positions[t * width + k]) * fps;
        }
    }
    let (head, tail) = v.split_at_mut((frames - 1) * width);
    tail.copy_from_slice(&head[(frames - 2) * width..]);
    Ok(v)
}

/// Packs a sequence into a `[frames, joints*12]` tensor laid out per frame as
/// `[p | r | v]`.
pub fn assemble_vector(m: &MotionSequence) -> Tensor {
    let j = m.joints;
    let width = j * 12;
    let mut data = Vec::with_capacity(m.frames * width);
    for t in 0..m.frames {
        data.extend_from_slice(&m.positions[t * j * 3..(t + 1) * j * 3]);
        data.extend_from_slice(&m.rotations[t * j * 6..(t + 1) * j * 6]);
        data.extend_from_slice(&m.velocities[t * j * 3..(t + 1) * j * 3]);
    }
    Tensor::new(&[m.frames, width], data).expect("assembled width")
}

/// Inverse of [`assemble_vector`].
pub fn disassemble_vector(x: &Tensor, joints: usize, fps: f64) -> Result<MotionSequence> {
    let shape = x.shape();
    let width = joints * 12;
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::Layout(format!(
            "expected [frames, {width}] for {joints} joints, got {shape:?}"
        )));
    }
    let frames = shape[0];
    let mut p = Vec::with_capacity(frames * joints * 3);
    let mut r = Vec::with_capacity(frames * joints * 6);
    let mut v = Vec::with_capacity(frames * joints * 3);
    for row in x.data().chunks(width) {
        p.extend_from_slice(&row[..joints * 3]);
        r.extend_from_slice(&row[joints * 3..joints * 9]);
        v.extend_from_slice(&row[joints * 9..]);
    }
    MotionSequence::new(fps, joints, p, r, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn velocities_of_constant_positions_are_zero() {
        let p = vec![0.5; 4 * 2 * 3];
        let v = compute_velocities(&p, 2, 30.0).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_motion_gives_three_meters_per_second() {
        let p: Vec<f64> = (0..5).flat_map(|t| [0.1 * t as f64, 0.0, 0.0]).collect();
        let v = compute_velocities(&p, 1, 30.0).unwrap();
        for t in 0..5 {
            assert!((v[t * 3] - 3.0).abs() < 1e-12);
        }
        assert_eq!(v[12..15], v[9..12]);
    }

    #[test]
    fn single_frame_is_too_short() {
        assert!(matches!(
            compute_velocities(&[0.0; 3], 1, 30.0),
            Err(Error::TooShort { need: 2, got: 1 })
        ));
    }

    #[test]
    fn zero_motion_assembles_to_zero_width_300() {
        let m = MotionSequence::zeros(30.0, 25, 4);
        let x = assemble_vector(&m);
        assert_eq!(x.shape(), &[4, 300]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_a_layout_error() {
        let x = Tensor::zeros(&[3, 299]);
        assert!(matches!(disassemble_vector(&x, 25, 30.0), Err(Error::Layout(_))));
    }

    proptest! {
        #[test]
        fn assemble_roundtrip_is_bit_exact(
            frames in 1usize..6,
            seed in proptest::collection::vec(-1e3f64..1e3, 300 * 5),
        ) {
            let n3 = frames * 75;
            let m = MotionSequence::new(
                30.0,
                25,
                seed[..n3].to_vec(),
                seed[..frames * 150].to_vec(),
                seed[seed.len() - n3..].to_vec(),
            ).unwrap();
            let back = disassemble_vector(&assemble_vector(&m), 25, 30.0).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
