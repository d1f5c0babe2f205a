use approx::assert_abs_diff_eq;
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use proptest::prelude::*;
use spatial_motion::skeleton::io::{export_csv, read_motion_file, write_motion_file, BlockEncoding, MotionFile};
use spatial_motion::skeleton::rotation::{orthonormality_error, rot_z};
use spatial_motion::skeleton::{
    assemble_vector, disassemble_vector, facing_yaw, forward_kinematics, matrix_to_sixd, normalize_sequence,
    sixd_to_matrix, GenreLabel, MotionSequence, SkeletonSpec, JOINT_COUNT, MOTION_WIDTH,
};

fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let v = Vector3::from(axis);
    if v.norm() < 1e-6 {
        return Matrix3::identity();
    }
    *Rotation3::from_axis_angle(&Unit::new_normalize(v), angle).matrix()
}

/// A short walking-in-place sequence whose root heads along `yaw` from `start`.
fn sequence(yaw: f64, start: [f64; 2], frames: usize) -> MotionSequence {
    let skel = SkeletonSpec::neutral();
    let mut positions = Vec::new();
    let mut rotations = Vec::new();
    for t in 0..frames {
        let phase = t as f64 * 0.3;
        let mut rots = vec![Matrix3::identity(); JOINT_COUNT];
        rots[0] = rot_z(yaw);
        for (j, r) in rots.iter_mut().enumerate().skip(1) {
            *r = rotation([1.0, 0.3 * j as f64, 0.1], 0.2 * (phase + j as f64).sin());
        }
        let fwd = rot_z(yaw) * Vector3::new(0.0, -1.0, 0.0);
        let root = Vector3::new(start[0], start[1], 0.95) + fwd * (0.05 * t as f64);
        positions.push(forward_kinematics(&skel, &root, &rots).unwrap());
        rotations.push(rots);
    }
    MotionSequence::from_parts(30.0, &positions, &rotations).unwrap()
}

#[test]
fn neutral_skeleton_shape() {
    let skel = SkeletonSpec::neutral();
    assert_eq!(skel.joint_count(), JOINT_COUNT);
    assert_eq!(skel.root(), 0);
    assert_eq!(skel.foot_joints().len(), 2);
    assert_eq!(MOTION_WIDTH, 300);
    for (j, p) in skel.parents().iter().enumerate().skip(1) {
        assert!(p.unwrap() < j);
    }
}

#[test]
fn assemble_roundtrip() {
    let m = sequence(0.4, [1.0, -2.0], 12);
    let x = assemble_vector(&m);
    assert_eq!(x.shape(), &[12, MOTION_WIDTH]);
    assert_eq!(disassemble_vector(&x, JOINT_COUNT, 30.0).unwrap(), m);
    assert!(disassemble_vector(&x, JOINT_COUNT - 1, 30.0).is_err());
}

#[test]
fn velocities_are_forward_differences_of_positions() {
    let m = sequence(0.0, [0.0, 0.0], 6);
    // The root moves 0.05 m per frame along -y at 30 fps.
    for t in 0..5 {
        let v = m.velocity(t, 0);
        assert_abs_diff_eq!(v.y, -1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-9);
    }
}

#[test]
fn normalization_puts_the_character_at_the_origin_facing_minus_y() {
    let m = sequence(1.1, [3.0, -4.0], 10);
    let ssl = vec![[5.0, 5.0, 1.2]; 10];
    let (n, track) = normalize_sequence(&m, &ssl).unwrap();
    let root0 = n.position(0, 0);
    assert_abs_diff_eq!(root0.x, 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(root0.y, 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(root0.z, m.position(0, 0).z, epsilon = 1e-12);
    assert_abs_diff_eq!(facing_yaw(&n.rotation(0, 0).unwrap()).unwrap(), 0.0, epsilon = 1e-9);
    // SSL is root-relative, so its norm is the world source-to-root distance.
    for t in 0..10 {
        let d_world = (Vector3::from(ssl[t]) - m.position(t, 0)).norm();
        assert_abs_diff_eq!(Vector3::from(track.positions[t]).norm(), d_world, epsilon = 1e-9);
    }
    assert!(normalize_sequence(&m, &ssl[..9]).is_err());
}

#[test]
fn motion_file_roundtrips_in_both_encodings() {
    let m = sequence(-0.7, [0.5, 0.5], 5);
    let file = MotionFile {
        motion: m.clone(),
        joint_names: SkeletonSpec::neutral().names().to_vec(),
        genre: Some(GenreLabel::Sensitive),
        ssl: vec![[1.0, 2.0, 3.0]; 5],
    };
    let dir = tempfile::tempdir().unwrap();
    for (name, enc) in [("a.motion.json", BlockEncoding::Base64), ("b.motion.json", BlockEncoding::Sibling)] {
        let path = dir.path().join(name);
        write_motion_file(&path, &file, enc).unwrap();
        assert_eq!(read_motion_file(&path).unwrap(), file);
    }
    let mut csv = Vec::new();
    export_csv(&mut csv, &m, &file.joint_names).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn corrupt_motion_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.motion.json");
    std::fs::write(&path, "{\"format\": \"spatial-motion\"}").unwrap();
    assert!(read_motion_file(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sixd_roundtrip(axis in proptest::array::uniform3(-1.0f64..1.0), angle in -3.1f64..3.1) {
        let r = rotation(axis, angle);
        let back = sixd_to_matrix(&matrix_to_sixd(&r).unwrap()).unwrap();
        prop_assert!((back - r).abs().max() < 1e-12);
    }

    #[test]
    fn sixd_to_matrix_is_orthonormal(v in proptest::array::uniform6(-3.0f64..3.0)) {
        let a = Vector3::new(v[0], v[1], v[2]);
        let b = Vector3::new(v[3], v[4], v[5]);
        prop_assume!(a.norm() > 1e-3 && a.cross(&b).norm() > 1e-3);
        let m = sixd_to_matrix(&v).unwrap();
        prop_assert!(orthonormality_error(&m) < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fk_preserves_bone_lengths(
        root in proptest::array::uniform3(-2.0f64..2.0),
        axes in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 25),
        angles in proptest::collection::vec(-3.0f64..3.0, 25),
    ) {
        let skel = SkeletonSpec::neutral();
        let rots: Vec<Matrix3<f64>> = axes.iter().zip(&angles).map(|(a, &t)| rotation(*a, t)).collect();
        let p = forward_kinematics(&skel, &Vector3::from(root), &rots).unwrap();
        prop_assert!((p[0] - Vector3::from(root)).norm() < 1e-12);
        for (j, parent) in skel.parents().iter().enumerate().skip(1) {
            let bone = (p[j] - p[parent.unwrap()]).norm();
            prop_assert!((bone - skel.offsets()[j].norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_ignores_starting_pose(yaw in -3.1f64..3.1, x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let a = sequence(0.3, [0.0, 0.0], 6);
        let b = sequence(0.3 + yaw, [x, y], 6);
        let to_b = |p: [f64; 3]| {
            let v = rot_z(yaw) * Vector3::from(p);
            [v.x + x, v.y + y, v.z]
        };
        let ssl_a: Vec<[f64; 3]> = (0..6).map(|t| [1.0, -2.0 + t as f64 * 0.1, 1.2]).collect();
        let ssl_b: Vec<[f64; 3]> = ssl_a.iter().map(|&p| to_b(p)).collect();
        let (na, ta) = normalize_sequence(&a, &ssl_a).unwrap();
        let (nb, tb) = normalize_sequence(&b, &ssl_b).unwrap();
        for (u, v) in na.positions.iter().zip(&nb.positions) {
            prop_assert!((u - v).abs() < 1e-9);
        }
        for (u, v) in ta.positions.iter().zip(&tb.positions) {
            for c in 0..3 {
                prop_assert!((u[c] - v[c]).abs() < 1e-9);
            }
        }
    }
}
