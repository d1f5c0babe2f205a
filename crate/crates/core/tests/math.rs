use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use spatial_motion::math::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, AdamWConfig, OptimizerState, ParamStore,
    Tape, Tensor,
};
use spatial_motion::skeleton::kinematics::FkTree;
use spatial_motion::skeleton::{forward_kinematics, SkeletonSpec};

fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

#[test]
fn matmul_matches_nested_loops_and_its_gradients() {
    let x = matrix(3, 4, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
    let w = matrix(4, 2, |i, j| (i * 2 + j) as f64 * 0.11 - 0.4);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
    let y = tape.matmul(xv, wv).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();

    let yt = tape.value(y);
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| x.data()[i * 4 + k] * w.data()[k * 2 + j]).sum();
            assert_abs_diff_eq!(yt.data()[i * 2 + j], want, epsilon = 1e-12);
        }
    }
    // d(sum XW)/dX[i,k] = sum_j W[k,j]; d/dW[k,j] = sum_i X[i,k]
    let gx = grads.get(xv);
    let gw = grads.get(wv);
    for i in 0..3 {
        for k in 0..4 {
            assert_abs_diff_eq!(gx.data()[i * 4 + k], w.data()[k * 2] + w.data()[k * 2 + 1], epsilon = 1e-12);
        }
    }
    for k in 0..4 {
        let col: f64 = (0..3).map(|i| x.data()[i * 4 + k]).sum();
        for j in 0..2 {
            assert_abs_diff_eq!(gw.data()[k * 2 + j], col, epsilon = 1e-12);
        }
    }
}

#[test]
fn untracked_variables_get_zero_gradients() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::full(&[2], 1.5));
    let b = tape.param(Tensor::full(&[3], 2.0));
    let c = tape.constant(Tensor::full(&[2], 4.0));
    let ac = tape.mul(a, c).unwrap();
    let loss = tape.sum(ac).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(b).data(), &[0.0; 3]);
    assert_eq!(grads.get(c).data(), &[0.0; 2]);
    assert_eq!(grads.get(a).data(), &[4.0; 2]);
}

#[test]
fn backward_requires_a_scalar() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[2], 1.0));
    assert!(tape.backward(a).is_err());
}

#[test]
fn adamw_first_step_moves_each_weight_by_lr() {
    // With bias correction the first update is lr·g/(|g| + eps) = ±lr.
    let mut params = ParamStore::new();
    params.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let config = AdamWConfig {
        lr: 0.01,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&params, config);
    let g = Tensor::new(&[3], vec![4.0, -0.25, 1e-3]).unwrap();
    opt.step(&mut params, &[g], &[true]).unwrap();
    let w = params.by_name("w").unwrap().data();
    assert_abs_diff_eq!(w[0], 0.99, epsilon = 1e-9);
    assert_abs_diff_eq!(w[1], -1.99, epsilon = 1e-9);
    assert_abs_diff_eq!(w[2], 0.49, epsilon = 1e-6);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_skips_frozen_parameters() {
    let mut params = ParamStore::new();
    params.add("a", Tensor::full(&[2], 1.0));
    params.add("b", Tensor::full(&[2], 1.0));
    let mut opt = OptimizerState::new(&params, AdamWConfig::default());
    let g = Tensor::full(&[2], 1.0);
    opt.step(&mut params, &[g.clone(), g], &[true, false]).unwrap();
    assert!(params.by_name("a").unwrap().data()[0] < 1.0);
    assert_eq!(params.by_name("b").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn checkpoint_file_roundtrip_and_corruption() {
    let mut params = ParamStore::new();
    params.add("layer.w", matrix(2, 3, |i, j| i as f64 - j as f64 * 1e-17 + 0.1));
    params.add("layer.b", Tensor::new(&[3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &params).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let a: Vec<_> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let b: Vec<_> = back.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(a, b);

    let bytes = encode_checkpoint(&params);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(decode_checkpoint(&bad).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let v = Vector3::from(axis);
    if v.norm() < 1e-6 {
        return Matrix3::identity();
    }
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(v), angle).matrix()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3, 4], values).unwrap());
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_fk_matches_single_frame_fk(
        root in proptest::array::uniform3(-2.0f64..2.0),
        axes in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 25),
        angles in proptest::collection::vec(-3.0f64..3.0, 25),
    ) {
        let skel = SkeletonSpec::neutral();
        let rots: Vec<Matrix3<f64>> = axes.iter().zip(&angles).map(|(a, &t)| rotation(*a, t)).collect();
        let want = forward_kinematics(&skel, &Vector3::from(root), &rots).unwrap();

        let tree = FkTree::new(
            skel.parents().to_vec(),
            skel.offsets().iter().map(|o| [o.x, o.y, o.z]).collect(),
        ).unwrap();
        let flat: Vec<f64> = rots.iter().flat_map(|m| (0..9).map(move |k| m[(k / 3, k % 3)])).collect();
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::new(&[1, 3], root.to_vec()).unwrap());
        let q = tape.leaf(Tensor::new(&[1, 25, 9], flat).unwrap());
        let p = tape.forward_kinematics(r, q, Arc::new(tree)).unwrap();
        for (j, w) in want.iter().enumerate() {
            for c in 0..3 {
                prop_assert!((tape.value(p).data()[j * 3 + c] - w[c]).abs() < 1e-12);
            }
        }
    }
}
