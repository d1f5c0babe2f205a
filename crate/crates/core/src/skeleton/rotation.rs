//! 6D rotation parameterization: the first two columns of a rotation matrix,
//! re-orthonormalized with Gram-Schmidt on decode.

use nalgebra::Matrix3;

use crate::error::{Error, Result};

const DEGENERATE_NORM: f64 = 1e-8;

pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scaled(a: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Least-aligned coordinate axis to `b`, used as a fallback second column.
fn fallback_axis(b: &[f64; 3]) -> [f64; 3] {
    let ax = [b[0].abs(), b[1].abs(), b[2].abs()];
    let i = (0..3)
        .min_by(|&i, &j| ax[i].partial_cmp(&ax[j]).unwrap())
        .unwrap();
    let mut e = [0.0; 3];
    e[i] = 1.0;
    e
}

struct Decoded {
    b1: [f64; 3],
    b2: [f64; 3],
    b3: [f64; 3],
    n1: f64,
    nu: f64,
    a2: [f64; 3],
    degenerate: bool,
}

fn decode(a: &[f64; 6]) -> Decoded {
    let mut a1 = [a[0], a[1], a[2]];
    let mut a2 = [a[3], a[4], a[5]];
    let mut degenerate = false;
    let mut n1 = norm(&a1);
    if n1 <= DEGENERATE_NORM {
        a1 = [1.0, 0.0, 0.0];
        n1 = 1.0;
        degenerate = true;
    }
    let b1 = scaled(&a1, 1.0 / n1);
    let mut u = {
        let d = dot(&b1, &a2);
        [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]]
    };
    let mut nu = norm(&u);
    if nu <= DEGENERATE_NORM * norm(&a2).max(1.0) {
        a2 = fallback_axis(&b1);
        let d = dot(&b1, &a2);
        u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
        nu = norm(&u);
        degenerate = true;
    }
    let b2 = scaled(&u, 1.0 / nu);
    let b3 = cross(&b1, &b2);
    Decoded {
        b1,
        b2,
        b3,
        n1,
        nu,
        a2,
        degenerate,
    }
}

/// Row-major rotation matrix with columns `b1, b2, b3`, plus a flag set when
/// the input had to be repaired.
pub(crate) fn sixd_forward_raw(a: &[f64; 6]) -> ([f64; 9], bool) {
    let d = decode(a);
    let mut m = [0.0; 9];
    for r in 0..3 {
        m[r * 3] = d.b1[r];
        m[r * 3 + 1] = d.b2[r];
        m[r * 3 + 2] = d.b3[r];
    }
    (m, d.degenerate)
}

/// Vector-Jacobian product of [`sixd_forward_raw`]. Degenerate inputs get a
/// zero gradient.
pub(crate) fn sixd_backward_raw(a: &[f64; 6], gm: &[f64; 9]) -> [f64; 6] {
    let d = decode(a);
    if d.degenerate {
        return [0.0; 6];
    }
    let g1 = [gm[0], gm[3], gm[6]];
    let g2 = [gm[1], gm[4], gm[7]];
    let g3 = [gm[2], gm[5], gm[8]];
    // b3 = b1 x b2
    let c1 = cross(&d.b2, &g3);
    let c2 = cross(&g3, &d.b1);
    let mut gb1 = [g1[0] + c1[0], g1[1] + c1[1], g1[2] + c1[2]];
    let gb2 = [g2[0] + c2[0], g2[1] + c2[1], g2[2] + c2[2]];
    // b2 = u / |u|
    let p2 = dot(&d.b2, &gb2);
    let gu = [
        (gb2[0] - d.b2[0] * p2) / d.nu,
        (gb2[1] - d.b2[1] * p2) / d.nu,
        (gb2[2] - d.b2[2] * p2) / d.nu,
    ];
    // u = a2 - (b1.a2) b1
    let b1a2 = dot(&d.b1, &d.a2);
    let gub1 = dot(&gu, &d.b1);
    let ga2 = [
        gu[0] - d.b1[0] * gub1,
        gu[1] - d.b1[1] * gub1,
        gu[2] - d.b1[2] * gub1,
    ];
    for i in 0..3 {
        gb1[i] -= b1a2 * gu[i] + gub1 * d.a2[i];
    }
    // b1 = a1 / |a1|
    let p1 = dot(&d.b1, &gb1);
    [
        (gb1[0] - d.b1[0] * p1) / d.n1,
        (gb1[1] - d.b1[1] * p1) / d.n1,
        (gb1[2] - d.b1[2] * p1) / d.n1,
        ga2[0],
        ga2[1],
        ga2[2],
    ]
}

/// Decodes a 6D rotation, rejecting near-zero or parallel column vectors.
pub fn sixd_to_matrix(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = [r6[0], r6[1], r6[2]];
    let a2 = [r6[3], r6[4], r6[5]];
    let (n1, n2) = (norm(&a1), norm(&a2));
    if n1 <= DEGENERATE_NORM || n2 <= DEGENERATE_NORM {
        return Err(Error::DegenerateRotation(format!(
            "column norms {n1:e} and {n2:e}"
        )));
    }
    let c = cross(&a1, &a2);
    if norm(&c) / (n1 * n2) <= DEGENERATE_NORM {
        return Err(Error::DegenerateRotation("columns are parallel".into()));
    }
    let (m, _) = sixd_forward_raw(r6);
    Ok(Matrix3::from_row_slice(&m))
}

/// Largest entry of `|RᵀR - I|`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// First two columns of `r`.
pub fn matrix_to_sixd(r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let err = orthonormality_error(r);
    if err > 1e-6 || r.determinant() < 0.0 {
        return Err(Error::Contract(format!(
            "matrix is not a proper rotation (orthonormality error {err:e}, det {:.6})",
            r.determinant()
        )));
    }
    Ok([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic interpolation between two rotations (`w = 0` gives `a`).
pub fn interpolate_rotation(a: &Matrix3<f64>, b: &Matrix3<f64>, w: f64) -> Matrix3<f64> {
    let ra = nalgebra::Rotation3::from_matrix_unchecked(*a);
    let rb = nalgebra::Rotation3::from_matrix_unchecked(*b);
    match ra.try_slerp(&rb, w, 1e-12) {
        Some(r) => *r.matrix(),
        // antipodal rotations: any geodesic works, go through the identity axis of a
        None => {
            if w < 0.5 {
                *a
            } else {
                *b
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_encodes_and_decodes() {
        let r6 = matrix_to_sixd(&Matrix3::identity()).unwrap();
        assert_eq!(r6, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let m = sixd_to_matrix(&r6).unwrap();
        assert_abs_diff_eq!(m, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = sixd_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(m, rot_z(std::f64::consts::FRAC_PI_2), epsilon = 1e-12);
    }

    #[test]
    fn decode_is_scale_invariant() {
        let r6 = [0.3, -0.2, 0.9, 0.1, 0.8, 0.05];
        let scaled: [f64; 6] = r6.map(|v| v * 5.0);
        let a = sixd_to_matrix(&r6).unwrap();
        let b = sixd_to_matrix(&scaled).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(
            sixd_to_matrix(&[0.0; 6]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            sixd_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        let (m, flagged) = sixd_forward_raw(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(flagged);
        assert!(orthonormality_error(&Matrix3::from_row_slice(&m)) < 1e-12);
    }

    #[test]
    fn non_orthonormal_matrix_is_rejected() {
        let m = Matrix3::identity() * 1.1;
        assert!(matches!(matrix_to_sixd(&m), Err(Error::Contract(_))));
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matrix_to_sixd(&reflection).is_err());
    }

    #[test]
    fn interpolation_hits_endpoints_and_midpoint() {
        let a = rot_z(0.2);
        let b = rot_z(1.0);
        assert_abs_diff_eq!(interpolate_rotation(&a, &b, 0.0), a, epsilon = 1e-12);
        assert_abs_diff_eq!(interpolate_rotation(&a, &b, 1.0), b, epsilon = 1e-12);
        assert_abs_diff_eq!(interpolate_rotation(&a, &b, 0.5), rot_z(0.6), epsilon = 1e-12);
    }
}
