use nalgebra::{Matrix3, Vector3};

use super::SkeletonSpec;
use crate::error::{Error, Result};

/// Flattened kinematic tree used by the batched FK kernels.
#[derive(Clone, Debug)]
pub struct FkTree {
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

impl FkTree {
    pub fn new(parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        if parents.len() != offsets.len() {
            return Err(Error::Contract("parents and offsets differ in length".into()));
        }
        for (j, p) in parents.iter().enumerate() {
            match p {
                Some(p) if *p >= j => {
                    return Err(Error::Contract(format!(
                        "joint {j} has parent {p}; joints must be topologically sorted"
                    )))
                }
                None if j != 0 => {
                    return Err(Error::Contract(format!("joint {j} is a second root")))
                }
                _ => {}
            }
        }
        if parents.first().is_some_and(|p| p.is_some()) {
            return Err(Error::Contract("joint 0 must be the root".into()));
        }
        Ok(Self { parents, offsets })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }
}

impl From<&SkeletonSpec> for FkTree {
    fn from(s: &SkeletonSpec) -> Self {
        Self {
            parents: s.parents().to_vec(),
            offsets: s.offsets().iter().map(|o| [o.x, o.y, o.z]).collect(),
        }
    }
}

fn mat_mul(a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
        }
    }
}

fn mat_vec(a: &[f64], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

fn globals_for_frame(tree: &FkTree, rots: &[f64], globals: &mut [f64]) {
    for (j, parent) in tree.parents.iter().enumerate() {
        let local = &rots[j * 9..(j + 1) * 9];
        match parent {
            None => globals[j * 9..(j + 1) * 9].copy_from_slice(local),
            Some(p) => {
                let (head, tail) = globals.split_at_mut(j * 9);
                mat_mul(&head[p * 9..(p + 1) * 9], local, &mut tail[..9]);
            }
        }
    }
}

/// `root: [N*3]`, `rots: [N*J*9]` row-major local rotations, `out: [N*J*3]`.
pub(crate) fn fk_forward_raw(
    tree: &FkTree,
    root: &[f64],
    rots: &[f64],
    out: &mut [f64],
    mut globals_out: Option<&mut Vec<f64>>,
) {
    let j = tree.len();
    let frames = root.len() / 3;
    let mut globals = vec![0.0; j * 9];
    for f in 0..frames {
        globals_for_frame(tree, &rots[f * j * 9..(f + 1) * j * 9], &mut globals);
        let pos = &mut out[f * j * 3..(f + 1) * j * 3];
        for (k, parent) in tree.parents.iter().enumerate() {
            match parent {
                None => pos[k * 3..k * 3 + 3].copy_from_slice(&root[f * 3..f * 3 + 3]),
                Some(p) => {
                    let d = mat_vec(&globals[p * 9..(p + 1) * 9], &tree.offsets[k]);
                    for i in 0..3 {
                        pos[k * 3 + i] = pos[p * 3 + i] + d[i];
                    }
                }
            }
        }
        if let Some(g) = globals_out.as_deref_mut() {
            g.extend_from_slice(&globals);
        }
    }
}

/// Vector-Jacobian product of [`fk_forward_raw`] for upstream `gpos`.
pub(crate) fn fk_backward_raw(
    tree: &FkTree,
    rots: &[f64],
    gpos: &[f64],
    groot: &mut [f64],
    grots: &mut [f64],
) {
    let j = tree.len();
    let frames = groot.len() / 3;
    let mut globals = vec![0.0; j * 9];
    let mut dg = vec![0.0; j * 9];
    let mut dp = vec![0.0; j * 3];
    for f in 0..frames {
        let local = &rots[f * j * 9..(f + 1) * j * 9];
        globals_for_frame(tree, local, &mut globals);
        dg.iter_mut().for_each(|v| *v = 0.0);
        dp.copy_from_slice(&gpos[f * j * 3..(f + 1) * j * 3]);
        let gr = &mut grots[f * j * 9..(f + 1) * j * 9];
        for k in (0..j).rev() {
            match tree.parents[k] {
                None => {
                    gr[k * 9..(k + 1) * 9].copy_from_slice(&dg[k * 9..(k + 1) * 9]);
                    for i in 0..3 {
                        groot[f * 3 + i] += dp[k * 3 + i];
                    }
                }
                Some(p) => {
                    let o = tree.offsets[k];
                    // position: p_k = p_p + G_p o_k
                    for r in 0..3 {
                        let d = dp[k * 3 + r];
                        dp[p * 3 + r] += d;
                        for c in 0..3 {
                            dg[p * 9 + r * 3 + c] += d * o[c];
                        }
                    }
                    // rotation: G_k = G_p R_k
                    let rk = &local[k * 9..(k + 1) * 9];
                    let gp = &globals[p * 9..(p + 1) * 9];
                    for r in 0..3 {
                        for c in 0..3 {
                            let mut to_parent = 0.0;
                            let mut to_local = 0.0;
                            for m in 0..3 {
                                // dG_p += dG_k R_kᵀ
                                to_parent += dg[k * 9 + r * 3 + m] * rk[c * 3 + m];
                                // dR_k = G_pᵀ dG_k
                                to_local += gp[m * 3 + r] * dg[k * 9 + m * 3 + c];
                            }
                            dg[p * 9 + r * 3 + c] += to_parent;
                            gr[k * 9 + r * 3 + c] = to_local;
                        }
                    }
                }
            }
        }
    }
}

/// Global joint positions for one frame.
pub fn forward_kinematics(
    skel: &SkeletonSpec,
    root_translation: &Vector3<f64>,
    local_rotations: &[Matrix3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    if local_rotations.len() != skel.joint_count() {
        return Err(Error::Contract(format!(
            "expected {} rotations, got {}",
            skel.joint_count(),
            local_rotations.len()
        )));
    }
    let tree = FkTree::from(skel);
    let root = [root_translation.x, root_translation.y, root_translation.z];
    let mut rots = Vec::with_capacity(local_rotations.len() * 9);
    for r in local_rotations {
        for row in 0..3 {
            for col in 0..3 {
                rots.push(r[(row, col)]);
            }
        }
    }
    let mut out = vec![0.0; tree.len() * 3];
    fk_forward_raw(&tree, &root, &rots, &mut out, None);
    Ok(out
        .chunks(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}

/// Global rotation matrices for one frame.
pub fn global_rotations(skel: &SkeletonSpec, local_rotations: &[Matrix3<f64>]) -> Vec<Matrix3<f64>> {
    let mut out: Vec<Matrix3<f64>> = Vec::with_capacity(local_rotations.len());
    for (j, r) in local_rotations.iter().enumerate() {
        let g = match skel.parents()[j] {
            None => *r,
            Some(p) => out[p] * r,
        };
        out.push(g);
    }
    out
}
