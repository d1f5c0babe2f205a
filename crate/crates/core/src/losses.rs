//! Training objectives on batched motion vectors `[B, T, 300]` laid out per
//! frame as positions (75) | 6D rotations (150) | velocities (75).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};
use crate::skeleton::{FkTree, JOINT_COUNT, MOTION_WIDTH};

const P_START: usize = 0;
const R_START: usize = JOINT_COUNT * 3;
const V_START: usize = JOINT_COUNT * 9;
/// Keeps the foot speed magnitude differentiable at rest.
const SPEED_EPS: f64 = 1e-12;
pub const BUMPED_WEIGHT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub geo: f64,
    pub foot: f64,
    pub traj: f64,
    pub rot: f64,
    /// Epoch from which `traj` and `rot` become [`BUMPED_WEIGHT`]; `None`
    /// means `floor(5/6 · total epochs)`.
    pub bump_epoch: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            data: 1.0,
            geo: 1.0,
            foot: 1.0,
            traj: 1.0,
            rot: 1.0,
            bump_epoch: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("data", self.data),
            ("geo", self.geo),
            ("foot", self.foot),
            ("traj", self.traj),
            ("rot", self.rot),
        ]
    }

    pub fn bump_epoch_for(&self, total_epochs: usize) -> usize {
        self.bump_epoch.unwrap_or(5 * total_epochs / 6)
    }

    /// Weights in force at `epoch` (0-based) of a `total_epochs` run.
    pub fn at_epoch(&self, epoch: usize, total_epochs: usize) -> Result<Self> {
        self.validate()?;
        let mut w = *self;
        if epoch >= self.bump_epoch_for(total_epochs) {
            w.traj = BUMPED_WEIGHT;
            w.rot = BUMPED_WEIGHT;
        }
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FootLossMode {
    /// `(|v̂| − |v|)²` on ground-truth contact frames.
    #[default]
    MatchSpeed,
    /// `|v̂|²` on ground-truth contact frames.
    ZeroVelocity,
}

/// The five loss terms, either as tape handles or as plain values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<V> {
    pub data: V,
    pub geo: V,
    pub foot: V,
    pub traj: V,
    pub rot: V,
}

impl<V: Copy> LossTerms<V> {
    pub fn named(&self) -> [(&'static str, V); 5] {
        [
            ("data", self.data),
            ("geo", self.geo),
            ("foot", self.foot),
            ("traj", self.traj),
            ("rot", self.rot),
        ]
    }
}

impl LossTerms<Var> {
    pub fn values(&self, tape: &Tape) -> LossTerms<f64> {
        let v = |x: Var| tape.value(x).data()[0];
        LossTerms {
            data: v(self.data),
            geo: v(self.geo),
            foot: v(self.foot),
            traj: v(self.traj),
            rot: v(self.rot),
        }
    }
}

impl LossTerms<f64> {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.named().iter().zip(w.named()).map(|((_, v), (_, l))| v * l).sum()
    }

    /// First non-finite term, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (term, value) in self.named() {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
        }
        Ok(())
    }
}

/// What the geometric and foot terms need besides the two motions.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub tree: Arc<FkTree>,
    pub foot_joints: Vec<usize>,
    /// `[B, T, feet]` ground-truth contact mask (1 = planted).
    pub contacts: Tensor,
    pub foot_mode: FootLossMode,
}

fn as_batch(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [t, w] if w == MOTION_WIDTH => tape.reshape(x, &[1, t, w]),
        [_, _, w] if w == MOTION_WIDTH => Ok(x),
        ref s => Err(Error::shape("loss", format!("expected [B, T, {MOTION_WIDTH}], got {s:?}"))),
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} vs target {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Forward difference along the frame axis (axis 1).
fn frame_delta(tape: &mut Tape, x: Var) -> Result<Option<Var>> {
    let t = tape.shape(x)[1];
    if t < 2 {
        return Ok(None);
    }
    let next = tape.slice(x, 1, 1, t - 1)?;
    let cur = tape.slice(x, 1, 0, t - 1)?;
    Ok(Some(tape.sub(next, cur)?))
}

/// `MSE(a, b) + MSE(δa, δb)`.
fn mse_with_delta(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let base = tape.mse(a, b)?;
    match (frame_delta(tape, a)?, frame_delta(tape, b)?) {
        (Some(da), Some(db)) => {
            let d = tape.mse(da, db)?;
            tape.add(base, d)
        }
        _ => Ok(base),
    }
}

/// Mean over all points of the squared distance between `[..., 3]` tracks.
fn mean_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let per_point = tape.sum_last(sq)?;
    tape.mean(per_point)
}

/// Point-distance analogue of [`mse_with_delta`] for `[B, T, K, 3]` tracks.
fn point_loss_with_delta(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let base = mean_sq_dist(tape, a, b)?;
    match (frame_delta(tape, a)?, frame_delta(tape, b)?) {
        (Some(da), Some(db)) => {
            let d = mean_sq_dist(tape, da, db)?;
            tape.add(base, d)
        }
        _ => Ok(base),
    }
}

fn block(tape: &mut Tape, x: Var, start: usize, width: usize) -> Result<Var> {
    tape.slice(x, 2, start, width)
}

pub fn l_data(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let (p, t) = (as_batch(tape, pred)?, as_batch(tape, target)?);
    mse_with_delta(tape, p, t)
}

pub fn l_rot(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let (p, t) = (as_batch(tape, pred)?, as_batch(tape, target)?);
    let rp = block(tape, p, R_START, JOINT_COUNT * 6)?;
    let rt = block(tape, t, R_START, JOINT_COUNT * 6)?;
    mse_with_delta(tape, rp, rt)
}

fn root_track(tape: &mut Tape, x: Var) -> Result<Var> {
    let [b, t, _] = tape.shape(x).try_into().expect("batched");
    let r = block(tape, x, P_START, 3)?;
    tape.reshape(r, &[b, t, 1, 3])
}

/// Root trajectory error: mean squared root displacement plus the same on
/// frame-to-frame root motion.
pub fn l_traj(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let (p, t) = (as_batch(tape, pred)?, as_batch(tape, target)?);
    let rp = root_track(tape, p)?;
    let rt = root_track(tape, t)?;
    point_loss_with_delta(tape, rp, rt)
}

/// Global joint positions from the root translation and decoded local
/// rotations, `[B, T, J, 3]`.
pub fn fk_positions(tape: &mut Tape, x: Var, tree: &Arc<FkTree>) -> Result<Var> {
    let x = as_batch(tape, x)?;
    let [b, t, _] = tape.shape(x).try_into().expect("batched");
    let n = b * t;
    let root = block(tape, x, P_START, 3)?;
    let root = tape.reshape(root, &[n, 3])?;
    let r = block(tape, x, R_START, JOINT_COUNT * 6)?;
    let r = tape.reshape(r, &[n, JOINT_COUNT, 6])?;
    let mats = tape.sixd_to_matrix(r)?;
    let pos = tape.forward_kinematics(root, mats, tree.clone())?;
    tape.reshape(pos, &[b, t, JOINT_COUNT, 3])
}

pub fn l_geo(tape: &mut Tape, pred: Var, target: Var, tree: &Arc<FkTree>) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let gp = fk_positions(tape, pred, tree)?;
    let gt = fk_positions(tape, target, tree)?;
    point_loss_with_delta(tape, gp, gt)
}

fn foot_speeds(tape: &mut Tape, x: Var, feet: &[usize]) -> Result<Var> {
    let [b, t, _] = tape.shape(x).try_into().expect("batched");
    let mut parts = Vec::with_capacity(feet.len());
    for &f in feet {
        if f >= JOINT_COUNT {
            return Err(Error::Index {
                index: f,
                max: JOINT_COUNT - 1,
            });
        }
        let v = block(tape, x, V_START + 3 * f, 3)?;
        parts.push(tape.reshape(v, &[b, t, 1, 3])?);
    }
    let v = tape.concat(&parts, 2)?;
    let sq = tape.square(v)?;
    let s = tape.sum_last(sq)?;
    let s = tape.add_scalar(s, SPEED_EPS)?;
    tape.sqrt(s)
}

/// Foot velocity consistency on ground-truth contact frames. Zero when the
/// mask is empty.
pub fn l_foot(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    feet: &[usize],
    contacts: &Tensor,
    mode: FootLossMode,
) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let (p, t) = (as_batch(tape, pred)?, as_batch(tape, target)?);
    let [b, frames, _] = tape.shape(p).try_into().expect("batched");
    if contacts.shape() != [b, frames, feet.len()] {
        return Err(Error::shape(
            "l_foot",
            format!("contacts {:?}, expected {:?}", contacts.shape(), [b, frames, feet.len()]),
        ));
    }
    let count: f64 = contacts.data().iter().sum();
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let sp = foot_speeds(tape, p, feet)?;
    let err = match mode {
        FootLossMode::MatchSpeed => {
            let st = foot_speeds(tape, t, feet)?;
            tape.sub(sp, st)?
        }
        FootLossMode::ZeroVelocity => sp,
    };
    let sq = tape.square(err)?;
    let mask = tape.constant(contacts.clone());
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / count)
}

/// All five terms. A term that turns non-finite is reported by name.
pub fn compute_losses(tape: &mut Tape, pred: Var, target: Var, ctx: &LossContext) -> Result<LossTerms<Var>> {
    fn named<T>(term: &'static str, r: Result<T>) -> Result<T> {
        r.map_err(|e| {
            if e.is_numeric() {
                Error::NonFiniteLoss { term, value: f64::NAN }
            } else {
                e
            }
        })
    }
    Ok(LossTerms {
        data: named("data", l_data(tape, pred, target))?,
        geo: named("geo", l_geo(tape, pred, target, &ctx.tree))?,
        foot: named(
            "foot",
            l_foot(tape, pred, target, &ctx.foot_joints, &ctx.contacts, ctx.foot_mode),
        )?,
        traj: named("traj", l_traj(tape, pred, target))?,
        rot: named("rot", l_rot(tape, pred, target))?,
    })
}

/// `Σ λ_i · L_i` with the weights already resolved for the epoch.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms<Var>, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for ((_, v), (_, w)) in terms.named().iter().zip(weights.named()) {
        let s = tape.scale(*v, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("five terms"))
}
