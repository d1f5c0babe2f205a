use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conditions, DenoiserConfig, DenoiserModel};
use crate::audio::FEATURE_WIDTH;
use crate::error::Result;
use crate::losses::{compute_losses, total_loss, FootLossMode, LossContext, LossWeights};
use crate::math::{gradcheck, Bound, GradcheckOptions, GradcheckReport, Tape, Tensor};
use crate::skeleton::kinematics::FkTree;
use crate::skeleton::{SkeletonSpec, MOTION_WIDTH};

/// Entries probed per parameter tensor.
pub const MINIATURE_ENTRIES: usize = 6;

/// The configuration used by [`miniature_gradcheck`].
pub fn miniature_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_dim: 16,
        heads: 2,
        layers: 1,
        ff_dim: 32,
        max_frames: 8,
        ..DenoiserConfig::default()
    }
}

/// Finite-difference check of every parameter tensor of a miniature
/// denoiser, through the forward pass and the full weighted loss.
pub fn miniature_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DenoiserModel::new(miniature_config(), &mut rng)?;
    let frames = 3;
    let cond = Conditions::single(
        Tensor::randn(&[frames, FEATURE_WIDTH], &mut rng),
        Tensor::randn(&[frames, 3], &mut rng),
        2,
    )?;
    let x = Tensor::randn(&[1, frames, MOTION_WIDTH], &mut rng);
    let target = Tensor::randn(&[1, frames, MOTION_WIDTH], &mut rng);
    let skeleton = SkeletonSpec::neutral();
    let feet = skeleton.foot_joints().to_vec();
    let contacts = Tensor::new(
        &[1, frames, feet.len()],
        (0..frames * feet.len()).map(|_| f64::from(rng.random_bool(0.5))).collect(),
    )?;
    let ctx = LossContext {
        tree: Arc::new(FkTree::from(&skeleton)),
        foot_joints: feet,
        contacts,
        foot_mode: FootLossMode::default(),
    };
    let weights = LossWeights::default().at_epoch(5, 6)?;
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone().with_grad()).collect();
    gradcheck(
        &inputs,
        |tape: &mut Tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let xv = tape.constant(x.clone());
            let out = model.forward(tape, &bound, xv, &[17], &cond)?;
            let tv = tape.constant(target.clone());
            let terms = compute_losses(tape, out, tv, &ctx)?;
            total_loss(tape, &terms, &weights)
        },
        GradcheckOptions {
            max_entries: Some(MINIATURE_ENTRIES),
            seed,
            ..GradcheckOptions::default()
        },
    )
}
