use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Conditions, DenoiserModel};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{compute_losses, total_loss, FootLossMode, LossContext, LossTerms, LossWeights};
use crate::math::{save_checkpoint, AdamWConfig, OptimizerState, Tape, Tensor};
use crate::skeleton::{FkTree, SkeletonSpec, MOTION_WIDTH};

pub const METRICS_LOG: &str = "metrics.log";
pub const MODEL_CARD: &str = "model_card.txt";
pub const CHECKPOINT_PREFIX: &str = "denoiser";

/// One normalized training clip.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub name: String,
    /// `[T, 300]`.
    pub x0: Tensor,
    /// Batch-of-one conditions for this clip.
    pub conditions: Conditions,
    /// `[T, feet]` ground-truth contact mask.
    pub contacts: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub weights: LossWeights,
    pub foot_mode: FootLossMode,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; `None` disables.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            diffusion_steps: 1000,
            weights: LossWeights::default(),
            foot_mode: FootLossMode::default(),
            checkpoint_every: 500,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.diffusion_steps == 0 {
            return Err(Error::Config("epochs, batch_size and diffusion_steps must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        self.weights.validate()
    }
}

/// Mean loss terms over one epoch and the weights that were in force.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: LossTerms<f64>,
    pub total: f64,
    pub weights: LossWeights,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let mut s = format!("epoch={}", self.epoch);
        for (name, v) in self.terms.named() {
            let _ = write!(s, " {name}={v:.6e}");
        }
        let w = &self.weights;
        let _ = write!(
            s,
            " total={:.6e} lambda={},{},{},{},{}",
            self.total, w.data, w.geo, w.foot, w.traj, w.rot
        );
        s
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub history: Vec<EpochRecord>,
    /// 6D inputs that needed the degenerate fallback during training.
    pub degenerate_rotations: usize,
}

fn check_data(model: &DenoiserModel, data: &[TrainingSample]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::Contract("training set is empty".into()))?;
    let t = first.conditions.frames();
    for s in data {
        if s.x0.shape() != [t, MOTION_WIDTH] || s.conditions.frames() != t || s.conditions.batch() != 1 {
            return Err(Error::Alignment {
                sample: s.name.clone(),
                detail: format!("x0 {:?}, conditions for {} frames; expected {t}", s.x0.shape(), s.conditions.frames()),
            });
        }
        if s.contacts.shape().first() != Some(&t) {
            return Err(Error::Alignment {
                sample: s.name.clone(),
                detail: format!("contact mask {:?}", s.contacts.shape()),
            });
        }
    }
    if t > model.config.max_frames {
        return Err(Error::Config(format!("clips of {t} frames exceed max_frames {}", model.config.max_frames)));
    }
    Ok(t)
}

fn stack(parts: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Trains `model` on `data`. When `out_dir` is given, appends one line per
/// epoch to [`METRICS_LOG`], writes checkpoints, and writes a model card.
pub fn train(
    mut model: DenoiserModel,
    data: &[TrainingSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    data_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let frames = check_data(&model, data)?;
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps)?;
    let skeleton = SkeletonSpec::neutral();
    let tree = Arc::new(FkTree::from(&skeleton));
    let feet = skeleton.foot_joints().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.params, cfg.optimizer);
    let trainable = vec![true; model.params.len()];
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_LOG);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut degenerate = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let weights = cfg.weights.at_epoch(epoch, cfg.epochs)?;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let samples: Vec<&TrainingSample> = chunk.iter().map(|&i| &data[i]).collect();
            let x0 = stack(&samples.iter().map(|s| &s.x0).collect::<Vec<_>>(), &[b, frames, MOTION_WIDTH])?;
            let contacts = stack(
                &samples.iter().map(|s| &s.contacts).collect::<Vec<_>>(),
                &[b, frames, feet.len()],
            )?;
            let cond = Conditions::stack(&samples.iter().map(|s| &s.conditions).collect::<Vec<_>>())?;
            let steps: Vec<usize> = (0..b).map(|_| schedule.sample_timestep(&mut rng)).collect();
            let noise = Tensor::randn(&[b, frames, MOTION_WIDTH], &mut rng);
            let per = frames * MOTION_WIDTH;
            let mut x_t = Vec::with_capacity(b * per);
            for (i, &t) in steps.iter().enumerate() {
                let x = Tensor::new(&[per], x0.data()[i * per..(i + 1) * per].to_vec())?;
                let n = Tensor::new(&[per], noise.data()[i * per..(i + 1) * per].to_vec())?;
                x_t.extend_from_slice(q_sample(&x, t, &n, &schedule)?.data());
            }
            let x_t = Tensor::new(&[b, frames, MOTION_WIDTH], x_t)?;

            let mut tape = Tape::new();
            let bound = model.params.bind_all(&mut tape);
            let xv = tape.constant(x_t);
            let pred = model.forward(&mut tape, &bound, xv, &steps, &cond)?;
            let target = tape.constant(x0);
            let ctx = LossContext {
                tree: tree.clone(),
                foot_joints: feet.clone(),
                contacts,
                foot_mode: cfg.foot_mode,
            };
            let terms = compute_losses(&mut tape, pred, target, &ctx)?;
            let values = terms.values(&tape);
            values.check_finite()?;
            let total = total_loss(&mut tape, &terms, &weights)?;
            let grads = tape.backward(total)?;
            let mut g = bound.gradients(&grads);
            if let Some(max) = cfg.max_grad_norm {
                clip_gradients(&mut g, max);
            }
            opt.step(&mut model.params, &g, &trainable)?;
            degenerate += tape.degenerate_rotations();
            for (s, (_, v)) in sums.iter_mut().zip(values.named()) {
                *s += v;
            }
            batches += 1;
        }
        let m = |i: usize| sums[i] / batches as f64;
        let terms = LossTerms {
            data: m(0),
            geo: m(1),
            foot: m(2),
            traj: m(3),
            rot: m(4),
        };
        let record = EpochRecord {
            epoch,
            total: terms.weighted_total(&weights),
            terms,
            weights,
        };
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{}", record.log_line()).map_err(|e| Error::io(path.clone(), e))?;
        }
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            log::info!("{}", record.log_line());
        }
        history.push(record);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("{CHECKPOINT_PREFIX}_epoch{:05}.ckpt", epoch + 1)), &model.params)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(format!("{CHECKPOINT_PREFIX}_final.ckpt")), &model.params)?;
        let card = model_card(&model, cfg, data.len(), data_hash, history.last());
        let path = dir.join(MODEL_CARD);
        std::fs::write(&path, card).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        degenerate_rotations: degenerate,
    })
}

fn model_card(
    model: &DenoiserModel,
    cfg: &TrainConfig,
    samples: usize,
    data_hash: &str,
    last: Option<&EpochRecord>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: binaural motion denoiser");
    let _ = writeln!(s, "parameters: {}", model.params.numel());
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "training samples: {samples}");
    let _ = writeln!(s, "data hash: {data_hash}");
    let _ = writeln!(s, "model config: {}", serde_json::to_string(&model.config).unwrap_or_default());
    let _ = writeln!(s, "train config: {}", serde_json::to_string(cfg).unwrap_or_default());
    if let Some(r) = last {
        let _ = writeln!(s, "final epoch: {}", r.log_line());
    }
    s
}
