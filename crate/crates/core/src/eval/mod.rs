//! Feature extractors for evaluation and the retrieval, distribution and
//! diversity metrics computed on their features.

mod extractor;
mod metrics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use extractor::{ExtractorConfig, ExtractorModel, GruCell, MotionInput, MotionPass, AUTOENCODER_PREFIX};
pub use metrics::{
    apd, contrastive_loss, contrastive_pair, diversity, diversity_ci, euclidean, fid, r_precision, r_precision_ci,
    Estimate, MetricReport, CI_RESAMPLES, CONTRASTIVE_MARGIN, DIVERSITY_SUBSET, FID_NEGATIVE_TOL, FID_RIDGE,
    R_PRECISION_POOL,
};

use crate::denoiser::Conditions;
use crate::error::{Error, Result};
use crate::math::{AdamWConfig, OptimizerState, Tape, Tensor};
use crate::skeleton::MOTION_WIDTH;

/// A matched condition/motion pair.
#[derive(Clone, Debug)]
pub struct ExtractorSample {
    pub name: String,
    /// `[T, 300]`.
    pub motion: Tensor,
    /// Batch-of-one conditions.
    pub conditions: Conditions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Epoch from which autoencoder parameters stop updating; `None` means
    /// `floor(2/3 · epochs)`.
    pub freeze_epoch: Option<usize>,
    pub margin: f64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 64,
            optimizer: AdamWConfig {
                lr: 5e-5,
                ..AdamWConfig::default()
            },
            seed: 0,
            freeze_epoch: None,
            margin: CONTRASTIVE_MARGIN,
        }
    }
}

impl ExtractorTrainConfig {
    pub fn freeze_epoch(&self) -> usize {
        self.freeze_epoch.unwrap_or(2 * self.epochs / 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorEpoch {
    pub epoch: usize,
    pub contrastive: f64,
    pub reconstruction: f64,
    pub autoencoder_frozen: bool,
}

#[derive(Debug)]
pub struct ExtractorOutcome {
    pub model: ExtractorModel,
    pub history: Vec<ExtractorEpoch>,
    pub freeze_epoch: usize,
}

fn stack_motions(items: &[&Tensor]) -> Result<Tensor> {
    let t = items[0].shape()[0];
    let mut data = Vec::with_capacity(items.len() * t * MOTION_WIDTH);
    for m in items {
        if m.shape() != [t, MOTION_WIDTH] {
            return Err(Error::shape("stack_motions", format!("{:?}, expected [{t}, 300]", m.shape())));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(&[items.len(), t, MOTION_WIDTH], data)
}

/// Joint contrastive and reconstruction training. Each positive pair in a
/// batch gets one in-batch negative (the batch rolled by a random offset).
pub fn train_extractor(
    mut model: ExtractorModel,
    data: &[ExtractorSample],
    cfg: &ExtractorTrainConfig,
) -> Result<ExtractorOutcome> {
    if data.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("extractor training needs data, epochs and a batch size".into()));
    }
    for s in data {
        if s.conditions.frames() != s.motion.shape()[0] || s.conditions.batch() != 1 {
            return Err(Error::Alignment {
                sample: s.name.clone(),
                detail: format!("motion {:?} vs {} condition frames", s.motion.shape(), s.conditions.frames()),
            });
        }
    }
    let freeze = cfg.freeze_epoch();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.params, cfg.optimizer);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let frozen = epoch >= freeze;
        if epoch == freeze {
            log::info!("autoencoder frozen from epoch {epoch}");
        }
        let trainable: Vec<bool> = names
            .iter()
            .map(|n| !(frozen && n.starts_with(AUTOENCODER_PREFIX)))
            .collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut con_sum, mut rec_sum, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let samples: Vec<&ExtractorSample> = chunk.iter().map(|&i| &data[i]).collect();
            let motion = stack_motions(&samples.iter().map(|s| &s.motion).collect::<Vec<_>>())?;
            let cond = Conditions::stack(&samples.iter().map(|s| &s.conditions).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let p = model
                .params
                .bind(&mut tape, |n| !(frozen && n.starts_with(AUTOENCODER_PREFIX)));
            let c = model.condition_features(&mut tape, &p, &cond)?;
            let mv = tape.constant(motion);
            let pass = model.motion_features(&mut tape, &p, mv)?;
            let m = pass.features;
            let (c_all, m_all, labels) = if b >= 2 {
                let k = rng.random_range(1..b);
                let head = tape.slice(m, 0, k, b - k)?;
                let tail = tape.slice(m, 0, 0, k)?;
                let rolled = tape.concat(&[head, tail], 0)?;
                let c_all = tape.concat(&[c, c], 0)?;
                let m_all = tape.concat(&[m, rolled], 0)?;
                let labels: Vec<bool> = (0..2 * b).map(|i| i >= b).collect();
                (c_all, m_all, labels)
            } else {
                (c, m, vec![false])
            };
            let con = contrastive_loss(&mut tape, c_all, m_all, &labels, cfg.margin)
                .map_err(|e| numeric_term(e, "contrastive"))?;
            let rec = tape
                .mse(pass.reconstruction, mv)
                .map_err(|e| numeric_term(e, "reconstruction"))?;
            let total = tape.add(con, rec)?;
            let (cv, rv) = (tape.value(con).item()?, tape.value(rec).item()?);
            let grads = tape.backward(total)?;
            opt.step(&mut model.params, &p.gradients(&grads), &trainable)?;
            con_sum += cv;
            rec_sum += rv;
            batches += 1;
        }
        let record = ExtractorEpoch {
            epoch,
            contrastive: con_sum / batches as f64,
            reconstruction: rec_sum / batches as f64,
            autoencoder_frozen: frozen,
        };
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            log::info!(
                "extractor epoch={} contrastive={:.6e} reconstruction={:.6e} frozen={}",
                record.epoch,
                record.contrastive,
                record.reconstruction,
                record.autoencoder_frozen
            );
        }
        history.push(record);
    }
    Ok(ExtractorOutcome {
        model,
        history,
        freeze_epoch: freeze,
    })
}

fn numeric_term(e: Error, term: &'static str) -> Error {
    if e.is_numeric() {
        Error::NonFiniteLoss { term, value: f64::NAN }
    } else {
        e
    }
}

/// Sampling sizes and seed for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub pool: usize,
    pub diversity_subset: usize,
    pub resamples: usize,
    pub seed: u64,
    /// Feature extraction batch size.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pool: R_PRECISION_POOL,
            diversity_subset: DIVERSITY_SUBSET,
            resamples: CI_RESAMPLES,
            seed: 0,
            batch_size: 32,
        }
    }
}

fn stack_features(parts: Vec<Tensor>) -> Result<Tensor> {
    let f = parts[0].shape()[1];
    let n: usize = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(&[n, f], parts.into_iter().flat_map(Tensor::into_data).collect())
}

/// Condition features `[N, F]` for batch-of-one conditions.
pub fn condition_features(model: &ExtractorModel, conditions: &[Conditions], batch: usize) -> Result<Tensor> {
    let parts = conditions
        .chunks(batch.max(1))
        .map(|chunk| model.encode_conditions(&Conditions::stack(&chunk.iter().collect::<Vec<_>>())?))
        .collect::<Result<Vec<_>>>()?;
    stack_features(parts)
}

/// Motion features `[N, F]` for `[T, 300]` sequences.
pub fn motion_features(model: &ExtractorModel, motions: &[Tensor], batch: usize) -> Result<Tensor> {
    let parts = motions
        .chunks(batch.max(1))
        .map(|chunk| model.encode_motions(&stack_motions(&chunk.iter().collect::<Vec<_>>())?))
        .collect::<Result<Vec<_>>>()?;
    stack_features(parts)
}

/// All four metrics for `generated[i]` produced under `conditions[i]`,
/// with `real` the ground-truth test motions.
pub fn evaluate(
    model: &ExtractorModel,
    conditions: &[Conditions],
    real: &[Tensor],
    generated: &[Tensor],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if conditions.len() != generated.len() || conditions.is_empty() || real.is_empty() {
        return Err(Error::Sampling(format!(
            "{} conditions, {} generated, {} real motions",
            conditions.len(),
            generated.len(),
            real.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let c = condition_features(model, conditions, opts.batch_size)?;
    let g = motion_features(model, generated, opts.batch_size)?;
    let r = motion_features(model, real, opts.batch_size)?;
    let [top1, top2, top3] = r_precision_ci(&c, &g, opts.pool, opts.resamples, &mut rng)?;
    Ok(MetricReport {
        top1,
        top2,
        top3,
        fid: fid(&r, &g)?,
        diversity: diversity_ci(&g, opts.diversity_subset, opts.resamples, &mut rng)?,
        apd: apd(generated)?,
    })
}
