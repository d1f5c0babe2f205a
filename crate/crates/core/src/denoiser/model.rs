use rand::Rng;

use super::{DenoiserConfig, SslMode};
use crate::diffusion::X0Predictor;
use crate::error::{Error, Result};
use crate::math::{Bound, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, TransformerBlock, Var};

/// `[n, dim]` table: `sin(p·ω_i)` in the first half, `cos(p·ω_i)` in the
/// second, `ω_i = 10000^(-i/(dim/2))`.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let w = 10000f64.powf(-(i as f64) / half as f64);
            data[r * dim + i] = (p * w).sin();
            data[r * dim + half + i] = (p * w).cos();
        }
    }
    Tensor::new(&[positions.len(), dim], data).expect("sinusoidal layout")
}

/// Two-layer projection `in -> d -> d` with a SiLU in between.
#[derive(Clone, Copy, Debug)]
struct Projection {
    a: Linear,
    b: Linear,
}

impl Projection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, d: usize, rng: &mut R) -> Self {
        Self {
            a: Linear::new(store, &format!("{name}.0"), input, d, rng),
            b: Linear::new(store, &format!("{name}.1"), d, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.a.forward(tape, p, x)?;
        let h = tape.silu(h)?;
        self.b.forward(tape, p, h)
    }
}

/// Per-sample conditions for a batch: `audio [B, T, 2272]`, `ssl [B, T, 3]`
/// (character-local source position), one genre index per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub audio: Tensor,
    pub ssl: Tensor,
    pub genre: Vec<usize>,
}

impl Conditions {
    /// Batch of one from `audio [T, 2272]` and `ssl [T, 3]`.
    pub fn single(audio: Tensor, ssl: Tensor, genre: usize) -> Result<Self> {
        let (ta, tw) = match *audio.shape() {
            [t, w] => (t, w),
            ref s => return Err(Error::shape("conditions", format!("audio {s:?}"))),
        };
        Ok(Self {
            audio: audio.reshape(&[1, ta, tw])?,
            ssl: ssl.reshape(&[1, ta, 3])?,
            genre: vec![genre],
        })
    }

    /// Stacks single-sample conditions along the batch axis.
    pub fn stack(items: &[&Conditions]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Contract("empty condition batch".into()))?;
        let (t, aw) = (first.frames(), first.audio.shape()[2]);
        let mut audio = Vec::new();
        let mut ssl = Vec::new();
        let mut genre = Vec::new();
        for c in items {
            if c.frames() != t || c.audio.shape()[2] != aw {
                return Err(Error::shape("conditions", "mixed clip lengths in batch"));
            }
            audio.extend_from_slice(c.audio.data());
            ssl.extend_from_slice(c.ssl.data());
            genre.extend_from_slice(&c.genre);
        }
        let b = genre.len();
        Ok(Self {
            audio: Tensor::new(&[b, t, aw], audio)?,
            ssl: Tensor::new(&[b, t, 3], ssl)?,
            genre,
        })
    }

    pub fn batch(&self) -> usize {
        self.genre.len()
    }

    pub fn frames(&self) -> usize {
        self.audio.shape().get(1).copied().unwrap_or(0)
    }
}

/// Parameters and layout of the denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    time: Projection,
    genre: ParamId,
    cond: Projection,
    ssl: Option<Projection>,
    motion: Projection,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    head: Linear,
    positional: Tensor,
}

impl DenoiserModel {
    /// Builds the layout for `config` and fills it from a checkpoint file.
    pub fn from_checkpoint(config: DenoiserConfig, path: &std::path::Path) -> Result<Self> {
        let stored = crate::math::load_checkpoint(path)?;
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        model.params.load_from(&stored).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }

    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let time = Projection::new(s, "time", d, d, rng);
        let genre = s.add("genre.embedding", Tensor::randn(&[config.genres, d], rng));
        let (cond, ssl) = match config.ssl_mode {
            SslMode::Fused => (
                Projection::new(s, "cond", config.audio_width + config.ssl_width, d, rng),
                None,
            ),
            SslMode::SeparateStream | SslMode::Static => (
                Projection::new(s, "cond", config.audio_width, d, rng),
                Some(Projection::new(s, "ssl", config.ssl_width, d, rng)),
            ),
        };
        let motion = Projection::new(s, "motion", config.motion_width, d, rng);
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(s, &format!("block{l}"), d, config.ff_dim, rng))
            .collect();
        let final_ln = LayerNorm::new(s, "final_ln", d);
        let head = Linear::new(s, "head", d, config.motion_width, rng);
        let positions: Vec<f64> = (0..config.max_tokens()).map(|i| i as f64).collect();
        let positional = sinusoidal_embedding(&positions, d);
        Ok(Self {
            config,
            params: store,
            time,
            genre,
            cond,
            ssl,
            motion,
            blocks,
            final_ln,
            head,
            positional,
        })
    }

    fn check_inputs(&self, steps: &[usize], cond: &Conditions) -> Result<()> {
        let c = &self.config;
        let (b, t) = (cond.batch(), cond.frames());
        if cond.audio.shape() != [b, t, c.audio_width] || cond.ssl.shape() != [b, t, c.ssl_width] {
            return Err(Error::Contract(format!(
                "condition widths: audio {:?}, ssl {:?}; expected [{b}, {t}, {}] and [{b}, {t}, {}]",
                cond.audio.shape(),
                cond.ssl.shape(),
                c.audio_width,
                c.ssl_width
            )));
        }
        if steps.len() != b {
            return Err(Error::Contract(format!("{} timesteps for batch of {b}", steps.len())));
        }
        if t == 0 || t > c.max_frames {
            return Err(Error::Contract(format!("{t} frames outside 1..={}", c.max_frames)));
        }
        if let Some(&g) = cond.genre.iter().find(|&&g| g >= c.genres) {
            return Err(Error::Index {
                index: g,
                max: c.genres - 1,
            });
        }
        Ok(())
    }

    /// Condition tokens `[B, condition_tokens(T), d]`: timestep, genre, then
    /// the per-frame audio/SSL stream(s).
    pub fn embed_conditions(&self, tape: &mut Tape, p: &Bound, steps: &[usize], cond: &Conditions) -> Result<Var> {
        self.check_inputs(steps, cond)?;
        let d = self.config.latent_dim;
        let (b, t) = (cond.batch(), cond.frames());
        let ts: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        let sin = tape.constant(sinusoidal_embedding(&ts, d));
        let time = self.time.forward(tape, p, sin)?;
        let time = tape.reshape(time, &[b, 1, d])?;
        let genre = tape.embedding(p.var(self.genre), &cond.genre)?;
        let genre = tape.reshape(genre, &[b, 1, d])?;
        let audio = tape.constant(cond.audio.clone());
        let ssl = tape.constant(cond.ssl.clone());
        let mut tokens = vec![time, genre];
        match (self.config.ssl_mode, &self.ssl) {
            (SslMode::Fused, _) => {
                let joined = tape.concat(&[audio, ssl], 2)?;
                tokens.push(self.cond.forward(tape, p, joined)?);
            }
            (SslMode::SeparateStream, Some(proj)) => {
                tokens.push(self.cond.forward(tape, p, audio)?);
                tokens.push(proj.forward(tape, p, ssl)?);
            }
            (SslMode::Static, Some(proj)) => {
                tokens.push(self.cond.forward(tape, p, audio)?);
                let mut mean = vec![0.0; b * 3];
                for (i, row) in cond.ssl.data().chunks(3).enumerate() {
                    for k in 0..3 {
                        mean[(i / t) * 3 + k] += row[k] / t as f64;
                    }
                }
                let s = tape.constant(Tensor::new(&[b, 1, 3], mean)?);
                tokens.push(proj.forward(tape, p, s)?);
            }
            _ => unreachable!("SSL projection exists for non-fused modes"),
        }
        tape.concat(&tokens, 1)
    }

    /// `x0_hat [B, T, 300]` from `x_t [B, T, 300]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x_t: Var, steps: &[usize], cond: &Conditions) -> Result<Var> {
        let (b, t) = (cond.batch(), cond.frames());
        if tape.shape(x_t) != [b, t, self.config.motion_width] {
            return Err(Error::Contract(format!(
                "noisy motion {:?} does not match conditions [{b}, {t}, {}]",
                tape.shape(x_t),
                self.config.motion_width
            )));
        }
        let cond_tokens = self.embed_conditions(tape, p, steps, cond)?;
        let motion = self.motion.forward(tape, p, x_t)?;
        let x = tape.concat(&[cond_tokens, motion], 1)?;
        let n = tape.shape(x)[1];
        let pe = self.positional_rows(n)?;
        let pe = tape.constant(pe);
        let mut x = tape.add_broadcast(x, pe)?;
        for (l, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(tape, p, x, self.config.heads).map_err(|e| {
                if e.is_numeric() {
                    Error::NonFiniteLayer {
                        layer: l,
                        source: Box::new(e),
                    }
                } else {
                    e
                }
            })?;
        }
        let x = self.final_ln.forward(tape, p, x)?;
        let last = tape.slice(x, 1, n - t, t)?;
        self.head.forward(tape, p, last)
    }

    fn positional_rows(&self, n: usize) -> Result<Tensor> {
        let d = self.config.latent_dim;
        let rows = self.positional.shape()[0];
        if n > rows {
            return Err(Error::Contract(format!("{n} tokens exceed positional table of {rows}")));
        }
        Tensor::new(&[n, d], self.positional.data()[..n * d].to_vec())
    }

    /// Inference without gradient tracking. `x_t` is `[T, 300]` (batch of
    /// one) or `[B, T, 300]`; every sample uses step `t`.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, cond: &Conditions) -> Result<Tensor> {
        let squeeze = x_t.shape().len() == 2;
        let x = if squeeze {
            x_t.clone().reshape(&[1, x_t.shape()[0], x_t.shape()[1]])?
        } else {
            x_t.clone()
        };
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &p, xv, &vec![t; cond.batch()], cond)?;
        let out = tape.value(out).clone();
        if squeeze {
            out.reshape(x_t.shape())
        } else {
            Ok(out)
        }
    }

    /// Condition tokens as plain values (no gradient tracking).
    pub fn condition_tokens(&self, t: usize, cond: &Conditions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.embed_conditions(&mut tape, &p, &vec![t; cond.batch()], cond)?;
        Ok(tape.value(v).clone())
    }
}

/// A model paired with fixed conditions, usable by the diffusion sampler.
pub struct ConditionedDenoiser<'a> {
    pub model: &'a DenoiserModel,
    pub conditions: Conditions,
}

impl X0Predictor for ConditionedDenoiser<'_> {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.model.predict_x0(x_t, t, &self.conditions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoidal_rows_are_unit_pairs() {
        let e = sinusoidal_embedding(&[0.0, 5.0], 8);
        assert_eq!(e.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        for i in 0..4 {
            let (s, c) = (e.row(1)[i], e.row(1)[4 + i]);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_count_by_ssl_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (mode, extra) in [(SslMode::Fused, 0), (SslMode::SeparateStream, 7), (SslMode::Static, 1)] {
            let cfg = DenoiserConfig {
                latent_dim: 8,
                heads: 2,
                layers: 1,
                ff_dim: 16,
                max_frames: 7,
                ssl_mode: mode,
                ..DenoiserConfig::default()
            };
            let m = DenoiserModel::new(cfg, &mut rng).unwrap();
            let cond = Conditions::single(Tensor::zeros(&[7, 2272]), Tensor::zeros(&[7, 3]), 1).unwrap();
            assert_eq!(m.condition_tokens(3, &cond).unwrap().shape(), &[1, 7 + 2 + extra, 8]);
            let out = m.predict_x0(&Tensor::zeros(&[7, 300]), 3, &cond).unwrap();
            assert_eq!(out.shape(), &[7, 300]);
        }
    }
}
