use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_WIDTH;
use crate::denoiser::{sinusoidal_embedding, Conditions, SSL_WIDTH};
use crate::error::{Error, Result};
use crate::math::{Bound, Linear, ParamStore, Tape, Tensor, TransformerBlock, Var};
use crate::skeleton::MOTION_WIDTH;

/// What the motion encoder reads from the autoencoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionInput {
    /// The encoder latent sequence `[B, T, latent]`.
    #[default]
    Latent,
    /// The decoded reconstruction `[B, T, 300]`.
    Reconstruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub audio_width: usize,
    /// Audio projection width before SSL and genre are appended.
    pub audio_proj: usize,
    pub ssl_width: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub feature_width: usize,
    pub ae_latent: usize,
    pub ae_layers: usize,
    pub ae_heads: usize,
    pub ae_ff: usize,
    pub motion_width: usize,
    pub max_frames: usize,
    pub motion_input: MotionInput,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            audio_width: FEATURE_WIDTH,
            audio_proj: 1020,
            ssl_width: SSL_WIDTH,
            gru_hidden: 1024,
            gru_layers: 4,
            feature_width: 1024,
            ae_latent: 512,
            ae_layers: 4,
            ae_heads: 4,
            ae_ff: 2048,
            motion_width: MOTION_WIDTH,
            max_frames: 240,
            motion_input: MotionInput::Latent,
        }
    }
}

impl ExtractorConfig {
    pub fn desk() -> Self {
        Self {
            audio_proj: 28,
            gru_hidden: 32,
            gru_layers: 1,
            feature_width: 32,
            ae_latent: 32,
            ae_layers: 1,
            ae_heads: 2,
            ae_ff: 64,
            max_frames: 60,
            ..Self::default()
        }
    }

    /// Per-frame condition width: projected audio, SSL, and one genre channel.
    pub fn condition_width(&self) -> usize {
        self.audio_proj + self.ssl_width + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.audio_proj,
            self.gru_hidden,
            self.gru_layers,
            self.feature_width,
            self.ae_latent,
            self.ae_layers,
            self.ae_ff,
            self.max_frames,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("extractor widths and depths must be positive".into()));
        }
        if self.ae_heads == 0 || self.ae_latent % self.ae_heads != 0 || self.ae_latent % 2 != 0 {
            return Err(Error::Config(format!(
                "autoencoder latent {} must be even and divisible by {} heads",
                self.ae_latent, self.ae_heads
            )));
        }
        if self.motion_width != MOTION_WIDTH {
            return Err(Error::Config(format!("motion width must be {MOTION_WIDTH}")));
        }
        Ok(())
    }
}

/// Gated recurrent cell `h' = n + z ⊙ (h − n)` with
/// `r = σ(x W_r + h U_r)`, `z = σ(x W_z + h U_z)`, `n = tanh(x W_n + r ⊙ (h U_n))`
/// (biases omitted).
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub size: usize,
}

impl GruCell {
    /// Parameters `{name}.ih.*` (gate order r, z, n) and `{name}.hh.*`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, size: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.ih"), input, 3 * size, rng),
            hidden: Linear::new(store, &format!("{name}.hh"), size, 3 * size, rng),
            size,
        }
    }

    /// Runs over `x [B, T, in]`, returning the hidden states `[B, T, H]` in
    /// input order. `reverse` scans from the last frame to the first.
    pub fn scan(&self, tape: &mut Tape, p: &Bound, x: Var, reverse: bool) -> Result<Var> {
        let [b, t, _]: [usize; 3] = tape.shape(x).try_into().expect("[B, T, in]");
        let h_dim = self.size;
        let gi = self.input.forward(tape, p, x)?;
        let mut h = tape.constant(Tensor::zeros(&[b, h_dim]));
        let mut states = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let g = tape.slice(gi, 1, step, 1)?;
            let g = tape.reshape(g, &[b, 3 * h_dim])?;
            let gh = self.hidden.forward(tape, p, h)?;
            let part = |tape: &mut Tape, v: Var, k: usize| tape.slice(v, 1, k * h_dim, h_dim);
            let (gr, gz, gn) = (part(tape, g, 0)?, part(tape, g, 1)?, part(tape, g, 2)?);
            let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
            let r = tape.add(gr, hr)?;
            let r = tape.sigmoid(r)?;
            let z = tape.add(gz, hz)?;
            let z = tape.sigmoid(z)?;
            let rn = tape.mul(r, hn)?;
            let n = tape.add(gn, rn)?;
            let n = tape.tanh(n)?;
            let delta = tape.sub(h, n)?;
            let zd = tape.mul(z, delta)?;
            h = tape.add(n, zd)?;
            states[step] = tape.reshape(h, &[b, 1, h_dim])?;
        }
        tape.concat(&states, 1)
    }
}

/// Stacked bidirectional GRU pooled to one feature per sequence: the top
/// layer's final forward and backward states, concatenated and mapped to
/// the feature width.
#[derive(Clone, Debug)]
struct BiGru {
    layers: Vec<(GruCell, GruCell)>,
    out: Linear,
    hidden: usize,
}

impl BiGru {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        feature: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let w = if l == 0 { input } else { 2 * hidden };
                (
                    GruCell::new(store, &format!("{name}.l{l}.fwd"), w, hidden, rng),
                    GruCell::new(store, &format!("{name}.l{l}.bwd"), w, hidden, rng),
                )
            })
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), 2 * hidden, feature, rng);
        Self { layers, out, hidden }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let [b, t, _]: [usize; 3] = tape.shape(x).try_into().expect("[B, T, in]");
        let mut x = x;
        let (mut fwd, mut bwd) = (x, x);
        for (f, r) in &self.layers {
            fwd = f.scan(tape, p, x, false)?;
            bwd = r.scan(tape, p, x, true)?;
            x = tape.concat(&[fwd, bwd], 2)?;
        }
        let last = tape.slice(fwd, 1, t - 1, 1)?;
        let last = tape.reshape(last, &[b, self.hidden])?;
        let first = tape.slice(bwd, 1, 0, 1)?;
        let first = tape.reshape(first, &[b, self.hidden])?;
        let pooled = tape.concat(&[last, first], 1)?;
        self.out.forward(tape, p, pooled)
    }
}

/// Transformer encoder-decoder over motion frames.
#[derive(Clone, Debug)]
struct MotionAutoencoder {
    embed: Linear,
    encoder: Vec<TransformerBlock>,
    decoder: Vec<TransformerBlock>,
    out: Linear,
    heads: usize,
    positional: Tensor,
}

impl MotionAutoencoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ExtractorConfig, rng: &mut R) -> Self {
        let d = cfg.ae_latent;
        let embed = Linear::new(store, "ae.embed", cfg.motion_width, d, rng);
        let encoder = (0..cfg.ae_layers)
            .map(|l| TransformerBlock::new(store, &format!("ae.enc{l}"), d, cfg.ae_ff, rng))
            .collect();
        let decoder = (0..cfg.ae_layers)
            .map(|l| TransformerBlock::new(store, &format!("ae.dec{l}"), d, cfg.ae_ff, rng))
            .collect();
        let out = Linear::new(store, "ae.out", d, cfg.motion_width, rng);
        let positions: Vec<f64> = (0..cfg.max_frames).map(|i| i as f64).collect();
        Self {
            embed,
            encoder,
            decoder,
            out,
            heads: cfg.ae_heads,
            positional: sinusoidal_embedding(&positions, d),
        }
    }

    fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let t = tape.shape(x)[1];
        let d = self.positional.shape()[1];
        let mut h = self.embed.forward(tape, p, x)?;
        let pe = tape.constant(Tensor::new(&[t, d], self.positional.data()[..t * d].to_vec())?);
        h = tape.add_broadcast(h, pe)?;
        for blk in &self.encoder {
            h = blk.forward(tape, p, h, self.heads)?;
        }
        Ok(h)
    }

    fn decode(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for blk in &self.decoder {
            h = blk.forward(tape, p, h, self.heads)?;
        }
        self.out.forward(tape, p, h)
    }
}

/// Output of [`ExtractorModel::motion_features`] on the tape.
pub struct MotionPass {
    pub features: Var,
    pub reconstruction: Var,
}

/// Condition and motion encoders plus the motion autoencoder. Parameters of
/// the autoencoder are named with the `ae.` prefix.
#[derive(Clone, Debug)]
pub struct ExtractorModel {
    pub config: ExtractorConfig,
    pub params: ParamStore,
    audio: Linear,
    cond_gru: BiGru,
    motion_gru: BiGru,
    ae: MotionAutoencoder,
}

pub const AUTOENCODER_PREFIX: &str = "ae.";

impl ExtractorModel {
    /// Builds the layout for `config` and fills it from a checkpoint file.
    pub fn from_checkpoint(config: ExtractorConfig, path: &std::path::Path) -> Result<Self> {
        let stored = crate::math::load_checkpoint(path)?;
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        model.params.load_from(&stored).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }

    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let audio = Linear::new(s, "cond.audio", config.audio_width, config.audio_proj, rng);
        let cond_gru = BiGru::new(
            s,
            "cond.gru",
            config.condition_width(),
            config.gru_hidden,
            config.gru_layers,
            config.feature_width,
            rng,
        );
        let ae = MotionAutoencoder::new(s, &config, rng);
        let motion_in = match config.motion_input {
            MotionInput::Latent => config.ae_latent,
            MotionInput::Reconstruction => config.motion_width,
        };
        let motion_gru = BiGru::new(
            s,
            "motion.gru",
            motion_in,
            config.gru_hidden,
            config.gru_layers,
            config.feature_width,
            rng,
        );
        Ok(Self {
            config,
            params: store,
            audio,
            cond_gru,
            motion_gru,
            ae,
        })
    }

    fn check_frames(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.max_frames {
            return Err(Error::Contract(format!("{t} frames outside 1..={}", self.config.max_frames)));
        }
        Ok(())
    }

    /// Per-frame condition input `[B, T, condition_width]`. The genre index
    /// enters as one centered scalar channel.
    pub fn condition_input(&self, tape: &mut Tape, p: &Bound, cond: &Conditions) -> Result<Var> {
        let (b, t) = (cond.batch(), cond.frames());
        let c = &self.config;
        if cond.audio.shape() != [b, t, c.audio_width] || cond.ssl.shape() != [b, t, c.ssl_width] {
            return Err(Error::Contract(format!(
                "condition widths: audio {:?}, ssl {:?}",
                cond.audio.shape(),
                cond.ssl.shape()
            )));
        }
        self.check_frames(t)?;
        let audio = tape.constant(cond.audio.clone());
        let audio = self.audio.forward(tape, p, audio)?;
        let ssl = tape.constant(cond.ssl.clone());
        let genre: Vec<f64> = cond
            .genre
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g as f64 - 1.0, t))
            .collect();
        let genre = tape.constant(Tensor::new(&[b, t, 1], genre)?);
        tape.concat(&[audio, ssl, genre], 2)
    }

    pub fn condition_features(&self, tape: &mut Tape, p: &Bound, cond: &Conditions) -> Result<Var> {
        let x = self.condition_input(tape, p, cond)?;
        self.cond_gru.forward(tape, p, x)
    }

    /// Motion features and the autoencoder reconstruction of `motion [B, T, 300]`.
    pub fn motion_features(&self, tape: &mut Tape, p: &Bound, motion: Var) -> Result<MotionPass> {
        let shape = tape.shape(motion).to_vec();
        if shape.len() != 3 || shape[2] != self.config.motion_width {
            return Err(Error::Contract(format!("motion {shape:?} is not [B, T, 300]")));
        }
        self.check_frames(shape[1])?;
        let latent = self.ae.encode(tape, p, motion)?;
        let reconstruction = self.ae.decode(tape, p, latent)?;
        let input = match self.config.motion_input {
            MotionInput::Latent => latent,
            MotionInput::Reconstruction => reconstruction,
        };
        let features = self.motion_gru.forward(tape, p, input)?;
        Ok(MotionPass {
            features,
            reconstruction,
        })
    }

    /// Condition features `[B, F]` without gradient tracking.
    pub fn encode_conditions(&self, cond: &Conditions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.condition_features(&mut tape, &p, cond)?;
        Ok(tape.value(v).clone())
    }

    /// Motion features `[B, F]` for `motion [B, T, 300]` without gradient
    /// tracking.
    pub fn encode_motions(&self, motion: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let m = tape.constant(motion.clone());
        let pass = self.motion_features(&mut tape, &p, m)?;
        Ok(tape.value(pass.features).clone())
    }

    pub fn reconstruct(&self, motion: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let m = tape.constant(motion.clone());
        let pass = self.motion_features(&mut tape, &p, m)?;
        Ok(tape.value(pass.reconstruction).clone())
    }
}
