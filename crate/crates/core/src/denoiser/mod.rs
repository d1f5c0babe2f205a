//! Encoder-only transformer that predicts clean motion from a noisy motion
//! sample, the diffusion step, and the audio / source-location / genre
//! conditions.

mod check;
mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_WIDTH;
use crate::error::{Error, Result};
use crate::skeleton::MOTION_WIDTH;

pub use check::{miniature_config, miniature_gradcheck, MINIATURE_ENTRIES};
pub use model::{sinusoidal_embedding, ConditionedDenoiser, Conditions, DenoiserModel};
pub use train::{
    train, EpochRecord, TrainConfig, TrainOutcome, TrainingSample, CHECKPOINT_PREFIX, METRICS_LOG, MODEL_CARD,
};

pub const SSL_WIDTH: usize = 3;
pub const GENRE_COUNT: usize = 3;

/// How the per-frame source location enters the token sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SslMode {
    /// `[a_t | s_t]` projected together: T condition tokens.
    #[default]
    Fused,
    /// Audio and SSL as two separate per-frame token streams: 2T tokens.
    SeparateStream,
    /// Audio per frame plus one token for the clip-mean SSL: T + 1 tokens.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub motion_width: usize,
    pub audio_width: usize,
    pub ssl_width: usize,
    pub genres: usize,
    /// Longest clip (in frames) the positional table supports.
    pub max_frames: usize,
    pub ssl_mode: SslMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 512,
            heads: 8,
            layers: 4,
            ff_dim: 2048,
            motion_width: MOTION_WIDTH,
            audio_width: FEATURE_WIDTH,
            ssl_width: SSL_WIDTH,
            genres: GENRE_COUNT,
            max_frames: 240,
            ssl_mode: SslMode::Fused,
        }
    }
}

impl DenoiserConfig {
    /// Small configuration used for tests and overfit runs.
    pub fn desk() -> Self {
        Self {
            latent_dim: 64,
            heads: 4,
            layers: 2,
            ff_dim: 256,
            max_frames: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            )));
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::Config("latent dim must be even for sinusoidal embeddings".into()));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_frames == 0 || self.genres == 0 {
            return Err(Error::Config("layers, ff_dim, max_frames and genres must be positive".into()));
        }
        if self.motion_width != MOTION_WIDTH {
            return Err(Error::Config(format!("motion width must be {MOTION_WIDTH}")));
        }
        Ok(())
    }

    /// Condition tokens for a clip of `frames` frames (timestep and genre
    /// tokens included).
    pub fn condition_tokens(&self, frames: usize) -> usize {
        2 + match self.ssl_mode {
            SslMode::Fused => frames,
            SslMode::SeparateStream => 2 * frames,
            SslMode::Static => frames + 1,
        }
    }

    pub fn max_tokens(&self) -> usize {
        self.condition_tokens(self.max_frames) + self.max_frames
    }
}
