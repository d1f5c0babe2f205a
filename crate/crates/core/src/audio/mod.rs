//! Binaural audio features aligned one-to-one with motion frames.

pub mod cache;
pub mod chroma;
pub mod energy;
pub mod mel;
pub mod resample;
pub mod rhythm;
pub mod stft;
pub mod wav;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;

pub use cache::{feature_cache_key, read_feature_cache, write_feature_cache};
pub use chroma::{cq_chroma, stft_chroma};
pub use energy::energy_features;
pub use mel::mfcc_with_delta;
pub use resample::resample;
pub use rhythm::{beat_track, onset_strength, rhythm_features, tempogram};
pub use stft::{stft, Spectrogram};
pub use wav::{read_wav, write_wav};

/// Per-ear column blocks in storage order.
pub const EAR_LAYOUT: [(&str, usize); 9] = [
    ("mfcc", 20),
    ("mfcc_delta", 20),
    ("cq_chroma", 12),
    ("stft_chroma", 12),
    ("onset", 1),
    ("tempogram", 1068),
    ("beats", 1),
    ("rms", 1),
    ("active", 1),
];
pub const EAR_WIDTH: usize = 1136;
pub const FEATURE_WIDTH: usize = 2 * EAR_WIDTH;

const _: () = {
    let mut sum = 0;
    let mut i = 0;
    while i < EAR_LAYOUT.len() {
        sum += EAR_LAYOUT[i].1;
        i += 1;
    }
    assert!(sum == EAR_WIDTH);
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ear {
    Left,
    Right,
}

/// Column range of `block` for `ear` within a feature row.
pub fn block_range(ear: Ear, block: &str) -> Option<Range<usize>> {
    let base = match ear {
        Ear::Left => 0,
        Ear::Right => EAR_WIDTH,
    };
    let mut start = base;
    for (name, width) in EAR_LAYOUT {
        if name == block {
            return Some(start..start + width);
        }
        start += width;
    }
    None
}

/// Two equally long channels at a common sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if left.len() != right.len() {
            return Err(Error::Contract(format!(
                "channel lengths differ: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        Ok(Self {
            sample_rate,
            left,
            right,
        })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Rate audio is resampled to before analysis.
    pub sample_rate: u32,
    pub motion_fps: u32,
    pub fft_size: usize,
    pub mel_bands: usize,
    pub mfcc_count: usize,
    pub chroma_bins: usize,
    pub tempogram_bins: usize,
    pub rms_threshold: f64,
    /// Z-score columns with training-split statistics.
    pub zscore: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24000,
            motion_fps: 30,
            fft_size: 2048,
            mel_bands: 128,
            mfcc_count: 20,
            chroma_bins: 12,
            tempogram_bins: 1068,
            rms_threshold: energy::ACTIVE_THRESHOLD,
            zscore: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.motion_fps == 0 || self.sample_rate % self.motion_fps != 0 {
            return Err(Error::Config(format!(
                "sample rate {} is not a multiple of motion fps {}",
                self.sample_rate, self.motion_fps
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!("fft_size {} is not a power of two", self.fft_size)));
        }
        if self.mel_bands < self.mfcc_count {
            return Err(Error::Config("fewer mel bands than MFCCs".into()));
        }
        let widths = [
            ("mfcc_count", self.mfcc_count, 20),
            ("chroma_bins", self.chroma_bins, 12),
            ("tempogram_bins", self.tempogram_bins, 1068),
        ];
        for (name, got, want) in widths {
            if got != want {
                return Err(Error::Config(format!("{name} must be {want} to keep the 1136-wide layout, got {got}")));
            }
        }
        Ok(())
    }

    pub fn hop_length(&self) -> Result<usize> {
        self.validate()?;
        Ok((self.sample_rate / self.motion_fps) as usize)
    }
}

/// `frames × 2272` feature rows: left ear then right ear, each laid out as
/// [`EAR_LAYOUT`].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureMatrix {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl AudioFeatureMatrix {
    pub fn new(frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * FEATURE_WIDTH {
            return Err(Error::shape(
                "AudioFeatureMatrix",
                format!("{} values for {frames} frames", values.len()),
            ));
        }
        Ok(Self { frames, values })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * FEATURE_WIDTH..(t + 1) * FEATURE_WIDTH]
    }

    /// Values of one column over all frames.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.values[t * FEATURE_WIDTH + c]).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, FEATURE_WIDTH], self.values.clone()).expect("validated layout")
    }
}

/// Per-column mean and standard deviation fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    /// Columns with (near) zero spread get unit scale.
    pub fn fit(matrices: &[&AudioFeatureMatrix]) -> Result<Self> {
        let n: usize = matrices.iter().map(|m| m.frames).sum();
        if n == 0 {
            return Err(Error::Contract("cannot fit normalization on zero frames".into()));
        }
        let mut mean = vec![0.0; FEATURE_WIDTH];
        for m in matrices {
            for row in m.values.chunks(FEATURE_WIDTH) {
                mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut var = vec![0.0; FEATURE_WIDTH];
        for m in matrices {
            for row in m.values.chunks(FEATURE_WIDTH) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu).powi(2);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &mut AudioFeatureMatrix) {
        for row in m.values.chunks_mut(FEATURE_WIDTH) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
    }
}

/// Features of one already-resampled channel, `frames × 1136`.
pub fn extract_ear(signal: &[f64], config: &FeatureConfig) -> Result<Tensor> {
    let hop = config.hop_length()?;
    let sr = config.sample_rate as f64;
    let spec = stft(signal, config.fft_size, hop)?;
    let blocks = [
        mfcc_with_delta(&spec, sr, config.mel_bands, config.mfcc_count),
        cq_chroma(&spec, sr),
        stft_chroma(&spec, sr),
        rhythm_features(&spec, sr, config.mel_bands, config.tempogram_bins, config.motion_fps as f64),
        energy_features(signal, config.fft_size, hop, config.rms_threshold),
    ];
    let mut data = Vec::with_capacity(spec.frames * EAR_WIDTH);
    for t in 0..spec.frames {
        for b in &blocks {
            data.extend_from_slice(b.row(t));
        }
    }
    Tensor::new(&[spec.frames, EAR_WIDTH], data)
}

/// Featurizes both ears and fits the result to exactly `t_target` frames
/// (truncating, or repeating the last frame). The clip must span at least
/// `t_target` motion frames. Normalization is applied separately.
pub fn extract_binaural(clip: &AudioClip, config: &FeatureConfig, t_target: usize) -> Result<AudioFeatureMatrix> {
    config.validate()?;
    let need = (t_target as u64 * clip.sample_rate as u64).div_ceil(config.motion_fps as u64) as usize;
    if clip.len() < need {
        return Err(Error::Duration {
            need,
            got: clip.len(),
        });
    }
    let ears = [&clip.left, &clip.right].map(|ch| {
        let x = resample(ch, clip.sample_rate, config.sample_rate);
        extract_ear(&x, config)
    });
    let [left, right] = ears;
    let (left, right) = (left?, right?);
    let frames = left.shape()[0];
    let mut values = Vec::with_capacity(t_target * FEATURE_WIDTH);
    for t in 0..t_target {
        let src = t.min(frames.saturating_sub(1));
        values.extend_from_slice(left.row(src));
        values.extend_from_slice(right.row(src));
    }
    AudioFeatureMatrix::new(t_target, values)
}
