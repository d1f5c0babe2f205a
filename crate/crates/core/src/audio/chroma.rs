//! Pitch-class profiles. Pitch class 0 is C, 9 is A (A4 = 440 Hz).

use super::stft::Spectrogram;
use crate::math::Tensor;

pub const CHROMA_BINS: usize = 12;
/// Lowest pitch (MIDI, C1) considered by the log-frequency filterbank.
const CQ_MIN_MIDI: f64 = 24.0;
const MIN_FREQ_HZ: f64 = 27.5;

pub fn hz_to_midi(hz: f64) -> f64 {
    69.0 + 12.0 * (hz / 440.0).log2()
}

fn normalize_rows(data: &mut [f64]) {
    for row in data.chunks_mut(CHROMA_BINS) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Folds each bin's power into its nearest semitone's pitch class.
pub fn stft_chroma(spec: &Spectrogram, sample_rate: f64) -> Tensor {
    let classes: Vec<Option<usize>> = (0..spec.bins)
        .map(|k| {
            let f = spec.bin_frequency(k, sample_rate);
            (MIN_FREQ_HZ..sample_rate / 2.0)
                .contains(&f)
                .then(|| (hz_to_midi(f).round() as i64).rem_euclid(12) as usize)
        })
        .collect();
    let power = spec.power();
    let mut data = vec![0.0; spec.frames * CHROMA_BINS];
    for t in 0..spec.frames {
        for (k, class) in classes.iter().enumerate() {
            if let Some(c) = class {
                data[t * CHROMA_BINS + c] += power[t * spec.bins + k];
            }
        }
    }
    normalize_rows(&mut data);
    Tensor::new(&[spec.frames, CHROMA_BINS], data).expect("consistent chroma layout")
}

/// Constant-Q style chroma: semitone-spaced triangular filters on a
/// log-frequency axis (each spanning ±1 semitone), folded by pitch class.
pub fn cq_chroma(spec: &Spectrogram, sample_rate: f64) -> Tensor {
    // (bin, pitch class, weight)
    let mut taps = Vec::new();
    for k in 1..spec.bins {
        let f = spec.bin_frequency(k, sample_rate);
        if f >= sample_rate / 2.0 {
            continue;
        }
        let p = hz_to_midi(f);
        let below = p.floor();
        for center in [below, below + 1.0] {
            let w = 1.0 - (p - center).abs();
            if center >= CQ_MIN_MIDI && w > 0.0 {
                taps.push((k, (center as i64).rem_euclid(12) as usize, w));
            }
        }
    }
    let power = spec.power();
    let mut data = vec![0.0; spec.frames * CHROMA_BINS];
    for t in 0..spec.frames {
        for &(k, c, w) in &taps {
            data[t * CHROMA_BINS + c] += w * power[t * spec.bins + k];
        }
    }
    normalize_rows(&mut data);
    Tensor::new(&[spec.frames, CHROMA_BINS], data).expect("consistent chroma layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a440_is_pitch_class_nine() {
        assert_eq!((hz_to_midi(440.0).round() as i64).rem_euclid(12), 9);
        assert_eq!((hz_to_midi(261.6256).round() as i64).rem_euclid(12), 0);
    }
}
