use std::f64::consts::PI;

use super::stft::Spectrogram;
use crate::math::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;
const DELTA_HALF_WIDTH: usize = 4;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peak 1, evenly spaced on the mel scale from 0 Hz
/// to Nyquist. Returns `bands × bins`.
pub fn mel_filterbank(bands: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = fft_size / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / fft_size as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Mel band power per frame, `frames × bands`.
pub fn mel_power(power: &[f64], frames: usize, bank: &[Vec<f64>]) -> Vec<f64> {
    let bins = bank.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(frames * bank.len());
    for t in 0..frames {
        let row = &power[t * bins..(t + 1) * bins];
        for filt in bank {
            out.push(filt.iter().zip(row).map(|(w, p)| w * p).sum());
        }
    }
    out
}

/// Orthonormal DCT-II of `x`, first `n` coefficients.
pub fn dct2(x: &[f64], n: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * m)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * scale
        })
        .collect()
}

/// Least-squares slope over a centered 9-frame window, clipped at the
/// sequence ends. `x` is `frames × width`.
pub fn delta(x: &[f64], frames: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; frames * width];
    for t in 0..frames {
        let lo = t.saturating_sub(DELTA_HALF_WIDTH);
        let hi = (t + DELTA_HALF_WIDTH).min(frames.saturating_sub(1));
        let n = (hi - lo + 1) as f64;
        if n < 2.0 {
            continue;
        }
        let tm = (lo + hi) as f64 / 2.0;
        let denom: f64 = (lo..=hi).map(|s| (s as f64 - tm).powi(2)).sum();
        for c in 0..width {
            // centering on x[t] leaves the slope unchanged and makes flat input exact
            let anchor = x[t * width + c];
            let num: f64 = (lo..=hi).map(|s| (s as f64 - tm) * (x[s * width + c] - anchor)).sum();
            out[t * width + c] = num / denom;
        }
    }
    out
}

/// `frames × (2·count)`: MFCCs followed by their deltas.
pub fn mfcc_with_delta(spec: &Spectrogram, sample_rate: f64, bands: usize, count: usize) -> Tensor {
    let bank = mel_filterbank(bands, spec.fft_size, sample_rate);
    let mel = mel_power(&spec.power(), spec.frames, &bank);
    let mut mfcc = Vec::with_capacity(spec.frames * count);
    for row in mel.chunks(bands) {
        let logs: Vec<f64> = row.iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
        mfcc.extend(dct2(&logs, count));
    }
    let d = delta(&mfcc, spec.frames, count);
    let mut data = Vec::with_capacity(spec.frames * 2 * count);
    for t in 0..spec.frames {
        data.extend_from_slice(&mfcc[t * count..(t + 1) * count]);
        data.extend_from_slice(&d[t * count..(t + 1) * count]);
    }
    Tensor::new(&[spec.frames, 2 * count], data).expect("consistent mfcc layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_roundtrips() {
        for hz in [0.0, 100.0, 1000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn dct_of_constant_has_only_dc() {
        let c = dct2(&[2.0; 16], 5);
        assert!((c[0] - 2.0 * 4.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn filterbank_covers_every_interior_bin() {
        let bank = mel_filterbank(128, 2048, 24000.0);
        assert_eq!(bank.len(), 128);
        for k in 1..1024 {
            assert!(bank.iter().any(|f| f[k] > 0.0), "bin {k}");
        }
    }

    #[test]
    fn delta_is_exact_on_a_ramp_including_edges() {
        let x: Vec<f64> = (0..12).map(|t| 0.25 * t as f64 - 1.0).collect();
        for d in delta(&x, 12, 1) {
            assert!((d - 0.25).abs() < 1e-12);
        }
    }
}
