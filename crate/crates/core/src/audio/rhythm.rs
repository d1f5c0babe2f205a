use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::mel::{mel_filterbank, mel_power, LOG_FLOOR};
use super::stft::{hann, Spectrogram};
use crate::math::Tensor;

/// Dynamic range kept below the loudest mel cell before differencing.
const TOP_DB: f64 = 80.0;
/// Tempo search range, beats per minute.
const MIN_BPM: f64 = 30.0;
const MAX_BPM: f64 = 300.0;

/// Mean over mel bands of the half-wave-rectified frame-to-frame increase in
/// log-mel power (dB). The first frame is zero.
pub fn onset_strength(spec: &Spectrogram, sample_rate: f64, bands: usize) -> Vec<f64> {
    let bank = mel_filterbank(bands, spec.fft_size, sample_rate);
    let mut db: Vec<f64> = mel_power(&spec.power(), spec.frames, &bank)
        .into_iter()
        .map(|p| 10.0 * p.max(LOG_FLOOR).log10())
        .collect();
    let top = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    db.iter_mut().for_each(|v| *v = v.max(top - TOP_DB));
    let mut onset = vec![0.0; spec.frames];
    for t in 1..spec.frames {
        let cur = &db[t * bands..(t + 1) * bands];
        let prev = &db[(t - 1) * bands..t * bands];
        onset[t] = cur.iter().zip(prev).map(|(c, p)| (c - p).max(0.0)).sum::<f64>() / bands as f64;
    }
    onset
}

fn autocorrelation(x: &[f64], lags: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = (2 * x.len()).next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    fwd.process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex64::new(c.norm_sqr(), 0.0));
    inv.process(&mut buf);
    buf.iter().take(lags).map(|c| c.re / n as f64).collect()
}

/// Local autocorrelation tempogram: for every frame, the autocorrelation of a
/// Hann-tapered `window`-frame slice of the onset curve centered on it (zero
/// outside the clip), at lags `0..window`, divided by its lag-0 value.
pub fn tempogram(onset: &[f64], window: usize) -> Tensor {
    let frames = onset.len();
    let taper = hann(window);
    let half = window / 2;
    let mut planner = FftPlanner::new();
    let mut data = Vec::with_capacity(frames * window);
    let mut slice = vec![0.0; window];
    for t in 0..frames {
        for (i, s) in slice.iter_mut().enumerate() {
            let idx = t as isize - half as isize + i as isize;
            let v = if idx >= 0 && (idx as usize) < frames {
                onset[idx as usize]
            } else {
                0.0
            };
            *s = v * taper[i];
        }
        let ac = autocorrelation(&slice, window, &mut planner);
        if ac[0] > 1e-12 {
            data.extend(ac.iter().map(|v| v / ac[0]));
        } else {
            data.extend(std::iter::repeat_n(0.0, window));
        }
    }
    Tensor::new(&[frames, window], data).expect("consistent tempogram layout")
}

/// Dominant beat period in frames from the global onset autocorrelation.
pub fn estimate_period(onset: &[f64], fps: f64) -> Option<usize> {
    let min_lag = (60.0 * fps / MAX_BPM).round().max(1.0) as usize;
    let max_lag = ((60.0 * fps / MIN_BPM).round() as usize).min(onset.len().saturating_sub(1));
    if max_lag < min_lag {
        return None;
    }
    let ac = autocorrelation(onset, max_lag + 1, &mut FftPlanner::new());
    let (lag, best) = (min_lag..=max_lag)
        .map(|l| (l, ac[l]))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    (best > 1e-12).then_some(lag)
}

/// One-hot beat frames: peaks of the onset curve after Gaussian smoothing at
/// a width tied to the estimated period, at least half a period apart.
pub fn beat_track(onset: &[f64], fps: f64) -> Vec<f64> {
    let n = onset.len();
    let mut beats = vec![0.0; n];
    let Some(period) = estimate_period(onset, fps) else {
        return beats;
    };
    let sigma = (period as f64 / 8.0).max(1.0);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let smooth: Vec<f64> = (0..n as isize)
        .map(|t| {
            (-radius..=radius)
                .filter_map(|d| {
                    let i = t + d;
                    (i >= 0 && (i as usize) < n).then(|| onset[i as usize] * kernel[(d + radius) as usize])
                })
                .sum()
        })
        .collect();
    let mean = smooth.iter().sum::<f64>() / n as f64;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let threshold = mean + 0.5 * std;
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&t| {
            let left = if t > 0 { smooth[t - 1] } else { f64::NEG_INFINITY };
            let right = if t + 1 < n { smooth[t + 1] } else { f64::NEG_INFINITY };
            smooth[t] > left && smooth[t] >= right && smooth[t] > threshold && smooth[t] > 0.0
        })
        .collect();
    peaks.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]));
    let min_gap = period.div_ceil(2);
    let mut chosen: Vec<usize> = Vec::new();
    for p in peaks {
        if chosen.iter().all(|&c| c.abs_diff(p) >= min_gap) {
            chosen.push(p);
        }
    }
    for c in chosen {
        beats[c] = 1.0;
    }
    beats
}

/// `frames × (2 + window)`: onset strength, tempogram, beats.
pub fn rhythm_features(spec: &Spectrogram, sample_rate: f64, bands: usize, window: usize, fps: f64) -> Tensor {
    let onset = onset_strength(spec, sample_rate, bands);
    let tg = tempogram(&onset, window);
    let beats = beat_track(&onset, fps);
    let width = window + 2;
    let mut data = Vec::with_capacity(spec.frames * width);
    for t in 0..spec.frames {
        data.push(onset[t]);
        data.extend_from_slice(tg.row(t));
        data.push(beats[t]);
    }
    Tensor::new(&[spec.frames, width], data).expect("consistent rhythm layout")
}
