//! Band-limited sample-rate conversion with a Blackman-windowed sinc kernel.

use std::f64::consts::PI;

const HALF_TAPS: f64 = 32.0;

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resamples `signal` from `from` Hz to `to` Hz. Output length is
/// `ceil(len * to / from)`; when downsampling the kernel low-passes at 95% of
/// the new Nyquist frequency.
pub fn resample(signal: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || signal.is_empty() {
        return signal.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = 0.5 * ratio.min(1.0) * 0.95;
    let width = HALF_TAPS / ratio.min(1.0);
    let out_len = (signal.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    let n = signal.len() as isize;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = ((t - width).ceil() as isize).max(0);
            let hi = ((t + width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                acc += signal[i as usize] * 2.0 * cutoff * sinc(2.0 * cutoff * d) * blackman(d / width);
            }
            acc
        })
        .collect()
}
