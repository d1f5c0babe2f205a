use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// One-sided complex spectrogram, `frames × bins` row-major with
/// `bins = fft_size / 2 + 1`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub fft_size: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// `|X|^2`, same layout as `data`.
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }

    /// Center frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize, sample_rate: f64) -> f64 {
        k as f64 * sample_rate / self.fft_size as f64
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame `k` covers samples `[k·hop, k·hop + fft_size)`, zero-padded past
/// the end; there are `ceil(len / hop)` frames.
pub fn stft(signal: &[f64], fft_size: usize, hop: usize) -> Result<Spectrogram> {
    if !fft_size.is_power_of_two() || fft_size < 2 {
        return Err(Error::Config(format!("fft_size {fft_size} is not a power of two")));
    }
    if hop == 0 {
        return Err(Error::Config("hop length must be positive".into()));
    }
    let bins = fft_size / 2 + 1;
    let frames = signal.len().div_ceil(hop);
    let window = hann(fft_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    for k in 0..frames {
        let start = k * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let x = signal.get(start + i).copied().unwrap_or(0.0);
            *b = Complex64::new(x * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        fft_size,
        data,
    })
}
