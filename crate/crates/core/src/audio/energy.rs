use crate::math::Tensor;

pub const ACTIVE_THRESHOLD: f64 = 0.01;

/// `frames × 2`: RMS over each frame's samples `[k·hop, k·hop + window)`
/// (only samples inside the clip are averaged), then the activity flag.
pub fn energy_features(signal: &[f64], window: usize, hop: usize, threshold: f64) -> Tensor {
    let frames = signal.len().div_ceil(hop);
    let mut data = Vec::with_capacity(frames * 2);
    for k in 0..frames {
        let start = k * hop;
        let seg = &signal[start..(start + window).min(signal.len())];
        let rms = (seg.iter().map(|x| x * x).sum::<f64>() / seg.len() as f64).sqrt();
        data.push(rms);
        data.push(if rms > threshold { 1.0 } else { 0.0 });
    }
    Tensor::new(&[frames, 2], data).expect("consistent energy layout")
}
