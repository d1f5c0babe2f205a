use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

/// Reads a 2-channel RIFF WAV (16/24-bit PCM or 32-bit float).
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 2 {
        return Err(Error::format(path, format!("expected 2 channels, found {}", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>(),
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
        }
        (fmt, bits) => return Err(Error::format(path, format!("unsupported sample format {fmt:?}/{bits}"))),
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    let left = samples.iter().step_by(2).copied().collect();
    let right = samples.iter().skip(1).step_by(2).copied().collect();
    AudioClip::new(spec.sample_rate, left, right).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a 2-channel 32-bit float WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 2,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let fail = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut w = WavWriter::create(path, spec).map_err(fail)?;
    for (l, r) in clip.left.iter().zip(&clip.right) {
        w.write_sample(*l as f32).map_err(fail)?;
        w.write_sample(*r as f32).map_err(fail)?;
    }
    w.finalize().map_err(fail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_wav_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(24000, vec![0.5, -0.25, 0.0], vec![0.125, 1.0, -1.0]).unwrap();
        write_wav(&path, &clip).unwrap();
        assert_eq!(read_wav(&path).unwrap(), clip);
    }

    #[test]
    fn pcm16_is_scaled_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 48000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for s in [16384i16, -32768, 0, 8192] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.left, vec![0.5, 0.0]);
        assert_eq!(clip.right, vec![-1.0, 0.25]);
    }

    #[test]
    fn mono_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format { .. })));
    }
}
