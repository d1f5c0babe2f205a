use std::f64::consts::PI;

use proptest::prelude::*;
use rustfft::num_complex::Complex64;
use spatial_motion::audio::*;

const SR: f64 = 24000.0;
const FFT: usize = 2048;
const HOP: usize = 800;

fn sine(freq: f64, amp: f64, seconds: f64) -> Vec<f64> {
    (0..(SR * seconds) as usize)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / SR).sin())
        .collect()
}

fn naive_dft_frame(signal: &[f64], start: usize, n: usize) -> Vec<Complex64> {
    let w = stft::hann(n);
    (0..n / 2 + 1)
        .map(|k| {
            (0..n).fold(Complex64::new(0.0, 0.0), |acc, i| {
                let x = signal.get(start + i).copied().unwrap_or(0.0) * w[i];
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                acc + Complex64::new(x * ang.cos(), x * ang.sin())
            })
        })
        .collect()
}

#[test]
fn stft_matches_direct_dft_on_one_second() {
    let x: Vec<f64> = (0..SR as usize)
        .map(|i| 0.3 * (i as f64 * 0.013).sin() + 0.2 * ((i * 7919) % 101) as f64 / 101.0 - 0.1)
        .collect();
    let s = stft(&x, FFT, HOP).unwrap();
    assert_eq!(s.frames, 30);
    for t in [0, 11, 29] {
        let oracle = naive_dft_frame(&x, t * HOP, FFT);
        let err = s
            .frame(t)
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "frame {t}: {err}");
    }
}

#[test]
fn bin_centered_sine_stays_in_its_main_lobe() {
    let k = 40;
    let freq = k as f64 * SR / FFT as f64;
    let s = stft(&sine(freq, 1.0, 0.5), FFT, HOP).unwrap();
    let p = s.power();
    let row = &p[0..s.bins];
    let total: f64 = row.iter().sum();
    let lobe: f64 = row[k - 1..=k + 1].iter().sum();
    assert!(lobe / total > 0.95);
    let argmax = (0..s.bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(argmax, k);
}

#[test]
fn zero_signal_has_zero_spectrum() {
    let s = stft(&vec![0.0; 5000], FFT, HOP).unwrap();
    assert!(s.data.iter().all(|c| c.norm() == 0.0));
}

#[test]
fn parseval_holds_per_frame() {
    let x: Vec<f64> = (0..4000).map(|i| ((i * i) % 97) as f64 / 97.0 - 0.5).collect();
    let s = stft(&x, FFT, HOP).unwrap();
    let w = stft::hann(FFT);
    for t in 0..s.frames {
        let time: f64 = (0..FFT)
            .map(|i| (x.get(t * HOP + i).copied().unwrap_or(0.0) * w[i]).powi(2))
            .sum();
        let f = s.frame(t);
        let one_sided: f64 = f
            .iter()
            .enumerate()
            .map(|(k, c)| if k == 0 || k == FFT / 2 { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
            .sum();
        let spectral = one_sided / FFT as f64;
        assert!((time - spectral).abs() <= 1e-6 * time.max(1e-300), "frame {t}");
    }
}

#[test]
fn silence_gives_constant_mfcc_and_zero_delta() {
    let s = stft(&vec![0.0; 24000], FFT, HOP).unwrap();
    let m = mfcc_with_delta(&s, SR, 128, 20);
    assert_eq!(m.shape(), &[30, 40]);
    for t in 1..30 {
        assert_eq!(&m.row(t)[..20], &m.row(0)[..20]);
        assert!(m.row(t)[20..].iter().all(|d| *d == 0.0));
    }
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
}

#[test]
fn a4_and_a5_land_on_pitch_class_a() {
    for freq in [440.0, 880.0] {
        let s = stft(&sine(freq, 0.5, 1.0), FFT, HOP).unwrap();
        for chroma in [stft_chroma(&s, SR), cq_chroma(&s, SR)] {
            // frames fully inside the signal
            for t in 0..25 {
                let row = chroma.row(t);
                assert_eq!(argmax(row), 9, "{freq} Hz frame {t}");
                assert!(row[9] > 0.9, "{freq} Hz frame {t}: {}", row[9]);
            }
        }
    }
}

#[test]
fn silent_chroma_is_zero() {
    let s = stft(&vec![0.0; 8000], FFT, HOP).unwrap();
    assert!(stft_chroma(&s, SR).data().iter().all(|v| *v == 0.0));
    assert!(cq_chroma(&s, SR).data().iter().all(|v| *v == 0.0));
}

fn click_train(clicks: usize, rate_hz: f64, tail_s: f64) -> Vec<f64> {
    let period = (SR / rate_hz) as usize;
    let mut x = vec![0.0; clicks * period + (tail_s * SR) as usize];
    for c in 0..clicks {
        let at = 4000 + c * period;
        for s in x.iter_mut().skip(at).take(6) {
            *s = 0.9;
        }
    }
    x
}

#[test]
fn silence_has_no_rhythm() {
    let s = stft(&vec![0.0; 48000], FFT, HOP).unwrap();
    let r = rhythm_features(&s, SR, 128, 1068, 30.0);
    assert_eq!(r.shape(), &[60, 1070]);
    assert!(r.data().iter().all(|v| *v == 0.0));
}

#[test]
fn two_hertz_clicks_peak_at_half_second_lag() {
    let x = click_train(10, 2.0, 1.0);
    let s = stft(&x, FFT, HOP).unwrap();
    let onset = onset_strength(&s, SR, 128);
    let tg = tempogram(&onset, 1068);
    let mid = s.frames / 2;
    let row = &tg.row(mid)[1..];
    assert_eq!(argmax(row) + 1, 15);
}

#[test]
fn ten_clicks_give_ten_beats() {
    let x = click_train(10, 2.0, 1.0);
    let s = stft(&x, FFT, HOP).unwrap();
    let r = rhythm_features(&s, SR, 128, 1068, 30.0);
    let beats: f64 = (0..s.frames).map(|t| r.row(t)[1069]).sum();
    assert!((beats - 10.0).abs() <= 1.0, "{beats}");
}

#[test]
fn energy_closed_forms() {
    let e = energy_features(&vec![0.5; 24000], FFT, HOP, 0.01);
    assert!((0..30).all(|t| e.row(t) == [0.5, 1.0]));
    let amp = 0.3;
    let e = energy_features(&sine(437.0, amp, 1.0), FFT, HOP, 0.01);
    for t in 0..25 {
        let rms = e.row(t)[0];
        assert!((rms - amp / 2f64.sqrt()).abs() < 0.01 * amp / 2f64.sqrt(), "{rms}");
    }
    let e = energy_features(&vec![0.005; 24000], FFT, HOP, 0.01);
    assert!((0..30).all(|t| e.row(t)[1] == 0.0));
}

fn clip_48k(left: Vec<f64>, right: Vec<f64>) -> AudioClip {
    AudioClip::new(48000, left, right).unwrap()
}

fn tone_48k(seconds: f64, amp: f64) -> Vec<f64> {
    (0..(48000.0 * seconds) as usize)
        .map(|i| {
            let t = i as f64 / 48000.0;
            amp * (2.0 * PI * 330.0 * t).sin() * (0.5 + 0.5 * (2.0 * PI * 1.5 * t).sin())
        })
        .collect()
}

#[test]
fn binaural_output_shape_and_symmetry() {
    let x = tone_48k(2.0, 0.4);
    let m = extract_binaural(&clip_48k(x.clone(), x), &FeatureConfig::default(), 45).unwrap();
    assert_eq!((m.frames, m.values.len()), (45, 45 * FEATURE_WIDTH));
    for t in 0..m.frames {
        let row = m.row(t);
        assert_eq!(&row[..EAR_WIDTH], &row[EAR_WIDTH..]);
    }
}

#[test]
fn attenuated_right_ear_has_lower_rms_when_active() {
    let x = tone_48k(2.0, 0.4);
    let quiet: Vec<f64> = x.iter().map(|v| v * 0.1).collect();
    let m = extract_binaural(&clip_48k(x, quiet), &FeatureConfig::default(), 60).unwrap();
    let l_rms = block_range(Ear::Left, "rms").unwrap().start;
    let r_rms = block_range(Ear::Right, "rms").unwrap().start;
    let l_active = block_range(Ear::Left, "active").unwrap().start;
    let mut active = 0;
    for t in 0..m.frames {
        let row = m.row(t);
        if row[l_active] == 1.0 {
            active += 1;
            assert!(row[l_rms] > row[r_rms], "frame {t}");
        }
    }
    assert!(active > 50);
}

#[test]
fn output_is_edge_padded_to_target() {
    // 1 s of audio is 30 frames; ask for all of them
    let x = tone_48k(1.0, 0.2);
    let m = extract_binaural(&clip_48k(x.clone(), x), &FeatureConfig::default(), 30).unwrap();
    assert_eq!(m.frames, 30);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn features_are_finite_for_any_finite_audio(
        samples in proptest::collection::vec(-1.0f64..1.0, 8000..9600),
        gain in prop_oneof![Just(0.0), Just(1e-6), Just(1.0)],
    ) {
        let left: Vec<f64> = samples.iter().map(|s| s * gain).collect();
        let right: Vec<f64> = samples.iter().rev().copied().collect();
        let m = extract_binaural(&clip_48k(left, right), &FeatureConfig::default(), 5).unwrap();
        prop_assert!(m.values.iter().all(|v| v.is_finite()));
    }
}
