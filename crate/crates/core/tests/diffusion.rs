use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_motion::diffusion::*;
use spatial_motion::math::Tensor;
use spatial_motion::Result;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn q_sample_boundaries() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let x0 = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let noise = Tensor::new(&[3], vec![0.3, 0.1, -0.7]).unwrap();
    assert_eq!(q_sample(&x0, 0, &noise, &s).unwrap(), x0);
    let t = 400;
    let out = q_sample(&x0, t, &Tensor::zeros(&[3]), &s).unwrap();
    for (o, x) in out.data().iter().zip(x0.data()) {
        assert_eq!(*o, s.alpha_bar(t).sqrt() * x);
    }
}

#[test]
fn q_sample_moments_match_closed_form() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let t = 300;
    let x0 = 1.7;
    let n = 100_000;
    let noise = Tensor::randn(&[n], &mut rng(7));
    let xs = q_sample(&Tensor::full(&[n], x0), t, &noise, &s).unwrap();
    let mean = xs.data().iter().sum::<f64>() / n as f64;
    let std = (xs.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let want_mean = s.alpha_bar(t).sqrt() * x0;
    let want_std = (1.0 - s.alpha_bar(t)).sqrt();
    assert!((mean - want_mean).abs() < 0.01 * want_mean.abs(), "{mean} vs {want_mean}");
    assert!((std - want_std).abs() < 0.01 * want_std, "{std} vs {want_std}");
}

#[test]
fn last_step_is_deterministic() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let x_t = Tensor::new(&[2], vec![0.4, -0.1]).unwrap();
    let x0 = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let a = p_sample_step(&x_t, 1, &x0, &s, &Tensor::full(&[2], 5.0)).unwrap();
    let b = p_sample_step(&x_t, 1, &x0, &s, &Tensor::full(&[2], -5.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn posterior_mean_with_true_x0_is_the_marginal_mean() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let x0 = Tensor::new(&[3], vec![0.8, -1.2, 2.0]).unwrap();
    for t in [2, 50, 500, 999] {
        let x_t = q_sample(&x0, t, &Tensor::zeros(&[3]), &s).unwrap();
        let mean = p_sample_step(&x_t, t, &x0, &s, &Tensor::zeros(&[3])).unwrap();
        for (m, x) in mean.data().iter().zip(x0.data()) {
            let want = s.alpha_bar(t - 1).sqrt() * x;
            assert!((m - want).abs() < 1e-9, "t={t}: {m} vs {want}");
        }
    }
}

#[test]
fn posterior_variance_matches_monte_carlo() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let t = 600;
    let n = 100_000;
    let x_t = Tensor::full(&[n], 0.3);
    let x0 = Tensor::full(&[n], -0.5);
    let out = p_sample_step(&x_t, t, &x0, &s, &Tensor::randn(&[n], &mut rng(3))).unwrap();
    let mean = out.data().iter().sum::<f64>() / n as f64;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let want = s.posterior_variance(t);
    assert!((var - want).abs() < 0.02 * want, "{var} vs {want}");
}

#[test]
fn zero_model_collapses_toward_zero() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let zero = |x: &Tensor, _t: usize| -> Result<Tensor> { Ok(Tensor::zeros(x.shape())) };
    let out = sample_tensor(&zero, &[60, 300], &s, &full_steps(&s), &mut rng(1)).unwrap();
    let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
    assert!(mean.abs() < 0.05);
    assert!(out.data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn oracle_denoiser_reconstructs_fixture() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let fixture = Tensor::randn(&[30, 300], &mut rng(11));
    let oracle = |_x: &Tensor, _t: usize| -> Result<Tensor> { Ok(fixture.clone()) };
    let out = sample_tensor(&oracle, &[30, 300], &s, &full_steps(&s), &mut rng(2)).unwrap();
    let rmse = (out
        .data()
        .iter()
        .zip(fixture.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / out.numel() as f64)
        .sqrt();
    assert!(rmse < 0.05, "{rmse}");
}

#[test]
fn sampling_is_bit_identical_for_a_seed() {
    let s = NoiseSchedule::cosine(50).unwrap();
    let shrink = |x: &Tensor, t: usize| -> Result<Tensor> {
        Tensor::new(x.shape(), x.data().iter().map(|v| v * 0.5 + t as f64 * 1e-3).collect())
    };
    let a = sample_tensor(&shrink, &[10, 300], &s, &full_steps(&s), &mut rng(9)).unwrap();
    let b = sample_tensor(&shrink, &[10, 300], &s, &full_steps(&s), &mut rng(9)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn reduced_step_counts_all_produce_valid_motion() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let shrink = |x: &Tensor, _t: usize| -> Result<Tensor> {
        Tensor::new(x.shape(), x.data().iter().map(|v| v * 0.1).collect())
    };
    for count in [1000, 100, 4] {
        let steps = strided_steps(&s, count).unwrap();
        assert_eq!(steps.len(), count);
        let m = sample(&shrink, 20, 30.0, &s, &steps, &mut rng(4)).unwrap();
        assert_eq!((m.frames, m.joints), (20, 25));
        assert!(m.positions.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn shape_changing_model_is_a_contract_error() {
    let s = NoiseSchedule::cosine(10).unwrap();
    let bad = |_x: &Tensor, _t: usize| -> Result<Tensor> { Ok(Tensor::zeros(&[1])) };
    let err = sample_tensor(&bad, &[4, 300], &s, &full_steps(&s), &mut rng(0)).unwrap_err();
    assert!(matches!(err, spatial_motion::Error::Contract(_)));
}
