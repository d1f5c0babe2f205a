use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_motion::audio::FEATURE_WIDTH;
use spatial_motion::denoiser::{
    train, Conditions, DenoiserConfig, DenoiserModel, SslMode, TrainConfig, TrainingSample, METRICS_LOG, MODEL_CARD,
};
use spatial_motion::losses::LossWeights;
use spatial_motion::math::{gradcheck, AdamWConfig, Bound, GradcheckOptions, Tape, Tensor};
use spatial_motion::skeleton::rotation::{rot_x, rot_y};
use spatial_motion::skeleton::{
    assemble_vector, detect_foot_contacts, forward_kinematics, ContactThresholds, MotionSequence, SkeletonSpec,
    JOINT_COUNT,
};
use spatial_motion::Error;

fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_dim: 16,
        heads: 2,
        layers: 1,
        ff_dim: 32,
        max_frames: 8,
        ..DenoiserConfig::default()
    }
}

fn random_conditions(frames: usize, genre: usize, seed: u64) -> Conditions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Conditions::single(
        Tensor::randn(&[frames, FEATURE_WIDTH], &mut rng),
        Tensor::randn(&[frames, 3], &mut rng),
        genre,
    )
    .unwrap()
}

/// A small swaying walk along +z with FK-consistent positions.
fn walk_sample(frames: usize, phase: f64) -> TrainingSample {
    let skel = SkeletonSpec::neutral();
    let mut positions = Vec::new();
    let mut rotations = Vec::new();
    for t in 0..frames {
        let s = t as f64 / 30.0;
        let mut rots = vec![Matrix3::identity(); JOINT_COUNT];
        rots[0] = rot_y(0.2 * (s + phase).sin());
        for (j, r) in rots.iter_mut().enumerate().skip(1) {
            *r = rot_x(0.3 * (4.0 * s + j as f64 + phase).sin());
        }
        let root = Vector3::new(0.0, 0.9, 0.5 * s);
        positions.push(forward_kinematics(&skel, &root, &rots).unwrap());
        rotations.push(rots);
    }
    let motion = MotionSequence::from_parts(30.0, &positions, &rotations).unwrap();
    let masks = detect_foot_contacts(
        &motion.positions,
        JOINT_COUNT,
        30.0,
        skel.foot_joints(),
        ContactThresholds::default(),
    )
    .unwrap();
    let contacts = (0..frames)
        .flat_map(|t| masks.iter().map(move |m| if m[t] { 1.0 } else { 0.0 }))
        .collect();
    TrainingSample {
        name: format!("walk{phase}"),
        x0: assemble_vector(&motion),
        conditions: random_conditions(frames, 1, 7),
        contacts: Tensor::new(&[frames, masks.len()], contacts).unwrap(),
    }
}

#[test]
fn embed_conditions_token_count_is_frames_plus_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = DenoiserModel::new(tiny_config(), &mut rng).unwrap();
    for frames in [1, 3, 8] {
        let tokens = model.condition_tokens(5, &random_conditions(frames, 0, 1)).unwrap();
        assert_eq!(tokens.shape(), [1, frames + 2, 16]);
    }
}

#[test]
fn condition_width_mismatch_is_a_contract_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = DenoiserModel::new(tiny_config(), &mut rng).unwrap();
    let bad = Conditions::single(Tensor::zeros(&[4, 10]), Tensor::zeros(&[4, 3]), 0).unwrap();
    assert!(matches!(model.condition_tokens(1, &bad), Err(Error::Contract(_))));
    let genre = random_conditions(4, 3, 0);
    assert!(matches!(model.condition_tokens(1, &genre), Err(Error::Index { .. })));
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn genre_and_timestep_tokens_are_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = DenoiserModel::new(tiny_config(), &mut rng).unwrap();
    let d = 16;
    let a = model.condition_tokens(0, &random_conditions(4, 0, 9)).unwrap();
    let b = model.condition_tokens(999, &random_conditions(4, 2, 9)).unwrap();
    assert!(cosine(&a.data()[..d], &b.data()[..d]) < 0.999, "timestep tokens");
    assert_ne!(&a.data()[d..2 * d], &b.data()[d..2 * d], "genre tokens");
    // the audio/SSL stream is identical
    assert_eq!(&a.data()[2 * d..], &b.data()[2 * d..]);
}

#[test]
fn ssl_modes_change_token_counts() {
    for (mode, extra) in [(SslMode::Fused, 0), (SslMode::SeparateStream, 4), (SslMode::Static, 1)] {
        let cfg = DenoiserConfig {
            ssl_mode: mode,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let c = random_conditions(4, 1, 2);
        assert_eq!(model.condition_tokens(1, &c).unwrap().shape()[1], 4 + 2 + extra);
        let x = Tensor::randn(&[4, 300], &mut rng);
        assert_eq!(model.predict_x0(&x, 3, &c).unwrap().shape(), [4, 300]);
    }
}

#[test]
fn output_shape_at_full_clip_length() {
    let cfg = DenoiserConfig {
        latent_dim: 16,
        heads: 2,
        layers: 1,
        ff_dim: 32,
        max_frames: 240,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = DenoiserModel::new(cfg, &mut rng).unwrap();
    let x = Tensor::randn(&[240, 300], &mut rng);
    let out = model.predict_x0(&x, 500, &random_conditions(240, 2, 4)).unwrap();
    assert_eq!(out.shape(), [240, 300]);
    assert!(out.is_finite());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = DenoiserModel::new(tiny_config(), &mut rng).unwrap();
    let c = random_conditions(6, 0, 1);
    let x = Tensor::randn(&[6, 300], &mut rng);
    assert_eq!(model.predict_x0(&x, 10, &c).unwrap(), model.predict_x0(&x, 10, &c).unwrap());
}

#[test]
fn swapping_motion_tokens_changes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = DenoiserModel::new(tiny_config(), &mut rng).unwrap();
    let c = random_conditions(5, 1, 3);
    let x = Tensor::randn(&[5, 300], &mut rng);
    let mut swapped = x.clone();
    let (r1, r3) = (x.row(1).to_vec(), x.row(3).to_vec());
    swapped.data_mut()[300..600].copy_from_slice(&r3);
    swapped.data_mut()[900..1200].copy_from_slice(&r1);
    let a = model.predict_x0(&x, 10, &c).unwrap();
    let b = model.predict_x0(&swapped, 10, &c).unwrap();
    // without positional embeddings row 1 of b would equal row 3 of a
    let diff: f64 = a.row(3).iter().zip(b.row(1)).map(|(p, q)| (p - q).abs()).sum();
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn miniature_end_to_end_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = DenoiserModel::new(tiny_config(), &mut rng).unwrap();
    let frames = 3;
    let c = random_conditions(frames, 2, 5);
    let x = Tensor::randn(&[1, frames, 300], &mut rng);
    let weights = Tensor::randn(&[1, frames, 300], &mut rng);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let chosen = [
        "time.0.weight",
        "genre.embedding",
        "cond.0.weight",
        "motion.1.bias",
        "block0.ln1.gamma",
        "block0.qkv.weight",
        "block0.ff1.weight",
        "final_ln.beta",
        "head.weight",
    ];
    let inputs: Vec<Tensor> = chosen
        .iter()
        .map(|n| model.params.by_name(n).unwrap().clone().with_grad())
        .collect();
    let report = gradcheck(
        &inputs,
        |tape: &mut Tape, vars| {
            let bound = Bound::from_vars(
                names
                    .iter()
                    .zip(model.params.iter())
                    .map(|(n, (_, t))| match chosen.iter().position(|c| c == n) {
                        Some(k) => vars[k],
                        None => tape.constant(t.clone()),
                    })
                    .collect(),
            );
            let xv = tape.constant(x.clone());
            let out = model.forward(tape, &bound, xv, &[17], &c)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(out, w)?;
            tape.sum(y)
        },
        GradcheckOptions {
            max_entries: Some(6),
            seed: 2,
            ..GradcheckOptions::default()
        },
    )
    .unwrap();
    assert_eq!(report.entries, 6 * chosen.len());
    assert!(report.passes(1e-4), "{report:?}");
}

fn overfit_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        seed: 21,
        diffusion_steps: 50,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn small_model(seed: u64) -> DenoiserModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenoiserModel::new(
        DenoiserConfig {
            latent_dim: 32,
            heads: 4,
            layers: 1,
            ff_dim: 64,
            max_frames: 8,
            ..DenoiserConfig::default()
        },
        &mut rng,
    )
    .unwrap()
}

#[test]
fn repeated_sample_loss_decreases() {
    let data = vec![walk_sample(8, 0.0); 4];
    let out = train(small_model(1), &data, &overfit_config(50), None, "test").unwrap();
    // unweighted, so the late weight bump does not show up as a rise
    let totals: Vec<f64> = out
        .history
        .iter()
        .map(|r| r.terms.named().iter().map(|(_, v)| v).sum())
        .collect();
    let smooth: Vec<f64> = totals.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for pair in smooth.chunks(10).collect::<Vec<_>>().windows(2) {
        let (a, b) = (pair[0][0], pair[1][0]);
        assert!(b < a, "smoothed loss rose: {a} -> {b}; curve {totals:?}");
    }
    assert!(smooth.last().unwrap() < &(0.5 * smooth[0]), "{totals:?}");
}

#[test]
fn lambda_schedule_flips_and_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![walk_sample(4, 0.0), walk_sample(4, 1.0)];
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..overfit_config(12)
    };
    let out = train(small_model(2), &data, &cfg, Some(dir.path()), "abc123").unwrap();
    for r in &out.history {
        let bumped = r.epoch >= 10;
        assert_eq!(r.weights.traj, if bumped { 3.0 } else { 1.0 }, "epoch {}", r.epoch);
        assert_eq!(r.weights.rot, if bumped { 3.0 } else { 1.0 });
        assert_eq!((r.weights.data, r.weights.geo, r.weights.foot), (1.0, 1.0, 1.0));
    }
    let log = std::fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 12);
    assert!(lines[9].ends_with("lambda=1,1,1,1,1"), "{}", lines[9]);
    assert!(lines[10].ends_with("lambda=1,1,1,3,3"), "{}", lines[10]);
    for e in [3, 6, 9, 12] {
        assert!(dir.path().join(format!("denoiser_epoch{e:05}.ckpt")).exists());
    }
    assert!(dir.path().join("denoiser_final.ckpt").exists());
    let card = std::fs::read_to_string(dir.path().join(MODEL_CARD)).unwrap();
    assert!(card.contains("seed: 21") && card.contains("data hash: abc123"));
    assert!(card.contains("\"latent_dim\":32"));
}

#[test]
fn fixed_seed_gives_identical_curves() {
    let data = vec![walk_sample(4, 0.0), walk_sample(4, 0.5), walk_sample(4, 1.0)];
    let cfg = overfit_config(5);
    let a = train(small_model(3), &data, &cfg, None, "").unwrap();
    let b = train(small_model(3), &data, &cfg, None, "").unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn misaligned_sample_is_rejected() {
    let mut bad = walk_sample(4, 0.0);
    bad.conditions = random_conditions(5, 0, 0);
    let err = train(small_model(0), &[bad], &overfit_config(1), None, "").unwrap_err();
    assert!(matches!(err, Error::Alignment { .. }), "{err:?}");
    let weights = LossWeights {
        data: -1.0,
        ..LossWeights::default()
    };
    let cfg = TrainConfig {
        weights,
        ..overfit_config(1)
    };
    assert!(train(small_model(0), &[walk_sample(4, 0.0)], &cfg, None, "").is_err());
}

#[test]
fn nan_inputs_abort_with_a_diagnostic() {
    let mut bad = walk_sample(4, 0.0);
    bad.x0.data_mut()[0] = f64::NAN;
    let err = train(small_model(0), &[bad], &overfit_config(1), None, "").unwrap_err();
    assert!(err.is_numeric(), "{err:?}");
}

#[test]
fn library_miniature_gradcheck_covers_every_parameter() {
    let model = DenoiserModel::new(spatial_motion::denoiser::miniature_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let report = spatial_motion::denoiser::miniature_gradcheck(3).unwrap();
    let expected: usize = model
        .params
        .iter()
        .map(|(_, t)| t.numel().min(spatial_motion::denoiser::MINIATURE_ENTRIES))
        .sum();
    assert_eq!(report.entries, expected);
    assert!(report.passes(1e-4), "{report:?}");
}
