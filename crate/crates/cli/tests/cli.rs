use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spatial_motion::skeleton::io::read_motion_file;

fn smotion(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smotion"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p).into_iter().map(|(q, b)| (Path::new(p.file_name().unwrap()).join(q), b)));
        } else {
            let bytes = std::fs::read(&p).unwrap();
            out.push((PathBuf::from(p.file_name().unwrap()), bytes));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_writes_counted_balanced_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = smotion(&["synth-data", "--count", "16", "--seed", "4", "--duration", "2", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("wrote 16 samples"));
    let genre_counts: Vec<usize> = text
        .lines()
        .filter_map(|l| l.strip_prefix("genre "))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(genre_counts.len(), 3);
    assert!(genre_counts.iter().max().unwrap() - genre_counts.iter().min().unwrap() <= 1);
    let scenario_total: usize = text
        .lines()
        .filter_map(|l| l.strip_prefix("scenario "))
        .map(|l| l.rsplit(' ').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(scenario_total, 16);
    assert!(out.join("manifest.json").is_file());
    assert_eq!(std::fs::read_dir(out.join("samples")).unwrap().count(), 32);
}

#[test]
fn synth_data_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = smotion(&["synth-data", "--count", "10", "--seed", "9", "--duration", "2", "--out", out.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(files(&a), files(&b));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[training]\nepoch = 3\n").unwrap();
    assert_eq!(code(&smotion(&["--config", bad.to_str().unwrap(), "gradcheck"], &[])), 1);
    assert_eq!(code(&smotion(&["gradcheck"], &[("SMOTION_TRAINING_NOPE", "1")])), 1);
    assert_eq!(code(&smotion(&["frobnicate"], &[])), 1);
    assert_eq!(code(&smotion(&["synth-data", "--out", "x"], &[])), 1);
    assert_eq!(code(&smotion(&["--help"], &[])), 0);
}

#[test]
fn gradcheck_passes_every_row_and_fails_numerically_at_zero_tolerance() {
    let o = smotion(&["gradcheck", "--seed", "1"], &[]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let rows: Vec<String> = stdout(&o).lines().skip(1).map(str::to_string).collect();
    assert!(rows.len() > 20);
    assert!(rows.iter().all(|r| r.ends_with(" pass")), "{rows:?}");
    assert!(rows.iter().any(|r| r.starts_with("denoiser (miniature)")));
    assert_eq!(code(&smotion(&["gradcheck", "--tolerance", "0"], &[])), 3);
}

const PIPELINE: &str = r#"
[model]
latent_dim = 16
heads = 2
layers = 1
ff_dim = 32
max_frames = 60

[schedule]
diffusion_steps = 20
sample_steps = 20

[training]
epochs = 3
batch_size = 4
lr = 1e-3
checkpoint_every = 2

[extractor]
audio_proj = 12
gru_hidden = 8
gru_layers = 1
feature_width = 8
ae_latent = 8
ae_layers = 1
ae_heads = 2
ae_ff = 16
max_frames = 60

[eval]
epochs = 2
batch_size = 8
lr = 1e-3
pool = 2
diversity_subset = 1
resamples = 2
"#;

#[test]
fn full_pipeline_from_synthesis_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[paths]\ndataset = {:?}\ncache = {:?}\ncheckpoints = {:?}\n{PIPELINE}",
            data,
            root.join("cache"),
            root.join("ckpt")
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", c];
        full.extend_from_slice(args);
        let o = smotion(&full, &[]);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    run(&["synth-data", "--count", "20", "--duration", "2", "--out", data.to_str().unwrap()]);
    let text = run(&["features", "--workers", "2"]);
    assert!(text.contains("train: 16 samples"), "{text}");
    assert!(std::fs::read_dir(root.join("cache")).unwrap().count() >= 20);

    let text = run(&["train", "--seed", "3"]);
    assert!(text.contains("epoch=2 "), "{text}");
    let ckpt = root.join("ckpt");
    for f in ["metrics.log", "model_card.txt", "denoiser_final.ckpt", "denoiser_epoch00002.ckpt", "normalizer.json", "run_config.toml"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }

    // both the full and the 4-step schedule give valid motion files
    let wav = data.join("samples").join(
        std::fs::read_dir(data.join("samples"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .find(|n| n.ends_with(".wav"))
            .unwrap(),
    );
    let final_ckpt = ckpt.join("denoiser_final.ckpt");
    for steps in ["20", "4"] {
        let out = root.join(format!("gen_{steps}.motion.json"));
        run(&[
            "sample",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--audio",
            wav.to_str().unwrap(),
            "--ssl",
            "1.0,-2.0,1.2",
            "--genre",
            "sensitive",
            "--steps",
            steps,
            "--frames",
            "40",
            "--out",
            out.to_str().unwrap(),
        ]);
        let file = read_motion_file(&out).unwrap();
        assert_eq!(file.motion.frames, 40);
        assert_eq!(file.ssl.len(), 40);
        file.motion.validate_rotations(1e-6).unwrap();
        assert!(file.motion.positions.iter().all(|v| v.is_finite()));
    }

    // same seed, same output
    let again = root.join("again.motion.json");
    let args = |out: &Path| {
        vec![
            "sample".to_string(),
            "--checkpoint".into(),
            final_ckpt.to_str().unwrap().into(),
            "--audio".into(),
            wav.to_str().unwrap().into(),
            "--ssl".into(),
            "1.0,-2.0,1.2".into(),
            "--steps".into(),
            "4".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let first = root.join("first.motion.json");
    for out in [&first, &again] {
        let a = args(out);
        run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&again).unwrap());

    // ground truth against itself
    let report = run(&["eval", "--out", root.join("gt.json").to_str().unwrap()]);
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(json["fid"].as_f64().unwrap() < 1e-6, "{json}");
    assert!(root.join("ckpt").join("extractor.ckpt").is_file());

    // generated test-split motions scored with the saved extractor
    let gen = root.join("gen");
    run(&["sample", "--checkpoint", final_ckpt.to_str().unwrap(), "--split", "test", "--steps", "4", "--out", gen.to_str().unwrap()]);
    let ext = root.join("ckpt").join("extractor.ckpt");
    let report = run(&["eval", "--extractor", ext.to_str().unwrap(), "--generated", gen.to_str().unwrap()]);
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(json["fid"].as_f64().unwrap().is_finite());

    // a missing checkpoint is a data error
    let o = smotion(
        &["--config", c, "sample", "--checkpoint", "/nonexistent.ckpt", "--audio", wav.to_str().unwrap(), "--ssl", "0,1,1", "--out", "x.json"],
        &[],
    );
    assert_eq!(code(&o), 2);
    // a malformed SSL argument is a usage error
    let o = smotion(
        &["--config", c, "sample", "--checkpoint", final_ckpt.to_str().unwrap(), "--audio", wav.to_str().unwrap(), "--ssl", "1,2", "--out", "x.json"],
        &[],
    );
    assert_eq!(code(&o), 1);
}
