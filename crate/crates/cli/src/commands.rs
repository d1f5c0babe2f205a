use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_motion::audio::{extract_binaural, read_wav, FeatureNormalizer};
use spatial_motion::dataset::{
    default_specs, load_dataset, write_synthetic_dataset, DatasetManifest, LoadOptions, LoadedDataset, LoadedSample,
    Split, MANIFEST_FILE,
};
use spatial_motion::denoiser::{
    miniature_gradcheck, train, ConditionedDenoiser, Conditions, DenoiserModel, TrainingSample,
};
use spatial_motion::diffusion::{sample, strided_steps, NoiseSchedule};
use spatial_motion::eval::{evaluate, train_extractor, ExtractorModel, ExtractorSample};
use spatial_motion::math::{gradcheck, primitive_suite, save_checkpoint, GradcheckOptions, Tensor};
use spatial_motion::skeleton::io::{read_motion_file, write_motion_file, BlockEncoding, MotionFile};
use spatial_motion::skeleton::{assemble_vector, GenreLabel, SkeletonSpec};

use crate::config::RunConfig;
use crate::{Cli, CliError, Command};

pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const EXTRACTOR_FILE: &str = "extractor.ckpt";

struct Globals {
    config: RunConfig,
    seed: u64,
    workers: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let g = Globals {
        seed: cli.seed.unwrap_or(config.training.seed),
        workers: cli.workers.unwrap_or(1).max(1),
        config,
    };
    match cli.command {
        Command::SynthData { count, out, duration } => synth_data(&g, count, &out, duration),
        Command::Features => features(&g),
        Command::Train { out } => train_cmd(&g, out),
        Command::Sample {
            checkpoint,
            audio,
            split,
            ssl,
            genre,
            steps,
            frames,
            out,
        } => {
            let opts = SampleOpts {
                checkpoint,
                genre,
                steps,
                frames,
                out,
            };
            match (audio, split) {
                (_, Some(split)) => sample_split(&g, &opts, &split),
                (Some(audio), None) => sample_one(&g, &opts, &audio, ssl.as_deref().unwrap_or_default()),
                (None, None) => Err(CliError::Usage("sample needs --audio or --split".into())),
            }
        }
        Command::Eval {
            extractor,
            generated,
            out,
        } => eval_cmd(&g, extractor, generated, out),
        Command::Gradcheck { tolerance } => gradcheck_cmd(&g, tolerance),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core {
        context: "i/o".into(),
        source: spatial_motion::Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn synth_data(g: &Globals, count: usize, out: &Path, duration: f64) -> Result<(), CliError> {
    let mut specs = default_specs(count, g.seed);
    for s in &mut specs {
        s.duration = duration;
    }
    let manifest = write_synthetic_dataset(out, &specs, g.seed).map_err(CliError::core("synth-data"))?;
    let mut scenarios: BTreeMap<String, usize> = BTreeMap::new();
    let mut genres: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *scenarios.entry(e.sample.scenario.clone().unwrap_or_default()).or_default() += 1;
        *genres.entry(e.sample.genre.as_str()).or_default() += 1;
    }
    println!("wrote {} samples to {}", manifest.entries.len(), out.display());
    for (name, n) in &scenarios {
        println!("scenario {name}: {n}");
    }
    for (name, n) in &genres {
        println!("genre {name}: {n}");
    }
    let [train, val, test] = manifest.counts();
    println!("split train={train} val={val} test={test}");
    Ok(())
}

fn load_manifest(g: &Globals) -> Result<DatasetManifest, CliError> {
    let path = g.config.paths.dataset.join(MANIFEST_FILE);
    DatasetManifest::load(&path).map_err(CliError::core("manifest"))
}

fn load_options(g: &Globals) -> LoadOptions {
    LoadOptions {
        features: g.config.features,
        cache_dir: g.config.paths.cache.clone(),
        workers: g.workers,
        ..LoadOptions::default()
    }
}

fn load(g: &Globals) -> Result<(DatasetManifest, LoadedDataset), CliError> {
    let manifest = load_manifest(g)?;
    let data = load_dataset(&g.config.paths.dataset, &manifest, &load_options(g)).map_err(CliError::core("dataset"))?;
    Ok((manifest, data))
}

fn features(g: &Globals) -> Result<(), CliError> {
    let (_, data) = load(g)?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let frames: usize = split.iter().map(LoadedSample::frames).sum();
        println!("{name}: {} samples, {frames} frames", split.len());
    }
    match &g.config.paths.cache {
        Some(dir) => println!("features cached in {}", dir.display()),
        None => println!("no cache directory configured; features were computed but not stored"),
    }
    Ok(())
}

/// Truncates every sample to the shortest clip (and at most `cap` frames).
fn common_length(samples: &[LoadedSample], cap: usize) -> Result<Vec<LoadedSample>, CliError> {
    let t = samples.iter().map(LoadedSample::frames).min().unwrap_or(0).min(cap);
    if t == 0 {
        return Err(CliError::Core {
            context: "dataset".into(),
            source: spatial_motion::Error::Sampling("split is empty".into()),
        });
    }
    samples
        .iter()
        .map(|s| s.truncated(t))
        .collect::<Result<_, _>>()
        .map_err(CliError::core("dataset"))
}

fn train_cmd(g: &Globals, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| g.config.paths.checkpoints.clone());
    let (manifest, data) = load(g)?;
    let train_set = common_length(&data.train, g.config.model.max_frames)?;
    let samples: Vec<TrainingSample> = train_set
        .iter()
        .map(LoadedSample::training_sample)
        .collect::<Result<_, _>>()
        .map_err(CliError::core("dataset"))?;
    let mut cfg = g.config.train_config();
    cfg.seed = g.seed;
    let model =
        DenoiserModel::new(g.config.model, &mut ChaCha8Rng::seed_from_u64(g.seed)).map_err(CliError::core("model"))?;
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    if let Some(n) = &data.normalizer {
        let path = dir.join(NORMALIZER_FILE);
        std::fs::write(&path, serde_json::to_string(n).expect("normalizer serializes")).map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join(RUN_CONFIG_FILE);
    std::fs::write(&path, g.config.to_toml()).map_err(|e| io_err(&path, e))?;
    log::info!(
        "training on {} clips of {} frames for {} epochs",
        samples.len(),
        samples[0].x0.shape()[0],
        cfg.epochs
    );
    let outcome = train(model, &samples, &cfg, Some(&dir), &manifest.content_hash()).map_err(CliError::core("train"))?;
    if let Some(last) = outcome.history.last() {
        println!("{}", last.log_line());
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}

struct SampleOpts {
    checkpoint: PathBuf,
    genre: String,
    steps: Option<usize>,
    frames: Option<usize>,
    out: PathBuf,
}

fn parse_genre(s: &str) -> Result<GenreLabel, CliError> {
    GenreLabel::ALL
        .into_iter()
        .find(|g| g.as_str() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown genre {s:?}")))
}

fn parse_point(s: &str) -> Option<[f64; 3]> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

/// A constant `"x,y,z"` or a per-frame track file (JSON array or one
/// `x,y,z` per line), resolved to exactly `frames` rows.
pub fn parse_ssl(arg: &str, frames: usize) -> Result<Vec<[f64; 3]>, CliError> {
    if let Some(p) = parse_point(arg) {
        return Ok(vec![p; frames]);
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("--ssl {arg:?} is neither x,y,z nor a readable file: {e}")))?;
    let track: Vec<[f64; 3]> = match serde_json::from_str(&text) {
        Ok(t) => t,
        Err(_) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_point(l).ok_or_else(|| CliError::Usage(format!("bad SSL line {l:?} in {arg}"))))
            .collect::<Result<_, _>>()?,
    };
    if track.len() < frames {
        return Err(CliError::Core {
            context: "ssl".into(),
            source: spatial_motion::Error::Alignment {
                sample: arg.to_string(),
                detail: format!("SSL track has {} frames, need {frames}", track.len()),
            },
        });
    }
    Ok(track[..frames].to_vec())
}

struct Sampler {
    model: DenoiserModel,
    normalizer: Option<FeatureNormalizer>,
    schedule: NoiseSchedule,
    subset: Vec<usize>,
}

fn sampler(g: &Globals, opts: &SampleOpts) -> Result<Sampler, CliError> {
    let steps = opts.steps.unwrap_or(g.config.schedule.sample_steps);
    let total = g.config.schedule.diffusion_steps;
    if steps == 0 || steps > total {
        return Err(CliError::Usage(format!("--steps must be in 1..={total}, got {steps}")));
    }
    let model = DenoiserModel::from_checkpoint(g.config.model, &opts.checkpoint).map_err(CliError::core("checkpoint"))?;
    let norm_path = opts.checkpoint.with_file_name(NORMALIZER_FILE);
    let normalizer = if g.config.features.zscore {
        let text = std::fs::read_to_string(&norm_path).map_err(|e| io_err(&norm_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::Core {
            context: "normalizer".into(),
            source: spatial_motion::Error::Format {
                path: norm_path.clone(),
                detail: e.to_string(),
            },
        })?)
    } else {
        None
    };
    let schedule = NoiseSchedule::cosine(total).map_err(CliError::core("schedule"))?;
    let subset = strided_steps(&schedule, steps).map_err(CliError::core("schedule"))?;
    Ok(Sampler {
        model,
        normalizer,
        schedule,
        subset,
    })
}

fn generate(
    s: &Sampler,
    conditions: Conditions,
    genre: GenreLabel,
    ssl: Vec<[f64; 3]>,
    fps: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let frames = conditions.frames();
    let den = ConditionedDenoiser {
        model: &s.model,
        conditions,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = sample(&den, frames, fps, &s.schedule, &s.subset, &mut rng).map_err(CliError::core("sample"))?;
    if motion.positions.iter().chain(&motion.rotations).any(|v| !v.is_finite()) {
        return Err(CliError::Numeric("sampled motion contains non-finite values".into()));
    }
    let file = MotionFile {
        motion,
        joint_names: SkeletonSpec::neutral().names().to_vec(),
        genre: Some(genre),
        ssl,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_motion_file(out, &file, BlockEncoding::Base64).map_err(CliError::core("write"))
}

fn sample_one(g: &Globals, opts: &SampleOpts, audio: &Path, ssl: &str) -> Result<(), CliError> {
    let s = sampler(g, opts)?;
    let genre = parse_genre(&opts.genre)?;
    let clip = read_wav(audio).map_err(CliError::core("audio"))?;
    let fps = f64::from(g.config.features.motion_fps);
    let available = (clip.duration() * fps).floor() as usize;
    let frames = opts.frames.unwrap_or(available.min(s.model.config.max_frames));
    if frames == 0 || frames > s.model.config.max_frames {
        return Err(CliError::Usage(format!(
            "--frames must be in 1..={}, got {frames}",
            s.model.config.max_frames
        )));
    }
    let mut feats = extract_binaural(&clip, &g.config.features, frames).map_err(CliError::core("features"))?;
    if let Some(n) = &s.normalizer {
        n.apply(&mut feats);
    }
    let track = parse_ssl(ssl, frames)?;
    let ssl_t = Tensor::new(&[frames, 3], track.iter().flatten().copied().collect()).expect("ssl layout");
    let cond = Conditions::single(feats.to_tensor(), ssl_t, genre.index()).map_err(CliError::core("conditions"))?;
    generate(&s, cond, genre, track, fps, g.seed, &opts.out)?;
    println!("wrote {frames} frames ({} steps) to {}", s.subset.len(), opts.out.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!("unknown split {s:?}"))),
    }
}

fn split_samples(data: LoadedDataset, split: Split) -> Vec<LoadedSample> {
    match split {
        Split::Train => data.train,
        Split::Val => data.val,
        Split::Test => data.test,
    }
}

/// Samples every clip of a split under its own audio, SSL and genre.
fn sample_split(g: &Globals, opts: &SampleOpts, split: &str) -> Result<(), CliError> {
    let split = parse_split(split)?;
    let s = sampler(g, opts)?;
    let (_, data) = load(g)?;
    let samples = common_length(&split_samples(data, split), s.model.config.max_frames)?;
    for (i, item) in samples.iter().enumerate() {
        let cond = item.conditions().map_err(CliError::core("conditions"))?;
        let out = opts.out.join(format!("{}.motion.json", item.name));
        let fps = item.motion.fps;
        generate(&s, cond, item.genre, item.ssl.positions.clone(), fps, g.seed.wrapping_add(i as u64), &out)?;
    }
    println!("wrote {} motions ({} steps) to {}", samples.len(), s.subset.len(), opts.out.display());
    Ok(())
}

fn eval_cmd(
    g: &Globals,
    extractor: Option<PathBuf>,
    generated: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (_, data) = load(g)?;
    let cap = g.config.extractor.max_frames;
    let model = match extractor {
        Some(path) => ExtractorModel::from_checkpoint(g.config.extractor, &path).map_err(CliError::core("extractor"))?,
        None => {
            let train_set = common_length(&data.train, cap)?;
            let samples: Vec<ExtractorSample> = train_set
                .iter()
                .map(LoadedSample::extractor_sample)
                .collect::<Result<_, _>>()
                .map_err(CliError::core("dataset"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(g.config.eval.seed);
            let fresh = ExtractorModel::new(g.config.extractor, &mut rng).map_err(CliError::core("extractor"))?;
            let outcome = train_extractor(fresh, &samples, &g.config.extractor_train_config())
                .map_err(CliError::core("extractor training"))?;
            let dir = &g.config.paths.checkpoints;
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            save_checkpoint(&dir.join(EXTRACTOR_FILE), &outcome.model.params).map_err(CliError::core("extractor"))?;
            outcome.model
        }
    };
    let test = common_length(&data.test, cap)?;
    let frames = test[0].frames();
    let real: Vec<Tensor> = test.iter().map(LoadedSample::x0).collect();
    let conditions: Vec<Conditions> = test
        .iter()
        .map(LoadedSample::conditions)
        .collect::<Result<_, _>>()
        .map_err(CliError::core("conditions"))?;
    let fake = match &generated {
        None => real.clone(),
        Some(dir) => test
            .iter()
            .map(|s| {
                let path = dir.join(format!("{}.motion.json", s.name));
                let file = read_motion_file(&path).map_err(CliError::core("generated"))?;
                let m = file.motion.truncated(frames).map_err(CliError::core("generated"))?;
                Ok(assemble_vector(&m))
            })
            .collect::<Result<Vec<_>, CliError>>()?,
    };
    let report = evaluate(&model, &conditions, &real, &fake, &g.config.eval_options()).map_err(CliError::core("eval"))?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(&path, &json).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn gradcheck_cmd(g: &Globals, tolerance: f64) -> Result<(), CliError> {
    println!("{:<28} {:>8} {:>12}  result", "op", "entries", "max rel err");
    let mut failed = Vec::new();
    let mut row = |name: &str, entries: usize, err: f64| {
        let pass = err < tolerance;
        println!("{name:<28} {entries:>8} {err:>12.3e}  {}", if pass { "pass" } else { "FAIL" });
        if !pass {
            failed.push(name.to_string());
        }
    };
    for (name, inputs, f) in primitive_suite(g.seed) {
        let r = gradcheck(&inputs, f, GradcheckOptions::default()).map_err(CliError::core(name))?;
        row(name, r.entries, r.max_rel_error);
    }
    let r = miniature_gradcheck(g.seed).map_err(CliError::core("miniature denoiser"))?;
    row("denoiser (miniature)", r.entries, r.max_rel_error);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
