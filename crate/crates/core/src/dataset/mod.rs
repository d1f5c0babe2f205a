//! Dataset manifests, sample loading and normalization, and the synthetic
//! scene generator.

mod resample;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use resample::{resample_motion, resample_track, resampled_frames};
pub use synth::{
    default_specs, genre_amplitude, genre_latency, synthesize_pair, ReactionProgram, SignalKind, SourcePath,
    SyntheticPair, SyntheticSceneSpec,
};

use crate::audio::{
    extract_binaural, feature_cache_key, read_feature_cache, read_wav, write_feature_cache, write_wav,
    AudioFeatureMatrix, FeatureConfig, FeatureNormalizer,
};
use crate::denoiser::{Conditions, TrainingSample};
use crate::error::{Error, Result};
use crate::eval::ExtractorSample;
use crate::math::Tensor;
use crate::skeleton::io::{read_motion_file, write_motion_file, BlockEncoding, MotionFile};
use crate::skeleton::{
    assemble_vector, detect_foot_contacts, normalize_sequence, ContactThresholds, GenreLabel, MotionSequence,
    SkeletonSpec, SslTrack,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const TARGET_FPS: f64 = 30.0;
pub const MIN_MANIFEST_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 8:1:1 by position modulo 10.
    pub fn for_position(i: usize) -> Self {
        match i % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

/// One paired recording. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub name: String,
    pub audio: PathBuf,
    pub motion: PathBuf,
    /// World-frame source position per motion frame.
    pub ssl: Vec<[f64; 3]>,
    pub genre: GenreLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample: SampleRecord,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub fps: f64,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Deterministic 8:1:1 split. Samples are grouped by scenario tag, each
/// group is shuffled with `seed`, and the groups are concatenated in tag
/// order before positions are assigned, so every scenario is spread over
/// all three splits.
pub fn build_manifest(samples: Vec<SampleRecord>, fps: f64, seed: u64) -> Result<DatasetManifest> {
    if samples.len() < MIN_MANIFEST_SAMPLES {
        return Err(Error::Sampling(format!(
            "a manifest needs at least {MIN_MANIFEST_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let mut names: Vec<&str> = samples.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate sample name {}", w[0])));
    }
    let mut groups: BTreeMap<Option<String>, Vec<SampleRecord>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.scenario.clone()).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (_, mut group) in groups {
        group.shuffle(&mut rng);
        for sample in group {
            let split = Split::for_position(entries.len());
            entries.push(ManifestEntry { sample, split });
        }
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        fps,
        seed,
        entries,
    })
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        [Split::Train, Split::Val, Split::Test].map(|s| self.entries.iter().filter(|e| e.split == s).count())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// Checks that every referenced file exists and parses and that each
    /// SSL track matches its motion's frame count.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            read_wav(&root.join(&e.sample.audio))?;
            let m = read_motion_file(&root.join(&e.sample.motion))?;
            if m.motion.frames != e.sample.ssl.len() {
                return Err(Error::Alignment {
                    sample: e.sample.name.clone(),
                    detail: format!("{} SSL positions for {} frames", e.sample.ssl.len(), m.motion.frames),
                });
            }
        }
        Ok(())
    }
}

/// How samples are turned into model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub features: FeatureConfig,
    pub cache_dir: Option<PathBuf>,
    pub fps: f64,
    pub workers: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            cache_dir: None,
            fps: TARGET_FPS,
            workers: 1,
        }
    }
}

/// A sample ready for training or evaluation. Audio features are raw until
/// [`LoadedSample::normalize_audio`] is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub name: String,
    pub genre: GenreLabel,
    pub scenario: Option<String>,
    /// Normalized motion at the target frame rate.
    pub motion: MotionSequence,
    pub ssl: SslTrack,
    pub audio: AudioFeatureMatrix,
    /// `[T, feet]` contact mask of the normalized motion.
    pub contacts: Tensor,
}

impl LoadedSample {
    pub fn frames(&self) -> usize {
        self.motion.frames
    }

    pub fn x0(&self) -> Tensor {
        assemble_vector(&self.motion)
    }

    pub fn ssl_tensor(&self) -> Tensor {
        Tensor::new(&[self.ssl.len(), 3], self.ssl.flat()).expect("SSL layout")
    }

    pub fn conditions(&self) -> Result<Conditions> {
        Conditions::single(self.audio.to_tensor(), self.ssl_tensor(), self.genre.index())
    }

    pub fn normalize_audio(&mut self, norm: &FeatureNormalizer) {
        norm.apply(&mut self.audio);
    }

    pub fn training_sample(&self) -> Result<TrainingSample> {
        Ok(TrainingSample {
            name: self.name.clone(),
            x0: self.x0(),
            conditions: self.conditions()?,
            contacts: self.contacts.clone(),
        })
    }

    pub fn extractor_sample(&self) -> Result<ExtractorSample> {
        Ok(ExtractorSample {
            name: self.name.clone(),
            motion: self.x0(),
            conditions: self.conditions()?,
        })
    }

    /// First `frames` frames of every per-frame field.
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames() {
            return Err(Error::Contract(format!("cannot crop {} frames to {frames}", self.frames())));
        }
        let motion = self.motion.truncated(frames)?;
        let feet = self.contacts.shape()[1];
        Ok(Self {
            name: self.name.clone(),
            genre: self.genre,
            scenario: self.scenario.clone(),
            motion,
            ssl: SslTrack {
                positions: self.ssl.positions[..frames].to_vec(),
            },
            audio: AudioFeatureMatrix::new(
                frames,
                self.audio.values[..frames * crate::audio::FEATURE_WIDTH].to_vec(),
            )?,
            contacts: Tensor::new(&[frames, feet], self.contacts.data()[..frames * feet].to_vec())?,
        })
    }
}

fn alignment(name: &str, e: Error) -> Error {
    match e {
        Error::Duration { need, got } => Error::Alignment {
            sample: name.to_string(),
            detail: format!("audio has {got} samples, motion needs {need}"),
        },
        Error::Contract(detail) => Error::Alignment {
            sample: name.to_string(),
            detail,
        },
        other => other,
    }
}

fn contact_tensor(motion: &MotionSequence, skel: &SkeletonSpec) -> Result<Tensor> {
    let masks = detect_foot_contacts(
        &motion.positions,
        motion.joints,
        motion.fps,
        skel.foot_joints(),
        ContactThresholds::default(),
    )?;
    let data = (0..motion.frames)
        .flat_map(|t| masks.iter().map(move |m| if m[t] { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(&[motion.frames, masks.len()], data)
}

/// Reads, resamples and normalizes one entry and extracts (or reads
/// cached) audio features for exactly the motion's frame count.
pub fn load_sample(root: &Path, entry: &ManifestEntry, opts: &LoadOptions) -> Result<LoadedSample> {
    let s = &entry.sample;
    let file = read_motion_file(&root.join(&s.motion))?;
    if file.motion.frames != s.ssl.len() {
        return Err(Error::Alignment {
            sample: s.name.clone(),
            detail: format!("{} SSL positions for {} motion frames", s.ssl.len(), file.motion.frames),
        });
    }
    let motion = resample_motion(&file.motion, opts.fps)?;
    let ssl_world = resample_track(&s.ssl, file.motion.fps, opts.fps);
    let (motion, ssl) = normalize_sequence(&motion, &ssl_world).map_err(|e| alignment(&s.name, e))?;
    let frames = motion.frames;

    let audio_path = root.join(&s.audio);
    let cache_path = match &opts.cache_dir {
        Some(dir) => {
            let bytes = std::fs::read(&audio_path).map_err(|e| Error::io(&audio_path, e))?;
            Some(dir.join(format!("{}_{frames}.feat", feature_cache_key(&bytes, &opts.features))))
        }
        None => None,
    };
    let audio = match cache_path.as_ref().filter(|p| p.exists()) {
        Some(p) => read_feature_cache(p)?.0,
        None => {
            let clip = read_wav(&audio_path)?;
            let m = extract_binaural(&clip, &opts.features, frames).map_err(|e| alignment(&s.name, e))?;
            if let Some(p) = &cache_path {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                write_feature_cache(p, &m, None)?;
            }
            m
        }
    };
    if audio.frames != frames {
        return Err(Error::Alignment {
            sample: s.name.clone(),
            detail: format!("cached features have {} frames, motion has {frames}", audio.frames),
        });
    }
    let contacts = contact_tensor(&motion, &SkeletonSpec::neutral())?;
    Ok(LoadedSample {
        name: s.name.clone(),
        genre: s.genre,
        scenario: s.scenario.clone(),
        motion,
        ssl,
        audio,
        contacts,
    })
}

/// Loads entries on up to `opts.workers` threads, preserving order.
pub fn load_entries(root: &Path, entries: &[&ManifestEntry], opts: &LoadOptions) -> Result<Vec<LoadedSample>> {
    let workers = opts.workers.clamp(1, entries.len().max(1));
    if workers == 1 {
        return entries.iter().map(|e| load_sample(root, e, opts)).collect();
    }
    let chunk = entries.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|e| load_sample(root, e, opts)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("loader thread panicked"))
            .collect()
    })
}

/// Train/val/test samples with audio z-scored by training statistics when
/// the feature config asks for it.
pub struct LoadedDataset {
    pub train: Vec<LoadedSample>,
    pub val: Vec<LoadedSample>,
    pub test: Vec<LoadedSample>,
    pub normalizer: Option<FeatureNormalizer>,
}

pub fn load_dataset(root: &Path, manifest: &DatasetManifest, opts: &LoadOptions) -> Result<LoadedDataset> {
    let load = |split| load_entries(root, &manifest.split(split), opts);
    let (mut train, mut val, mut test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    let normalizer = if opts.features.zscore && !train.is_empty() {
        let n = FeatureNormalizer::fit(&train.iter().map(|s| &s.audio).collect::<Vec<_>>())?;
        for s in train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()) {
            s.normalize_audio(&n);
        }
        Some(n)
    } else {
        None
    };
    Ok(LoadedDataset {
        train,
        val,
        test,
        normalizer,
    })
}

/// Writes one WAV and one motion file per scene plus the manifest.
pub fn write_synthetic_dataset(out: &Path, specs: &[SyntheticSceneSpec], seed: u64) -> Result<DatasetManifest> {
    let dir = out.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let skel = SkeletonSpec::neutral();
    let mut records = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let pair = synthesize_pair(spec)?;
        let name = format!("s{i:04}_{}_{}", spec.reaction.as_str(), spec.genre);
        let audio = PathBuf::from("samples").join(format!("{name}.wav"));
        let motion = PathBuf::from("samples").join(format!("{name}.motion.json"));
        write_wav(&out.join(&audio), &pair.audio)?;
        let file = MotionFile {
            motion: pair.motion,
            joint_names: skel.names().to_vec(),
            genre: Some(spec.genre),
            ssl: Vec::new(),
        };
        write_motion_file(&out.join(&motion), &file, BlockEncoding::Base64)?;
        records.push(SampleRecord {
            name,
            audio,
            motion,
            ssl: pair.ssl_world,
            genre: spec.genre,
            scenario: Some(pair.scenario),
        });
    }
    let manifest = build_manifest(records, specs.first().map_or(TARGET_FPS, |s| s.fps), seed)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SamMeta {
    genre: GenreLabel,
    ssl: Vec<[f64; 3]>,
}

/// Builds a manifest for a directory laid out as
/// `<root>/<scenario>/<clip>/{binaural.wav, motion.json, meta.json}`, where
/// `motion.json` is a motion file and `meta.json` holds
/// `{"genre": "...", "ssl": [[x, y, z], ...]}` with one world-frame source
/// position per motion frame. The real recordings' layout is unpublished;
/// this is an assumed layout to convert into.
pub fn load_sam_layout(root: &Path, seed: u64) -> Result<DatasetManifest> {
    let sorted_dirs = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut records = Vec::new();
    let mut fps = None;
    for scenario in sorted_dirs(root)? {
        let tag = scenario.file_name().unwrap().to_string_lossy().into_owned();
        for clip in sorted_dirs(&scenario)? {
            let rel = clip.strip_prefix(root).expect("child of root").to_path_buf();
            let meta_path = clip.join("meta.json");
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: SamMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
            let motion = read_motion_file(&clip.join("motion.json"))?;
            fps.get_or_insert(motion.motion.fps);
            records.push(SampleRecord {
                name: rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "_"),
                audio: rel.join("binaural.wav"),
                motion: rel.join("motion.json"),
                ssl: meta.ssl,
                genre: meta.genre,
                scenario: Some(tag.clone()),
            });
        }
    }
    build_manifest(records, fps.unwrap_or(TARGET_FPS), seed)
}
