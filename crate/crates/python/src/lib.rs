//! Python bindings: rotations and kinematics, audio features, the noise
//! schedule, synthetic scenes, the denoiser, metrics and gradient checks.
//! Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_motion::audio::{extract_binaural, AudioClip, FeatureConfig, FEATURE_WIDTH};
use spatial_motion::dataset::{
    default_specs, synthesize_pair, write_synthetic_dataset, ReactionProgram, SignalKind, SourcePath,
    SyntheticSceneSpec,
};
use spatial_motion::denoiser::{miniature_gradcheck, ConditionedDenoiser, Conditions, DenoiserConfig, DenoiserModel};
use spatial_motion::diffusion::{q_sample, sample_tensor, strided_steps, NoiseSchedule};
use spatial_motion::math::{gradcheck, primitive_suite, save_checkpoint, GradcheckOptions, Tensor};
use spatial_motion::skeleton::rotation::{matrix_to_sixd, sixd_to_matrix};
use spatial_motion::skeleton::{forward_kinematics, GenreLabel, SkeletonSpec, JOINT_COUNT, MOTION_WIDTH};
use spatial_motion::{eval, Error};

/// Maps library errors onto Python exception types.
pub fn to_py(e: Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else if matches!(e, Error::Io { .. }) {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Row-major `[rows, cols]` tensor from a list of equally long rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).map_err(to_py)
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn mat3(m: &[Vec<f64>]) -> PyResult<Matrix3<f64>> {
    if m.len() != 3 || m.iter().any(|r| r.len() != 3) {
        return Err(PyValueError::new_err("expected a 3x3 matrix"));
    }
    Ok(Matrix3::from_fn(|i, j| m[i][j]))
}

fn mat_rows(m: &Matrix3<f64>) -> Vec<Vec<f64>> {
    (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
}

pub fn parse_genre(name: &str) -> PyResult<GenreLabel> {
    GenreLabel::ALL
        .into_iter()
        .find(|g| g.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown genre {name:?}")))
}

fn parse_named<T: Copy>(all: &[T], name: &str, as_str: fn(T) -> &'static str, what: &str) -> PyResult<T> {
    all.iter()
        .copied()
        .find(|v| as_str(*v) == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown {what} {name:?}")))
}

/// Local 3x3 rotation from a 6D vector (Gram-Schmidt on the two columns).
#[pyfunction]
fn sixd_to_rotation(r6: [f64; 6]) -> PyResult<Vec<Vec<f64>>> {
    Ok(mat_rows(&sixd_to_matrix(&r6).map_err(to_py)?))
}

/// First two columns of a rotation matrix.
#[pyfunction]
fn rotation_to_sixd(m: Vec<Vec<f64>>) -> PyResult<[f64; 6]> {
    matrix_to_sixd(&mat3(&m)?).map_err(to_py)
}

#[pyfunction]
fn joint_names() -> Vec<String> {
    SkeletonSpec::neutral().names().to_vec()
}

/// Global joint positions of the neutral skeleton for one frame.
#[pyfunction]
fn fk(root: [f64; 3], rotations: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<[f64; 3]>> {
    let rots = rotations.iter().map(|m| mat3(m)).collect::<PyResult<Vec<_>>>()?;
    let p = forward_kinematics(&SkeletonSpec::neutral(), &Vector3::from(root), &rots).map_err(to_py)?;
    Ok(p.iter().map(|v| [v.x, v.y, v.z]).collect())
}

/// `frames × 2272` binaural features of a two-channel clip.
#[pyfunction]
#[pyo3(signature = (left, right, sample_rate, frames))]
fn extract_features(left: Vec<f64>, right: Vec<f64>, sample_rate: u32, frames: usize) -> PyResult<Vec<Vec<f64>>> {
    let clip = AudioClip::new(sample_rate, left, right).map_err(to_py)?;
    let m = extract_binaural(&clip, &FeatureConfig::default(), frames).map_err(to_py)?;
    Ok(rows_of(&m.to_tensor()))
}

#[pyclass(name = "NoiseSchedule", frozen)]
struct PyNoiseSchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    fn new(steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: NoiseSchedule::cosine(steps).map_err(to_py)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.steps() {
            return Err(to_py(Error::Index {
                index: t,
                max: self.inner.steps(),
            }));
        }
        Ok(self.inner.alpha_bar(t))
    }

    fn q_sample(&self, x0: Vec<f64>, t: usize, noise: Vec<f64>) -> PyResult<Vec<f64>> {
        let n = x0.len();
        let x = Tensor::new(&[n], x0).map_err(to_py)?;
        let e = Tensor::new(&[noise.len()], noise).map_err(to_py)?;
        Ok(q_sample(&x, t, &e, &self.inner).map_err(to_py)?.into_data())
    }

    /// Reverse-step subset of `count` evenly strided steps.
    fn strided(&self, count: usize) -> PyResult<Vec<usize>> {
        strided_steps(&self.inner, count).map_err(to_py)
    }
}

/// A generated scene: binaural audio plus world-frame motion.
#[pyclass(name = "SyntheticPair", frozen)]
struct PySyntheticPair {
    #[pyo3(get)]
    left: Vec<f64>,
    #[pyo3(get)]
    right: Vec<f64>,
    #[pyo3(get)]
    sample_rate: u32,
    #[pyo3(get)]
    fps: f64,
    /// `frames × 300` motion vectors.
    #[pyo3(get)]
    motion: Vec<Vec<f64>>,
    #[pyo3(get)]
    ssl: Vec<[f64; 3]>,
    #[pyo3(get)]
    genre: String,
    #[pyo3(get)]
    reaction_onset: f64,
    #[pyo3(get)]
    scenario: String,
}

#[pyfunction]
#[pyo3(signature = (azimuth_deg, distance=2.5, reaction="walk-toward", signal="tone", genre="neutral", seed=0, duration=4.0))]
fn synthesize(
    azimuth_deg: f64,
    distance: f64,
    reaction: &str,
    signal: &str,
    genre: &str,
    seed: u64,
    duration: f64,
) -> PyResult<PySyntheticPair> {
    let mut spec = SyntheticSceneSpec::new(
        SourcePath::fixed(azimuth_deg, distance),
        parse_named(&SignalKind::ALL, signal, SignalKind::as_str, "signal")?,
        parse_named(&ReactionProgram::ALL, reaction, ReactionProgram::as_str, "reaction")?,
        parse_genre(genre)?,
        seed,
    );
    spec.duration = duration;
    let pair = synthesize_pair(&spec).map_err(to_py)?;
    Ok(PySyntheticPair {
        sample_rate: pair.audio.sample_rate,
        left: pair.audio.left,
        right: pair.audio.right,
        fps: pair.motion.fps,
        motion: rows_of(&spatial_motion::skeleton::assemble_vector(&pair.motion)),
        ssl: pair.ssl_world,
        genre: pair.genre.as_str().to_string(),
        reaction_onset: pair.reaction_onset,
        scenario: pair.scenario,
    })
}

/// Writes `count` synthetic scenes and a manifest; returns split counts.
#[pyfunction]
#[pyo3(signature = (out, count, seed=0, duration=4.0))]
fn write_dataset(out: PathBuf, count: usize, seed: u64, duration: f64) -> PyResult<[usize; 3]> {
    let mut specs = default_specs(count, seed);
    for s in &mut specs {
        s.duration = duration;
    }
    Ok(write_synthetic_dataset(&out, &specs, seed).map_err(to_py)?.counts())
}

#[pyclass(name = "Denoiser")]
struct PyDenoiser {
    inner: DenoiserModel,
}

fn config_from_json(config: Option<&str>) -> PyResult<DenoiserConfig> {
    match config {
        None => Ok(DenoiserConfig::desk()),
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

fn conditions(audio: &[Vec<f64>], ssl: &[Vec<f64>], genre: &str) -> PyResult<Conditions> {
    Conditions::single(matrix_from_rows(audio)?, matrix_from_rows(ssl)?, parse_genre(genre)?.index()).map_err(to_py)
}

#[pymethods]
impl PyDenoiser {
    /// A freshly initialized model. `config` is a JSON object of model
    /// settings; the small desk configuration when omitted.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = config_from_json(config)?;
        Ok(Self {
            inner: DenoiserModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        Ok(Self {
            inner: DenoiserModel::from_checkpoint(config_from_json(config)?, &path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner.params).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.numel()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    /// Clean-motion estimate for a noisy `frames × 300` sample at step `t`.
    fn predict_x0(
        &self,
        x_t: Vec<Vec<f64>>,
        t: usize,
        audio: Vec<Vec<f64>>,
        ssl: Vec<Vec<f64>>,
        genre: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let cond = conditions(&audio, &ssl, genre)?;
        let out = self.inner.predict_x0(&matrix_from_rows(&x_t)?, t, &cond).map_err(to_py)?;
        Ok(rows_of(&out))
    }

    /// Ancestral sampling over `steps` strided reverse steps of a
    /// `diffusion_steps` schedule. Returns `frames × 300` motion vectors.
    #[pyo3(signature = (audio, ssl, genre="neutral", diffusion_steps=1000, steps=1000, seed=0))]
    fn sample(
        &self,
        audio: Vec<Vec<f64>>,
        ssl: Vec<Vec<f64>>,
        genre: &str,
        diffusion_steps: usize,
        steps: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let cond = conditions(&audio, &ssl, genre)?;
        let frames = cond.frames();
        let schedule = NoiseSchedule::cosine(diffusion_steps).map_err(to_py)?;
        let subset = strided_steps(&schedule, steps).map_err(to_py)?;
        let den = ConditionedDenoiser {
            model: &self.inner,
            conditions: cond,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_tensor(&den, &[frames, MOTION_WIDTH], &schedule, &subset, &mut rng).map_err(to_py)?;
        Ok(rows_of(&x))
    }
}

#[pyfunction]
fn fid(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::fid(&matrix_from_rows(&real)?, &matrix_from_rows(&generated)?).map_err(to_py)
}

/// Average pairwise distance over equally shaped `[T, W]` sequences.
#[pyfunction]
fn apd(motions: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let ts = motions.iter().map(|m| matrix_from_rows(m)).collect::<PyResult<Vec<_>>>()?;
    eval::apd(&ts).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (features, subset=eval::DIVERSITY_SUBSET, seed=0))]
fn diversity(features: Vec<Vec<f64>>, subset: usize, seed: u64) -> PyResult<f64> {
    eval::diversity(&matrix_from_rows(&features)?, subset, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)
}

/// Top-1/2/3 retrieval accuracy of each condition's own motion among `pool`.
#[pyfunction]
#[pyo3(signature = (conditions, motions, pool=eval::R_PRECISION_POOL, seed=0))]
fn r_precision(conditions: Vec<Vec<f64>>, motions: Vec<Vec<f64>>, pool: usize, seed: u64) -> PyResult<[f64; 3]> {
    eval::r_precision(
        &matrix_from_rows(&conditions)?,
        &matrix_from_rows(&motions)?,
        pool,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .map_err(to_py)
}

/// `(name, entries, max relative error)` for every differentiable op and
/// the miniature denoiser.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn run_gradcheck(seed: u64) -> PyResult<Vec<(String, usize, f64)>> {
    let mut rows = Vec::new();
    for (name, inputs, f) in primitive_suite(seed) {
        let r = gradcheck(&inputs, f, GradcheckOptions::default()).map_err(to_py)?;
        rows.push((name.to_string(), r.entries, r.max_rel_error));
    }
    let r = miniature_gradcheck(seed).map_err(to_py)?;
    rows.push(("denoiser (miniature)".to_string(), r.entries, r.max_rel_error));
    Ok(rows)
}

#[pymodule]
fn spatial_motion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("JOINT_COUNT", JOINT_COUNT)?;
    m.add("MOTION_WIDTH", MOTION_WIDTH)?;
    m.add("FEATURE_WIDTH", FEATURE_WIDTH)?;
    m.add_function(wrap_pyfunction!(sixd_to_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_to_sixd, m)?)?;
    m.add_function(wrap_pyfunction!(joint_names, m)?)?;
    m.add_function(wrap_pyfunction!(fk, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(apd, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(r_precision, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PySyntheticPair>()?;
    m.add_class::<PyDenoiser>()?;
    Ok(())
}
