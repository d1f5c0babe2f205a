//! Procedural spatial-audio scenes with known reactions.
//!
//! World frame: the character starts at the ground-plane origin facing -y,
//! z is up and +x is the character's left. Azimuth is measured from the
//! initial forward direction, positive to the left, so a source at azimuth
//! `a` and distance `d` sits at `(d sin a, -d cos a, h)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::skeleton::kinematics::global_rotations;
use crate::skeleton::rotation::{rot_x, rot_y, rot_z};
use crate::skeleton::{forward_kinematics, GenreLabel, MotionSequence, SkeletonSpec};

pub const HEAD_RADIUS: f64 = 0.0875;
pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MIN_DURATION: f64 = 2.0;
pub const MIN_DISTANCE: f64 = 0.3;
/// Broadband far-ear attenuation at a fully lateral source.
pub const HEAD_SHADOW: f64 = 0.3;
/// Height of the emitting source above the ground.
pub const SOURCE_HEIGHT: f64 = 1.2;
/// Peak amplitude of the source signal at 1 m.
pub const SOURCE_LEVEL: f64 = 0.5;
const STRIDE: f64 = 1.2;
const RAMP: f64 = 0.5;
const STOP_DISTANCE: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    Tone,
    Chirp,
    NoiseBurst,
    ClickTrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReactionProgram {
    TurnToward,
    WalkToward,
    Flee,
    CoverEarsCrouch,
    Idle,
}

impl ReactionProgram {
    pub const ALL: [ReactionProgram; 5] = [
        ReactionProgram::TurnToward,
        ReactionProgram::WalkToward,
        ReactionProgram::Flee,
        ReactionProgram::CoverEarsCrouch,
        ReactionProgram::Idle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReactionProgram::TurnToward => "turn-toward",
            ReactionProgram::WalkToward => "walk-toward",
            ReactionProgram::Flee => "flee",
            ReactionProgram::CoverEarsCrouch => "cover-ears-crouch",
            ReactionProgram::Idle => "idle",
        }
    }

    /// +1 when the root should approach the source, -1 when it should
    /// retreat, 0 when it should stay put.
    pub fn approach_sign(self) -> i32 {
        match self {
            ReactionProgram::WalkToward => 1,
            ReactionProgram::Flee => -1,
            _ => 0,
        }
    }
}

impl SignalKind {
    pub const ALL: [SignalKind; 4] = [
        SignalKind::Tone,
        SignalKind::Chirp,
        SignalKind::NoiseBurst,
        SignalKind::ClickTrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Tone => "tone",
            SignalKind::Chirp => "chirp",
            SignalKind::NoiseBurst => "noise-burst",
            SignalKind::ClickTrain => "click-train",
        }
    }
}

/// Reaction onset latency in seconds after the signal starts.
pub fn genre_latency(g: GenreLabel) -> f64 {
    match g {
        GenreLabel::Sensitive => 0.2,
        GenreLabel::Neutral => 0.6,
        GenreLabel::Dull => 1.5,
    }
}

/// Multiplier on reaction speed and extent.
pub fn genre_amplitude(g: GenreLabel) -> f64 {
    match g {
        GenreLabel::Sensitive => 1.3,
        GenreLabel::Neutral => 1.0,
        GenreLabel::Dull => 0.7,
    }
}

/// Source position relative to the character's starting pose, linearly
/// interpolated from start to end over the clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePath {
    pub start_azimuth_deg: f64,
    pub end_azimuth_deg: f64,
    pub start_distance: f64,
    pub end_distance: f64,
}

impl SourcePath {
    pub fn fixed(azimuth_deg: f64, distance: f64) -> Self {
        Self {
            start_azimuth_deg: azimuth_deg,
            end_azimuth_deg: azimuth_deg,
            start_distance: distance,
            end_distance: distance,
        }
    }

    /// World position at fraction `u ∈ [0, 1]` of the clip.
    pub fn position(&self, u: f64) -> Vector3<f64> {
        let az = (self.start_azimuth_deg + u * (self.end_azimuth_deg - self.start_azimuth_deg)).to_radians();
        let d = self.start_distance + u * (self.end_distance - self.start_distance);
        Vector3::new(d * az.sin(), -d * az.cos(), SOURCE_HEIGHT)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub source: SourcePath,
    pub signal: SignalKind,
    pub reaction: ReactionProgram,
    pub genre: GenreLabel,
    /// Seconds.
    pub duration: f64,
    /// Time the source starts emitting, in seconds.
    pub signal_onset: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub fps: f64,
}

impl SyntheticSceneSpec {
    pub fn new(source: SourcePath, signal: SignalKind, reaction: ReactionProgram, genre: GenreLabel, seed: u64) -> Self {
        Self {
            source,
            signal,
            reaction,
            genre,
            duration: 4.0,
            signal_onset: 0.3,
            seed,
            sample_rate: 24000,
            fps: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= MIN_DURATION) {
            return Err(Error::Config(format!("duration {} s is below {MIN_DURATION} s", self.duration)));
        }
        if !(self.source.start_distance > MIN_DISTANCE && self.source.end_distance > MIN_DISTANCE) {
            return Err(Error::Config(format!("source distance must exceed {MIN_DISTANCE} m")));
        }
        if self.sample_rate == 0 || !(self.fps > 0.0) || !(self.signal_onset >= 0.0) {
            return Err(Error::Config("sample rate, fps and signal onset must be positive".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> String {
        format!("{}/{}", self.reaction.as_str(), self.signal.as_str())
    }

    pub fn frames(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    /// Time at which the reaction starts.
    pub fn reaction_onset(&self) -> f64 {
        self.signal_onset + genre_latency(self.genre)
    }
}

/// One generated scene with its ground-truth reaction labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub audio: AudioClip,
    /// World-frame motion at `spec.fps`.
    pub motion: MotionSequence,
    /// World-frame source position per motion frame.
    pub ssl_world: Vec<[f64; 3]>,
    pub genre: GenreLabel,
    pub reaction_onset: f64,
    pub scenario: String,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Heading (same convention as azimuth) of a ground-plane direction.
fn heading_of(v: &Vector3<f64>) -> f64 {
    v.x.atan2(-v.y)
}

struct PoseControls {
    yaw: f64,
    gait_phase: f64,
    gait: f64,
    crouch: f64,
    cover: f64,
    look: f64,
    breath: f64,
}

fn local_rotations(skel: &SkeletonSpec, c: &PoseControls) -> Vec<Matrix3<f64>> {
    let j = |name: &str| skel.joint(name).expect("neutral joint");
    let mut r = vec![Matrix3::identity(); skel.joint_count()];
    let swing = 0.35 * c.gait * c.gait_phase.sin();
    let bend = |phase: f64| 0.6 * c.gait * phase.sin().max(0.0);
    let crouch = 0.7 * c.crouch;
    r[j("pelvis")] = rot_z(c.yaw);
    r[j("left_hip")] = rot_x(-swing - crouch);
    r[j("right_hip")] = rot_x(swing - crouch);
    r[j("left_knee")] = rot_x(bend(c.gait_phase + PI) + 2.0 * crouch);
    r[j("right_knee")] = rot_x(bend(c.gait_phase) + 2.0 * crouch);
    r[j("left_ankle")] = rot_x(-crouch);
    r[j("right_ankle")] = rot_x(-crouch);
    r[j("spine1")] = rot_y(0.03 * c.breath) * rot_x(-0.4 * c.crouch);
    r[j("neck")] = rot_z(c.look);
    let arm = 1.3 - 2.5 * c.cover;
    let arm_swing = 0.3 * c.gait * c.gait_phase.sin();
    r[j("left_shoulder")] = rot_z(-arm_swing) * rot_y(arm);
    r[j("right_shoulder")] = rot_z(-arm_swing) * rot_y(-arm);
    r[j("left_elbow")] = rot_z(-1.5 * c.cover);
    r[j("right_elbow")] = rot_z(1.5 * c.cover);
    r
}

fn signal(spec: &SyntheticSceneSpec, samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let start = (spec.signal_onset * sr).round() as usize;
    let mut out = vec![0.0; samples];
    match spec.signal {
        SignalKind::Tone => {
            let f = rng.random_range(220.0..880.0);
            for (n, y) in out.iter_mut().enumerate().skip(start) {
                *y = (TAU * f * (n - start) as f64 / sr).sin();
            }
        }
        SignalKind::Chirp => {
            let (f0, f1) = (200.0, 2000.0);
            let len = (samples - start.min(samples)) as f64 / sr;
            for (n, y) in out.iter_mut().enumerate().skip(start) {
                let t = (n - start) as f64 / sr;
                *y = (TAU * (f0 * t + 0.5 * (f1 - f0) / len.max(1e-9) * t * t)).sin();
            }
        }
        SignalKind::NoiseBurst => {
            let period = (0.5 * sr) as usize;
            for (n, y) in out.iter_mut().enumerate().skip(start) {
                let v: f64 = StandardNormal.sample(rng);
                if (n - start) % period < period / 2 {
                    *y = (0.5 * v).clamp(-1.0, 1.0);
                }
            }
        }
        SignalKind::ClickTrain => {
            let period = (0.5 * sr) as usize;
            let decay = 0.005 * sr;
            for (n, y) in out.iter_mut().enumerate().skip(start) {
                let k = ((n - start) % period) as f64;
                *y = (-k / decay).exp() * (TAU * 1500.0 * k / sr).sin();
            }
        }
    }
    out
}

/// Builds the scene: reaction-driven motion first, then binaural audio as
/// heard by the moving head.
pub fn synthesize_pair(spec: &SyntheticSceneSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let skel = SkeletonSpec::neutral();
    let frames = spec.frames();
    let dt = 1.0 / spec.fps;
    let amp = genre_amplitude(spec.genre);
    let onset = spec.reaction_onset();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let breath_phase = rng.random_range(0.0..TAU);
    let src_at = |t: f64| spec.source.position((t / spec.duration).clamp(0.0, 1.0));

    let mut root = Vector3::zeros();
    let mut gait_phase = 0.0;
    let mut yaw_target = None;
    let mut positions = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    let mut head_frames = Vec::with_capacity(frames);
    let head = skel.joint("head").expect("head joint");
    for f in 0..frames {
        let t = f as f64 * dt;
        let e = smoothstep((t - onset) / RAMP);
        let src = src_at(t);
        let to_src = Vector3::new(src.x - root.x, src.y - root.y, 0.0);
        let dist = to_src.norm();
        if t >= onset && yaw_target.is_none() {
            yaw_target = Some(match spec.reaction {
                ReactionProgram::Flee => heading_of(&-to_src),
                ReactionProgram::TurnToward | ReactionProgram::WalkToward => heading_of(&to_src),
                _ => 0.0,
            });
        }
        let turn = match (spec.reaction, yaw_target) {
            (ReactionProgram::TurnToward, Some(y)) => amp.min(1.0) * y,
            (ReactionProgram::WalkToward | ReactionProgram::Flee, Some(y)) => y,
            _ => 0.0,
        };
        let yaw = e * wrap(turn);
        let speed = match spec.reaction {
            ReactionProgram::WalkToward => {
                0.6 * amp * e * ((dist - STOP_DISTANCE) / 0.3).clamp(0.0, 1.0)
            }
            ReactionProgram::Flee => 1.0 * amp * e,
            _ => 0.0,
        };
        let crouch = match spec.reaction {
            ReactionProgram::CoverEarsCrouch => (0.6 * amp).min(1.0) * e,
            _ => 0.0,
        };
        let look_rel = wrap(heading_of(&to_src) - yaw);
        let look = match spec.reaction {
            ReactionProgram::Idle => 0.0,
            _ => 0.5 * e * look_rel.clamp(-1.2, 1.2),
        };
        let controls = PoseControls {
            yaw,
            gait_phase,
            gait: (speed / 0.5).min(1.0),
            crouch,
            cover: if spec.reaction == ReactionProgram::CoverEarsCrouch { e } else { 0.0 },
            look,
            breath: (TAU * 0.25 * t + breath_phase).sin(),
        };
        let rots = local_rotations(&skel, &controls);
        // keep the lower foot on the ground
        let probe = forward_kinematics(&skel, &Vector3::new(root.x, root.y, 0.0), &rots)?;
        let lowest = skel
            .foot_joints()
            .iter()
            .map(|&k| probe[k].z)
            .fold(f64::INFINITY, f64::min);
        let root_pos = Vector3::new(root.x, root.y, -lowest);
        let pos = forward_kinematics(&skel, &root_pos, &rots)?;
        let head_rot = global_rotations(&skel, &rots)[head];
        head_frames.push((pos[head], head_rot));
        positions.push(pos);
        rotations.push(rots);

        if speed > 0.0 && dist > 1e-9 {
            let dir = match spec.reaction {
                ReactionProgram::Flee => -to_src / dist,
                _ => to_src / dist,
            };
            root += dir * speed * dt;
            gait_phase += TAU * speed * dt / STRIDE;
        }
    }
    let motion = MotionSequence::from_parts(spec.fps, &positions, &rotations)?;
    let ssl_world: Vec<[f64; 3]> = (0..frames)
        .map(|f| {
            let p = src_at(f as f64 * dt);
            [p.x, p.y, p.z]
        })
        .collect();

    let samples = (frames as f64 * spec.sample_rate as f64 / spec.fps).round() as usize;
    let mono = signal(spec, samples, &mut rng);
    let audio = spatialize(&mono, spec, &head_frames, &src_at)?;
    Ok(SyntheticPair {
        audio,
        motion,
        ssl_world,
        genre: spec.genre,
        reaction_onset: onset,
        scenario: spec.scenario(),
    })
}

/// Per-ear gain `1/d²` (distance clamped at [`MIN_DISTANCE`]) and a
/// Woodworth interaural delay applied to the far ear.
fn spatialize(
    mono: &[f64],
    spec: &SyntheticSceneSpec,
    head_frames: &[(Vector3<f64>, Matrix3<f64>)],
    src_at: &dyn Fn(f64) -> Vector3<f64>,
) -> Result<AudioClip> {
    let sr = spec.sample_rate as f64;
    // (left gain, right gain, left delay, right delay) per motion frame
    let params: Vec<[f64; 4]> = head_frames
        .iter()
        .enumerate()
        .map(|(f, (pos, rot))| {
            let src = src_at(f as f64 / spec.fps);
            let ear = |side: f64| pos + rot * Vector3::new(side * HEAD_RADIUS, 0.0, 0.0);
            let gain = |e: Vector3<f64>| 1.0 / (src - e).norm().max(MIN_DISTANCE).powi(2);
            let local = rot.transpose() * (src - pos);
            let lateral = (local.x / local.norm().max(1e-9)).clamp(-1.0, 1.0).asin();
            let itd = HEAD_RADIUS / SPEED_OF_SOUND * (lateral.abs() + lateral.abs().sin());
            let (dl, dr) = if lateral >= 0.0 { (0.0, itd) } else { (itd, 0.0) };
            let shadow = 1.0 - HEAD_SHADOW * lateral.sin().abs();
            let (sl, sr) = if lateral >= 0.0 { (1.0, shadow) } else { (shadow, 1.0) };
            [sl * gain(ear(1.0)), sr * gain(ear(-1.0)), dl, dr]
        })
        .collect();
    let hop = sr / spec.fps;
    let at = |x: f64| -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let i = x.floor() as usize;
        let w = x - i as f64;
        let a = mono.get(i).copied().unwrap_or(0.0);
        let b = mono.get(i + 1).copied().unwrap_or(0.0);
        a + w * (b - a)
    };
    let mut left = Vec::with_capacity(mono.len());
    let mut right = Vec::with_capacity(mono.len());
    for n in 0..mono.len() {
        let fpos = n as f64 / hop;
        let i = (fpos.floor() as usize).min(params.len() - 1);
        let j = (i + 1).min(params.len() - 1);
        let w = (fpos - i as f64).clamp(0.0, 1.0);
        let p: Vec<f64> = (0..4).map(|k| params[i][k] + w * (params[j][k] - params[i][k])).collect();
        left.push(SOURCE_LEVEL * p[0] * at(n as f64 - p[2] * sr));
        right.push(SOURCE_LEVEL * p[1] * at(n as f64 - p[3] * sr));
    }
    AudioClip::new(spec.sample_rate, left, right)
}

/// `count` varied scenes with genres assigned round-robin.
pub fn default_specs(count: usize, seed: u64) -> Vec<SyntheticSceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let az = rng.random_range(-180.0..180.0);
            let dist = rng.random_range(1.5..3.5);
            let drift = rng.random_range(-30.0..30.0);
            let source = SourcePath {
                start_azimuth_deg: az,
                end_azimuth_deg: az + drift,
                start_distance: dist,
                end_distance: dist,
            };
            let reaction = ReactionProgram::ALL[(i / 3) % ReactionProgram::ALL.len()];
            let signal = SignalKind::ALL[rng.random_range(0..SignalKind::ALL.len())];
            let genre = GenreLabel::ALL[i % 3];
            SyntheticSceneSpec::new(source, signal, reaction, genre, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}
