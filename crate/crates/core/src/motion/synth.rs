//! Procedural stand-in for text-motion and music-dance corpora.
//!
//! Text samples are forward-kinematics renderings of one or two scripted actions
//! with a templated sentence. Audio samples are dances whose every joint moves as a
//! function of `cos(π (t − t0) / P)`, so the total joint speed vanishes exactly on
//! the beat frames `t0 + kP`; the paired waveform has a click on each beat.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::audio::{extract_audio_features, AudioConfig};
use super::io::{save_features, save_motion, write_atomic, Condition, DatasetManifest, ManifestEntry, Modality, Sample, Split};
use super::sequence::MotionSequence;
use super::skeleton::Skeleton;
use super::text::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::{derive, seeded, Rng};

pub const TEXT_FAMILIES: [&str; 8] = ["walk", "run", "jump", "wave", "turn", "kick", "squat", "clap"];
pub const DANCE_GENRES: [&str; 5] = ["bounce", "sway", "pump", "twist", "step"];
/// Beat periods in frames.
pub const BEAT_PERIODS: [usize; 4] = [8, 10, 12, 16];

const PELVIS_HEIGHT: f64 = 0.85;
const SUBJECTS: [&str; 2] = ["a person", "someone"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCount {
    pub name: String,
    pub train: usize,
    pub test: usize,
}

impl FamilyCount {
    pub fn new(name: &str, train: usize, test: usize) -> Self {
        FamilyCount {
            name: name.to_string(),
            train,
            test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub fps: f64,
    pub frames: usize,
    pub text: Vec<FamilyCount>,
    pub dance: Vec<FamilyCount>,
    /// Chance that a text sample chains a second action.
    pub compound_prob: f64,
    pub sample_rate: f64,
    pub audio: AudioConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let dance_train = [52, 51, 51, 51, 51];
        let dance_test = [7, 7, 6, 6, 6];
        SynthConfig {
            fps: 20.0,
            frames: 64,
            text: TEXT_FAMILIES.iter().map(|f| FamilyCount::new(f, 32, 8)).collect(),
            dance: DANCE_GENRES
                .iter()
                .enumerate()
                .map(|(i, g)| FamilyCount::new(g, dance_train[i], dance_test[i]))
                .collect(),
            compound_prob: 0.5,
            sample_rate: 8000.0,
            audio: AudioConfig::default(),
        }
    }
}

impl SynthConfig {
    /// Same families scaled to the given per-modality totals (spread as evenly as possible).
    pub fn with_counts(text_train: usize, text_test: usize, audio_train: usize, audio_test: usize) -> Self {
        fn spread(names: &[&str], train: usize, test: usize) -> Vec<FamilyCount> {
            let n = names.len();
            names
                .iter()
                .enumerate()
                .map(|(i, f)| FamilyCount::new(f, train / n + usize::from(i < train % n), test / n + usize::from(i < test % n)))
                .collect()
        }
        SynthConfig {
            text: spread(&TEXT_FAMILIES, text_train, text_test),
            dance: spread(&DANCE_GENRES, audio_train, audio_test),
            ..SynthConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        for f in &self.text {
            if !TEXT_FAMILIES.contains(&f.name.as_str()) {
                return Err(Error::Config(format!("unknown action family `{}`", f.name)));
            }
        }
        for f in &self.dance {
            if !DANCE_GENRES.contains(&f.name.as_str()) {
                return Err(Error::Config(format!("unknown dance genre `{}`", f.name)));
            }
        }
        if !(self.fps > 0.0) || self.frames < 16 || self.frames % 2 != 0 {
            return Err(Error::Config(format!(
                "synthetic clips need fps > 0 and an even frame count ≥ 16, got {} and {}",
                self.fps, self.frames
            )));
        }
        if !(0.0..=1.0).contains(&self.compound_prob) {
            return Err(Error::Config("compound_prob must lie in [0, 1]".into()));
        }
        self.audio.hop(self.sample_rate)?;
        if (self.sample_rate / self.audio.hop(self.sample_rate)? as f64 - self.fps).abs() > 1e-9 {
            return Err(Error::Config("audio feature rate must equal the motion fps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Speed {
    Slow,
    Normal,
    Fast,
}

impl Speed {
    fn factor(self) -> f64 {
        match self {
            Speed::Slow => 0.6,
            Speed::Normal => 1.0,
            Speed::Fast => 1.6,
        }
    }

    fn reps(self) -> f64 {
        match self {
            Speed::Slow | Speed::Normal => 1.0,
            Speed::Fast => 2.0,
        }
    }
}

/// One scripted action of a text sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionSpec {
    pub family: &'static str,
    pub side: Option<Side>,
    pub speed: Speed,
}

fn family_has_side(family: &str) -> bool {
    matches!(family, "wave" | "turn" | "kick")
}

impl ActionSpec {
    pub fn new(family: &str, side: Option<Side>, speed: Speed) -> Result<Self> {
        let family = *TEXT_FAMILIES
            .iter()
            .find(|f| **f == family)
            .ok_or_else(|| Error::Config(format!("unknown action family `{family}`")))?;
        if family_has_side(family) != side.is_some() {
            return Err(Error::Config(format!("action `{family}` side does not match its template")));
        }
        Ok(ActionSpec { family, side, speed })
    }

    fn random<R: rand::Rng>(family: &'static str, rng: &mut R) -> Self {
        let side = family_has_side(family).then(|| if rng.random_bool(0.5) { Side::Left } else { Side::Right });
        let speed = *[Speed::Slow, Speed::Normal, Speed::Fast].choose(rng).unwrap();
        ActionSpec { family, side, speed }
    }

    /// Verb phrase without the subject.
    pub fn phrase(&self) -> String {
        let side = match self.side {
            Some(Side::Left) => "left",
            Some(Side::Right) => "right",
            None => "",
        };
        let mut s = match self.family {
            "walk" => "walks forward".to_string(),
            "run" => "runs forward".to_string(),
            "jump" => "jumps in place".to_string(),
            "wave" => format!("waves the {side} hand"),
            "turn" => format!("turns {side}"),
            "kick" => format!("kicks with the {side} leg"),
            "squat" => "squats down".to_string(),
            "clap" => "claps the hands".to_string(),
            _ => unreachable!(),
        };
        match self.speed {
            Speed::Slow => s.push_str(" slowly"),
            Speed::Fast => s.push_str(" quickly"),
            Speed::Normal => {}
        }
        s
    }
}

pub fn sentence(subject: &str, actions: &[ActionSpec]) -> String {
    let phrases: Vec<String> = actions.iter().map(ActionSpec::phrase).collect();
    format!("{subject} {}", phrases.join(" and then "))
}

/// Every word the sentence templates can produce.
pub fn text_vocabulary() -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    let mut add = |s: &str| {
        for w in super::text::split_words(s) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
    };
    for s in SUBJECTS {
        add(s);
    }
    for f in TEXT_FAMILIES {
        for side in [Some(Side::Left), Some(Side::Right), None] {
            for speed in [Speed::Slow, Speed::Normal, Speed::Fast] {
                if family_has_side(f) == side.is_some() {
                    add(&ActionSpec { family: f, side, speed }.phrase());
                }
            }
        }
    }
    add("and then");
    Vocabulary::new(words)
}

/// Per-frame pose controls; every field blends linearly.
#[derive(Clone, Copy, Debug, Default)]
struct Pose {
    fwd_speed: f64,
    yaw_rate: f64,
    yaw_offset: f64,
    /// Non-integrated root displacement (forward, lateral) in the heading frame.
    offset: [f64; 2],
    height: f64,
    lean: f64,
    tilt: f64,
    leg_swing: [f64; 2],
    leg_side: [f64; 2],
    arm_fwd: [f64; 2],
    arm_raise: [f64; 2],
}

impl Pose {
    fn lerp(a: &Pose, b: &Pose, w: f64) -> Pose {
        let l = |x: f64, y: f64| (1.0 - w) * x + w * y;
        let l2 = |x: [f64; 2], y: [f64; 2]| [l(x[0], y[0]), l(x[1], y[1])];
        Pose {
            fwd_speed: l(a.fwd_speed, b.fwd_speed),
            yaw_rate: l(a.yaw_rate, b.yaw_rate),
            yaw_offset: l(a.yaw_offset, b.yaw_offset),
            offset: l2(a.offset, b.offset),
            height: l(a.height, b.height),
            lean: l(a.lean, b.lean),
            tilt: l(a.tilt, b.tilt),
            leg_swing: l2(a.leg_swing, b.leg_swing),
            leg_side: l2(a.leg_side, b.leg_side),
            arm_fwd: l2(a.arm_fwd, b.arm_fwd),
            arm_raise: l2(a.arm_raise, b.arm_raise),
        }
    }
}

/// Per-sample randomness applied on top of an action script.
#[derive(Clone, Copy, Debug)]
struct Jitter {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Jitter {
    fn draw<R: rand::Rng>(rng: &mut R) -> Self {
        Jitter {
            amp: rng.random_range(0.9..1.1),
            freq: rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

fn ramp(tau: f64, rise: f64) -> f64 {
    (tau / rise).clamp(0.0, 1.0)
}

/// `sin²` bumps, `reps` of them evenly spread over `dur` seconds.
fn bumps(tau: f64, dur: f64, reps: f64) -> f64 {
    let u = (tau / dur).clamp(0.0, 1.0) * reps;
    (PI * u.fract()).sin().powi(2)
}

fn side_index(side: Option<Side>) -> usize {
    match side {
        Some(Side::Right) => 1,
        _ => 0,
    }
}

fn action_pose(a: &ActionSpec, tau: f64, dur: f64, j: &Jitter) -> Pose {
    let s = a.speed.factor() * j.freq;
    let amp = j.amp;
    let mut p = Pose {
        height: 0.004 * (2.0 * PI * 0.3 * tau).sin(),
        ..Pose::default()
    };
    match a.family {
        "walk" | "run" => {
            let run = a.family == "run";
            let (v, swing, hz, arms) = if run { (2.4, 0.75, 1.5, 0.7) } else { (1.0, 0.45, 0.9, 0.35) };
            let ph = 2.0 * PI * hz * s * tau + j.phase;
            p.fwd_speed = v * s;
            p.leg_swing = [amp * swing * ph.sin(), -amp * swing * ph.sin()];
            p.arm_fwd = [-amp * arms * ph.sin(), amp * arms * ph.sin()];
            p.height += (if run { 0.05 } else { 0.02 }) * amp * (2.0 * ph).cos();
            p.lean = if run { 0.25 } else { 0.05 };
        }
        "jump" => {
            let reps = a.speed.reps() + 1.0;
            let w = ((tau / dur).clamp(0.0, 1.0) * reps).fract();
            let air = if (0.2..0.8).contains(&w) { (PI * (w - 0.2) / 0.6).sin() } else { 0.0 };
            let crouch = if w < 0.2 { (PI * w / 0.2).sin() } else { 0.0 };
            p.height += amp * (0.45 * air - 0.1 * crouch);
            p.leg_swing = [0.3 * air + 0.2 * crouch; 2];
            p.arm_raise = [0.8 * air; 2];
            p.arm_fwd = [1.2 * air - 0.4 * crouch; 2];
            p.lean = 0.25 * crouch;
        }
        "wave" => {
            let k = side_index(a.side);
            let up = ramp(tau, 0.5);
            p.arm_raise[k] = up * (2.5 * amp + 0.4 * (2.0 * PI * 1.8 * s * tau + j.phase).sin());
            p.arm_fwd[k] = 0.2 * up;
        }
        "turn" => {
            let sign = if a.side == Some(Side::Left) { 1.0 } else { -1.0 };
            let d = (dur / a.speed.factor()).min(dur);
            if tau < d {
                p.yaw_rate = sign * amp * (PI / 2.0) / d * 2.0 * (PI * tau / d).sin().powi(2);
            }
            let ph = 2.0 * PI * 1.2 * s * tau + j.phase;
            p.leg_swing = [0.2 * ph.sin(), -0.2 * ph.sin()];
            p.tilt = -sign * 0.05;
        }
        "kick" => {
            let k = side_index(a.side);
            let b = bumps(tau, dur, a.speed.reps());
            p.leg_swing[k] = 1.3 * amp * b;
            p.leg_swing[1 - k] = -0.1 * b;
            p.arm_raise = [0.35 * b; 2];
            p.lean = -0.2 * b;
        }
        "squat" => {
            let b = bumps(tau, dur, a.speed.reps());
            let drop = 0.32 * amp * b;
            let theta = ((PELVIS_HEIGHT - drop) / PELVIS_HEIGHT).acos();
            p.height -= drop;
            p.leg_swing = [theta; 2];
            p.arm_fwd = [1.3 * b; 2];
            p.lean = 0.35 * b;
        }
        "clap" => {
            let up = ramp(tau, 0.4);
            let c = 0.5 - 0.5 * (2.0 * PI * 1.5 * s * tau + j.phase).cos();
            p.arm_fwd = [1.35 * up; 2];
            p.arm_raise = [-0.35 * c * up; 2];
        }
        _ => unreachable!(),
    }
    p
}

fn dance_pose(genre: &str, c: f64, amp: f64) -> Pose {
    let mut p = Pose::default();
    match genre {
        "bounce" => {
            p.height = 0.07 * amp * c;
            p.leg_swing = [0.12 * amp * c; 2];
            p.arm_fwd = [0.35 * amp * (1.0 + c); 2];
        }
        "sway" => {
            p.offset[1] = 0.12 * amp * c;
            p.tilt = 0.18 * amp * c;
            p.arm_raise = [0.5 + 0.3 * amp * c, 0.5 - 0.3 * amp * c];
        }
        "pump" => {
            p.arm_raise = [1.6 + 1.0 * amp * c; 2];
            p.height = 0.03 * amp * c;
            p.lean = 0.08 * amp * c;
        }
        "twist" => {
            p.yaw_offset = 0.5 * amp * c;
            p.leg_side = [0.1 * amp * (1.0 + c), 0.1 * amp * (1.0 - c)];
            p.arm_fwd = [0.6 * amp * c, -0.6 * amp * c];
        }
        "step" => {
            p.leg_side = [0.25 * amp * (1.0 + c) / 2.0, 0.25 * amp * (1.0 - c) / 2.0];
            p.offset[1] = 0.08 * amp * c;
            p.arm_fwd = [0.4 * amp * c, -0.4 * amp * c];
            p.height = 0.03 * amp * c * c;
        }
        _ => unreachable!(),
    }
    p
}

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn rot_x(a: f64) -> Mat3 {
    let (c, s) = (a.cos(), a.sin());
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (c, s) = (a.cos(), a.sin());
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (c, s) = (a.cos(), a.sin());
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Forward kinematics on the desk skeleton. `yaw0` and `start` place frame 0.
fn render(poses: &[Pose], fps: f64, yaw0: f64, start: [f64; 2]) -> MotionSequence {
    let sk = Skeleton::desk_default();
    let dt = 1.0 / fps;
    let (mut x, mut z, mut yaw) = (start[0], start[1], yaw0);
    let mut data = Vec::with_capacity(poses.len() * 24);
    for (t, p) in poses.iter().enumerate() {
        if t > 0 {
            yaw += p.yaw_rate * dt;
            x += p.fwd_speed * dt * yaw.cos();
            z -= p.fwd_speed * dt * yaw.sin();
        }
        let heading = rot_y(yaw);
        let off = apply(&heading, [p.offset[0], 0.0, p.offset[1]]);
        let root = [x + off[0], PELVIS_HEIGHT + p.height, z + off[2]];
        let g0 = rot_y(yaw + p.yaw_offset);

        let mut local = [[[0.0; 3]; 3]; 8];
        for (j, m) in local.iter_mut().enumerate() {
            *m = match j {
                3 => mul(&rot_z(p.leg_swing[0]), &rot_x(p.leg_side[0])),
                4 => mul(&rot_z(p.leg_swing[1]), &rot_x(-p.leg_side[1])),
                5 => mul(&rot_z(-p.lean), &rot_x(p.tilt)),
                6 => mul(&rot_z(p.arm_fwd[0]), &rot_x(p.arm_raise[0])),
                7 => mul(&rot_z(p.arm_fwd[1]), &rot_x(-p.arm_raise[1])),
                _ => rot_x(0.0),
            };
        }
        let mut global = [[[0.0; 3]; 3]; 8];
        let mut pos = [[0.0; 3]; 8];
        for j in 0..8 {
            match sk.parent(j) {
                None => {
                    global[j] = g0;
                    pos[j] = root;
                }
                Some(par) => {
                    let r = mul(&global[par], &local[j]);
                    let o = apply(&r, sk.offset(j));
                    pos[j] = [pos[par][0] + o[0], pos[par][1] + o[1], pos[par][2] + o[2]];
                    global[j] = r;
                }
            }
        }
        for q in pos {
            data.extend_from_slice(&q);
        }
    }
    MotionSequence::new(fps, 8, data).expect("rendered motion is well formed")
}

/// Renders `actions` back to back, splitting `frames` evenly and crossfading 8 frames
/// around each boundary.
fn render_actions<R: rand::Rng>(actions: &[ActionSpec], frames: usize, fps: f64, rng: &mut R) -> MotionSequence {
    let n = actions.len();
    let seg = frames / n;
    let dur = seg as f64 / fps;
    let jitters: Vec<Jitter> = actions.iter().map(|_| Jitter::draw(rng)).collect();
    let half = 4usize;
    let poses: Vec<Pose> = (0..frames)
        .map(|t| {
            let k = (t / seg).min(n - 1);
            let local = |i: usize| {
                let tau = (t as f64 - (i * seg) as f64) / fps;
                action_pose(&actions[i], tau.max(0.0), dur, &jitters[i])
            };
            let here = local(k);
            let into = t - k * seg;
            if k + 1 < n && into + half >= seg {
                let w = (into + half - seg) as f64 + 0.5;
                Pose::lerp(&here, &local(k + 1), w / (2 * half) as f64)
            } else if k > 0 && into < half {
                let w = (into + half) as f64 + 0.5;
                Pose::lerp(&local(k - 1), &here, w / (2 * half) as f64)
            } else {
                here
            }
        })
        .collect();
    let yaw0 = rng.random_range(0.0..2.0 * PI);
    let start = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    render(&poses, fps, yaw0, start)
}

/// Renders one text sample's motion from an explicit action list.
pub fn text_motion(actions: &[ActionSpec], frames: usize, fps: f64, seed: u64) -> Result<MotionSequence> {
    if actions.is_empty() || frames < 2 * actions.len() {
        return Err(Error::Config("need at least one action and two frames per action".into()));
    }
    Ok(render_actions(actions, frames, fps, &mut seeded(seed)))
}

/// Dance motion, beat frames (interior ones only) and the paired waveform.
pub struct Dance {
    pub motion: MotionSequence,
    pub beat_frames: Vec<usize>,
    pub waveform: Vec<f64>,
}

fn drone_hz(genre: &str) -> f64 {
    match genre {
        "bounce" => 110.0,
        "sway" => 165.0,
        "pump" => 220.0,
        "twist" => 275.0,
        _ => 330.0,
    }
}

pub fn dance_clip<R: rand::Rng>(genre: &str, period: usize, cfg: &SynthConfig, rng: &mut R) -> Result<Dance> {
    if !DANCE_GENRES.contains(&genre) {
        return Err(Error::Config(format!("unknown dance genre `{genre}`")));
    }
    let frames = cfg.frames;
    let t0 = rng.random_range(0..period);
    let amp = rng.random_range(0.85..1.15);
    let poses: Vec<Pose> = (0..frames)
        .map(|t| dance_pose(genre, (PI * (t as f64 - t0 as f64) / period as f64).cos(), amp))
        .collect();
    let yaw0 = rng.random_range(0.0..2.0 * PI);
    let start = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let motion = render(&poses, cfg.fps, yaw0, start);

    let all_beats: Vec<usize> = (t0..frames).step_by(period).collect();
    let beat_frames = all_beats.iter().copied().filter(|&b| b >= 2 && b + 3 <= frames).collect();

    let hop = cfg.audio.hop(cfg.sample_rate)?;
    let rate = cfg.sample_rate;
    let f0 = drone_hz(genre) * rng.random_range(0.97..1.03);
    let mut wave: Vec<f64> = (0..frames * hop)
        .map(|i| {
            let t = i as f64 / rate;
            let tone: f64 = (1..=3).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum();
            let n: f64 = StandardNormal.sample(rng);
            0.15 * tone + 0.002 * n
        })
        .collect();
    let click = (0.03 * rate) as usize;
    for &b in &all_beats {
        let at = b * hop;
        for i in 0..click.min(wave.len() - at) {
            let n: f64 = StandardNormal.sample(rng);
            wave[at + i] += 0.6 * n * (-(i as f64) / (0.3 * click as f64)).exp();
        }
    }
    Ok(Dance {
        motion,
        beat_frames,
        waveform: wave,
    })
}

fn families(counts: &[FamilyCount]) -> Vec<&'static str> {
    counts
        .iter()
        .filter(|f| f.train + f.test > 0)
        .filter_map(|f| TEXT_FAMILIES.iter().chain(&DANCE_GENRES).find(|n| **n == f.name).copied())
        .collect()
}

/// Builds every sample in memory. Pure function of `(cfg, seed)`.
pub fn synth_samples(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut master = seeded(seed);
    let text_pool = families(&cfg.text);
    let mut out = Vec::new();
    let mut stream = 0u64;
    let mut test_texts: HashSet<String> = HashSet::new();

    for fc in &cfg.text {
        let family = *TEXT_FAMILIES.iter().find(|f| **f == fc.name).unwrap();
        for (split, count) in [(Split::Train, fc.train), (Split::Test, fc.test)] {
            for n in 0..count {
                let mut attempts = 0;
                let (actions, text) = loop {
                    let mut actions = vec![ActionSpec::random(family, &mut master)];
                    if master.random_bool(cfg.compound_prob) {
                        let second = *text_pool.choose(&mut master).unwrap();
                        actions.push(ActionSpec::random(second, &mut master));
                    }
                    let subject = *SUBJECTS.choose(&mut master).unwrap();
                    let text = sentence(subject, &actions);
                    if split == Split::Train || test_texts.insert(text.clone()) {
                        break (actions, text);
                    }
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(Error::Config(format!(
                            "cannot draw {count} distinct test sentences for `{family}`"
                        )));
                    }
                };
                let mut rng: Rng = derive(seed, stream);
                stream += 1;
                let motion = render_actions(&actions, cfg.frames, cfg.fps, &mut rng);
                out.push(Sample {
                    id: format!("{family}_{}_{n:04}", split_name(split)),
                    split,
                    motion,
                    cond: Condition::Text(text),
                });
            }
        }
    }

    for fc in &cfg.dance {
        for (split, count) in [(Split::Train, fc.train), (Split::Test, fc.test)] {
            for n in 0..count {
                let period = *BEAT_PERIODS.choose(&mut master).unwrap();
                let mut rng: Rng = derive(seed, stream);
                stream += 1;
                let dance = dance_clip(&fc.name, period, cfg, &mut rng)?;
                let mut feats = extract_audio_features(&dance.waveform, cfg.sample_rate, &cfg.audio)?;
                feats.beat_times = Some(dance.beat_frames.iter().map(|&b| b as f64 / cfg.fps).collect());
                out.push(Sample {
                    id: format!("{}_{}_{n:04}", fc.name, split_name(split)),
                    split,
                    motion: dance.motion,
                    cond: Condition::Audio(feats),
                });
            }
        }
    }
    Ok(out)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Writes samples under `dir` as `motion/<id>.motion`, `cond/<id>.{txt,feat}`,
/// `manifest.jsonl` and `vocab.txt`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    for s in samples {
        let motion = format!("motion/{}.motion", s.id);
        save_motion(&dir.join(&motion), &s.motion)?;
        let cond = match &s.cond {
            Condition::Text(t) => {
                let rel = format!("cond/{}.txt", s.id);
                write_atomic(&dir.join(&rel), format!("{t}\n").as_bytes())?;
                rel
            }
            Condition::Audio(f) => {
                let rel = format!("cond/{}.feat", s.id);
                save_features(&dir.join(&rel), f)?;
                rel
            }
        };
        manifest.entries.push(ManifestEntry {
            id: s.id.clone(),
            modality: s.cond.modality(),
            motion,
            cond,
            split: s.split,
        });
    }
    manifest.save(&dir.join("manifest.jsonl"))?;
    text_vocabulary().save(&dir.join("vocab.txt"))?;
    Ok(manifest)
}

pub fn synth_dataset(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let samples = synth_samples(cfg, seed)?;
    write_dataset(dir, &samples)
}

pub fn count(samples: &[Sample], modality: Modality, split: Split) -> usize {
    samples
        .iter()
        .filter(|s| s.cond.modality() == modality && s.split == split)
        .count()
}
