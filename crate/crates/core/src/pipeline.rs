//! Stage wiring shared by the command line and the end-to-end tests: data
//! preparation, staged training and generation.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dmd::{train_dmd, DmdConfig, DmdModel, DmdSample, DmdTrainConfig};
use crate::error::{Error, Result};
use crate::mate::{MateConfig, MateModel, ModalityInput};
use crate::metrics::{detect_motion_beats, train_retrieval_encoder, RetrievalConfig, RetrievalEncoder};
use crate::motion::audio::onset_beats;
use crate::motion::{normalize_heading, Condition, Modality, MotionSequence, Sample, Split, TextPrompt, Vocabulary};
use crate::mq::{train_mq, MqConfig, MqModel, MqTrainConfig, TokenSequence, DOWNSAMPLE};
use crate::numerics::nn::Standardizer;
use crate::rng::derive;
use crate::utt::{
    train_utt, DiscConfig, Discriminator, GenerateOptions, Sampling, UttConfig, UttEpoch, UttModel, UttSample,
    UttTrainConfig,
};

/// A dataset sample after heading normalization and condition encoding.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub split: Split,
    pub motion: MotionSequence,
    pub input: ModalityInput,
    pub text: Option<String>,
    /// Audio beat times (s); constructed beats when stored, onsets otherwise.
    pub audio_beats: Option<Vec<f64>>,
}

impl Prepared {
    pub fn modality(&self) -> Modality {
        self.input.modality()
    }
}

pub fn prepare(samples: &[Sample], vocab: &Vocabulary) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let motion = normalize_heading(&s.motion)?;
            let (input, text, audio_beats) = match &s.cond {
                Condition::Text(t) => (ModalityInput::Text(TextPrompt::tokenize(t, vocab).ids), Some(t.clone()), None),
                Condition::Audio(a) => {
                    let beats = a.beat_times.clone().unwrap_or_else(|| onset_beats(a));
                    (ModalityInput::Audio(a.features().clone()), None, Some(beats))
                }
            };
            Ok(Prepared {
                id: s.id.clone(),
                split: s.split,
                motion,
                input,
                text,
                audio_beats,
            })
        })
        .collect()
}

pub fn split(samples: &[Prepared], split: Split) -> Vec<&Prepared> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Widths and depths of every model, plus the training schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mq: MqConfig,
    pub mq_train: MqTrainConfig,
    pub mate: MateConfig,
    pub utt: UttConfig,
    pub disc: DiscConfig,
    pub utt_train: UttTrainConfig,
    pub dmd: DmdConfig,
    pub dmd_train: DmdTrainConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mq: MqConfig::default(),
            mq_train: MqTrainConfig::default(),
            mate: MateConfig::default(),
            utt: UttConfig::default(),
            disc: DiscConfig::default(),
            utt_train: UttTrainConfig::default(),
            dmd: DmdConfig::default(),
            dmd_train: DmdTrainConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Fills the widths that must agree across stages.
    pub fn for_data(mut self, channels: usize, vocab_size: usize, audio_dims: usize) -> Self {
        self.mq.channels = channels;
        self.disc.channels = channels;
        self.dmd.channels = channels;
        self.utt.codes = self.mq.codes;
        self.dmd.codes = self.mq.codes;
        self.mate.vocab_size = vocab_size;
        self.mate.audio_dims = audio_dims;
        self.disc.width = self.utt.width;
        self.mate.width = self.utt.width;
        self.dmd.fps = self.mq.fps;
        self
    }
}

pub fn train_mq_stage(cfg: &PipelineConfig, train: &[&Prepared], seed: u64) -> Result<(MqModel, Vec<f64>)> {
    let motions: Vec<MotionSequence> = train.iter().map(|s| s.motion.clone()).collect();
    let tensors: Vec<_> = motions.iter().map(|m| m.to_tensor()).collect();
    let norm = Standardizer::fit(&tensors);
    let mut mq = MqModel::new(cfg.mq.clone(), norm, derive(seed, 1).next_u64())?;
    let history = train_mq(&mut mq, &motions, &cfg.mq_train, derive(seed, 2).next_u64())?;
    Ok((mq, history))
}

/// Untrained MATE, UTT and discriminator for `mq`; audio normalization is fitted on `train`.
pub fn init_token_models(
    cfg: &PipelineConfig,
    mq: &MqModel,
    train: &[&Prepared],
    seed: u64,
) -> Result<(MateModel, UttModel, Discriminator)> {
    let audio: Vec<_> = train
        .iter()
        .filter_map(|s| match &s.input {
            ModalityInput::Audio(f) => Some(f),
            ModalityInput::Text(_) => None,
        })
        .collect();
    let audio_norm = if audio.is_empty() {
        Standardizer::identity(cfg.mate.audio_dims)
    } else {
        Standardizer::fit(audio)
    };
    let mate = MateModel::new(cfg.mate.clone(), audio_norm, derive(seed, 3).next_u64())?;
    let utt = UttModel::new(cfg.utt.clone(), derive(seed, 4).next_u64())?;
    let disc = Discriminator::new(cfg.disc.clone(), mq.norm.clone(), derive(seed, 5).next_u64())?;
    Ok((mate, utt, disc))
}

pub fn utt_samples(mq: &MqModel, data: &[&Prepared]) -> Result<Vec<UttSample>> {
    data.iter().map(|s| UttSample::new(mq, s.input.clone(), &s.motion)).collect()
}

pub struct TokenStage {
    pub mate: MateModel,
    pub utt: UttModel,
    pub disc: Discriminator,
    pub history: Vec<UttEpoch>,
}

pub fn train_token_stage(cfg: &PipelineConfig, mq: &MqModel, train: &[&Prepared], seed: u64) -> Result<TokenStage> {
    let (mut mate, mut utt, mut disc) = init_token_models(cfg, mq, train, seed)?;
    let samples = utt_samples(mq, train)?;
    let history = train_utt(
        &mut mate,
        &mut utt,
        &mut disc,
        mq,
        &samples,
        &cfg.utt_train,
        derive(seed, 6).next_u64(),
    )?;
    Ok(TokenStage { mate, utt, disc, history })
}

pub fn train_dmd_stage(cfg: &PipelineConfig, mq: &MqModel, train: &[&Prepared], seed: u64) -> Result<(DmdModel, Vec<f64>)> {
    let samples = train.iter().map(|s| DmdSample::from_mq(mq, &s.motion)).collect::<Result<Vec<_>>>()?;
    let mut dmd = DmdModel::new(cfg.dmd.clone(), mq.norm.clone(), derive(seed, 7).next_u64())?;
    let history = train_dmd(&mut dmd, &samples, &cfg.dmd_train, derive(seed, 8).next_u64())?;
    Ok((dmd, history))
}

pub fn train_retrieval_stage(
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
    train: &[&Prepared],
    seed: u64,
) -> Result<(RetrievalEncoder, Vec<f64>)> {
    let pairs: Vec<(MotionSequence, String)> = train
        .iter()
        .filter_map(|s| s.text.as_ref().map(|t| (s.motion.clone(), t.clone())))
        .collect();
    train_retrieval_encoder(&pairs, vocab, &cfg.retrieval, derive(seed, 9).next_u64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Vq,
    Diffusion,
}

/// Settings of one generation call.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSettings {
    pub frames: usize,
    pub sampling: Sampling,
    pub use_z: bool,
    pub decoder: DecoderKind,
    pub seed: u64,
}

impl GenSettings {
    /// Greedy, no z, VQ decoder.
    pub fn deterministic(frames: usize) -> Self {
        GenSettings {
            frames,
            sampling: Sampling::Greedy,
            use_z: false,
            decoder: DecoderKind::Vq,
            seed: 0,
        }
    }
}

/// Trained models needed to turn a condition into motion.
pub struct Generator<'a> {
    pub mq: &'a MqModel,
    pub mate: &'a MateModel,
    pub utt: &'a UttModel,
    pub dmd: Option<&'a DmdModel>,
}

fn token_count(frames: usize) -> Result<usize> {
    if frames == 0 || frames % DOWNSAMPLE != 0 {
        return Err(Error::Length(format!(
            "target of {frames} frames is not a positive multiple of {DOWNSAMPLE}"
        )));
    }
    Ok(frames / DOWNSAMPLE)
}

impl Generator<'_> {
    pub fn tokens(&self, input: &ModalityInput, s: &GenSettings, primitive: &[usize]) -> Result<TokenSequence> {
        let n = token_count(s.frames)?;
        let cond = self.mate.encode(input)?;
        let z = s.use_z.then(|| self.utt.sample_z(derive(s.seed, 11).next_u64()));
        let opts = GenerateOptions {
            max_len: n,
            min_len: n,
            sampling: s.sampling.clone(),
            primitive: primitive.to_vec(),
            z,
            seed: derive(s.seed, 12).next_u64(),
        };
        self.utt.generate_tokens(&cond, &opts)
    }

    pub fn decode(&self, tokens: &TokenSequence, decoder: DecoderKind, seed: u64) -> Result<MotionSequence> {
        match decoder {
            DecoderKind::Vq => self.mq.decode(tokens),
            DecoderKind::Diffusion => {
                let dmd = self
                    .dmd
                    .ok_or_else(|| Error::Contract("diffusion decoding needs a DMD checkpoint".into()))?;
                dmd.decode_tokens(tokens, derive(seed, 13).next_u64())
            }
        }
    }

    pub fn generate(&self, input: &ModalityInput, s: &GenSettings) -> Result<(TokenSequence, MotionSequence)> {
        let tokens = self.tokens(input, s, &[])?;
        let motion = self.decode(&tokens, s.decoder, s.seed)?;
        Ok((tokens, motion))
    }

    /// Text segment, then an audio continuation primed with its last `primitive_len` tokens.
    pub fn transition(
        &self,
        text: &ModalityInput,
        audio: &ModalityInput,
        primitive_len: usize,
        s: &GenSettings,
    ) -> Result<Transition> {
        let first = self.tokens(text, s, &[])?;
        if first.len() < primitive_len {
            return Err(Error::Contract(format!(
                "text segment has {} tokens, fewer than the primitive of {primitive_len}",
                first.len()
            )));
        }
        let primitive = &first[first.len() - primitive_len..];
        let mut second_settings = s.clone();
        second_settings.frames = s.frames + primitive_len * DOWNSAMPLE;
        second_settings.seed = derive(s.seed, 14).next_u64();
        let second = self.tokens(audio, &second_settings, primitive)?;
        let mut joined = first.clone();
        joined.extend_from_slice(&second[primitive_len..]);
        let motion = self.decode(&joined, s.decoder, s.seed)?;
        let boundary = first.len() * DOWNSAMPLE;
        Ok(Transition {
            jump: boundary_jump(&motion, boundary)?,
            median_step: median_step(&motion),
            first,
            second,
            boundary_frame: boundary,
            motion,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub first: TokenSequence,
    /// Audio-conditioned tokens, primitive included.
    pub second: TokenSequence,
    pub motion: MotionSequence,
    pub boundary_frame: usize,
    /// Largest per-joint displacement between the frames around the boundary.
    pub jump: f64,
    pub median_step: f64,
}

fn step(m: &MotionSequence, t: usize) -> f64 {
    (0..m.joints())
        .map(|j| {
            let (a, b) = (m.joint(t - 1, j), m.joint(t, j));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn boundary_jump(m: &MotionSequence, boundary: usize) -> Result<f64> {
    if boundary == 0 || boundary >= m.frames() {
        return Err(Error::Contract(format!("boundary {boundary} outside (0, {})", m.frames())));
    }
    Ok(step(m, boundary))
}

/// Median over frames of the largest per-joint frame-to-frame displacement.
pub fn median_step(m: &MotionSequence) -> f64 {
    let mut steps: Vec<f64> = (1..m.frames()).map(|t| step(m, t)).collect();
    if steps.is_empty() {
        return 0.0;
    }
    steps.sort_by(f64::total_cmp);
    let n = steps.len();
    if n % 2 == 1 {
        steps[n / 2]
    } else {
        0.5 * (steps[n / 2 - 1] + steps[n / 2])
    }
}

/// Motion beats of generated clips against audio beats; mean over clips.
pub fn mean_beat_align(pairs: &[(MotionSequence, Vec<f64>)], sigma: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("no audio clips to score".into()));
    }
    let mut total = 0.0;
    for (m, audio) in pairs {
        let mb = detect_motion_beats(m)?;
        total += crate::metrics::beat_align(&mb, audio, sigma)?;
    }
    Ok(total / pairs.len() as f64)
}
