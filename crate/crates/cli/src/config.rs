//! Flat TOML run configuration. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ude_core::dmd::{DmdConfig, DmdTrainConfig};
use ude_core::mate::MateConfig;
use ude_core::metrics::retrieval::DEFAULT_DISTRACTORS;
use ude_core::metrics::{RetrievalConfig, DEFAULT_SIGMA_FRAMES};
use ude_core::motion::synth::{FamilyCount, DANCE_GENRES, TEXT_FAMILIES};
use ude_core::motion::SynthConfig;
use ude_core::mq::{MqConfig, MqTrainConfig, DOWNSAMPLE};
use ude_core::pipeline::{DecoderKind, PipelineConfig};
use ude_core::utt::{DiscConfig, Sampling, UttConfig, UttTrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingKind {
    Greedy,
    Temperature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,

    // synthetic data
    pub fps: f64,
    pub frames: usize,
    pub text_train: usize,
    pub text_test: usize,
    pub audio_train: usize,
    pub audio_test: usize,
    pub text_families: Vec<String>,
    pub dance_genres: Vec<String>,
    pub compound_prob: f64,

    // motion quantization
    pub codes: usize,
    pub code_dim: usize,
    pub mq_hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub mq_epochs: usize,
    pub mq_batch: usize,
    pub mq_lr: f64,
    pub codebook_lr_scale: f64,
    pub max_grad_norm: f64,

    // condition encoder, token transformer and discriminator
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mate_layers: usize,
    pub utt_layers: usize,
    pub disc_layers: usize,
    pub z_dim: usize,
    pub max_text_len: usize,
    pub max_audio_len: usize,
    pub max_tokens: usize,
    pub utt_epochs: usize,
    pub utt_batch: usize,
    pub utt_lr: f64,
    pub disc_lr: f64,
    pub beta_adv: f64,

    // diffusion decoder
    pub diffusion_steps: usize,
    pub dmd_enc_layers: usize,
    pub dmd_dec_layers: usize,
    pub dmd_epochs: usize,
    pub dmd_batch: usize,
    pub dmd_lr: f64,

    // retrieval encoder
    pub retrieval_width: usize,
    pub retrieval_dim: usize,
    pub retrieval_epochs: usize,
    pub retrieval_batch: usize,
    pub retrieval_lr: f64,
    pub retrieval_temperature: f64,
    pub retrieval_distractors: usize,
    pub retrieval_trials: usize,

    // generation and evaluation
    pub sampling: SamplingKind,
    pub temperature: f64,
    /// 0 keeps a quarter of the codebook.
    pub top_k: usize,
    pub use_z: bool,
    pub decoder: DecoderKind,
    pub beat_sigma_frames: f64,
    pub samples_per_input: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let mq = MqConfig::default();
        let mq_train = MqTrainConfig::default();
        let mate = MateConfig::default();
        let utt = UttConfig::default();
        let utt_train = UttTrainConfig::default();
        let dmd = DmdConfig::default();
        let dmd_train = DmdTrainConfig::default();
        let ret = RetrievalConfig::default();
        let total = |f: &[FamilyCount], test: bool| f.iter().map(|c| if test { c.test } else { c.train }).sum();
        RunConfig {
            seed: 0,
            data_dir: "data".into(),
            run_dir: "runs".into(),
            fps: synth.fps,
            frames: synth.frames,
            text_train: total(&synth.text, false),
            text_test: total(&synth.text, true),
            audio_train: total(&synth.dance, false),
            audio_test: total(&synth.dance, true),
            text_families: TEXT_FAMILIES.iter().map(|s| s.to_string()).collect(),
            dance_genres: DANCE_GENRES.iter().map(|s| s.to_string()).collect(),
            compound_prob: synth.compound_prob,
            codes: mq.codes,
            code_dim: mq.code_dim,
            mq_hidden: mq.hidden,
            beta1: mq.beta1,
            beta2: mq.beta2,
            mq_epochs: mq_train.epochs,
            mq_batch: mq_train.batch,
            mq_lr: mq_train.lr,
            codebook_lr_scale: mq_train.codebook_lr_scale,
            max_grad_norm: mq_train.max_grad_norm,
            width: utt.width,
            heads: utt.heads,
            hidden: utt.hidden,
            mate_layers: mate.layers,
            utt_layers: utt.layers,
            disc_layers: DiscConfig::default().layers,
            z_dim: utt.z_dim,
            max_text_len: mate.max_text_len,
            max_audio_len: mate.max_audio_len,
            max_tokens: utt.max_tokens,
            utt_epochs: utt_train.epochs,
            utt_batch: utt_train.batch,
            utt_lr: utt_train.lr,
            disc_lr: utt_train.disc_lr,
            beta_adv: utt_train.beta_adv,
            diffusion_steps: dmd.steps,
            dmd_enc_layers: dmd.enc_layers,
            dmd_dec_layers: dmd.dec_layers,
            dmd_epochs: dmd_train.epochs,
            dmd_batch: dmd_train.batch,
            dmd_lr: dmd_train.lr,
            retrieval_width: ret.width,
            retrieval_dim: ret.dim,
            retrieval_epochs: ret.epochs,
            retrieval_batch: ret.batch,
            retrieval_lr: ret.lr,
            retrieval_temperature: ret.temperature,
            retrieval_distractors: DEFAULT_DISTRACTORS,
            retrieval_trials: 10_000,
            sampling: SamplingKind::Temperature,
            temperature: 1.0,
            top_k: 0,
            use_z: false,
            decoder: DecoderKind::Diffusion,
            beat_sigma_frames: DEFAULT_SIGMA_FRAMES,
            samples_per_input: 1,
        }
    }
}

fn spread(names: &[String], train: usize, test: usize) -> Vec<FamilyCount> {
    let n = names.len();
    names
        .iter()
        .enumerate()
        .map(|(i, f)| FamilyCount::new(f, train / n + usize::from(i < train % n), test / n + usize::from(i < test % n)))
        .filter(|c| c.train + c.test > 0)
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The resolved config as TOML; this is what every artifact echoes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.frames == 0 || self.frames % DOWNSAMPLE != 0 {
            return bad(format!("frames must be a positive multiple of {DOWNSAMPLE}, got {}", self.frames));
        }
        if self.codes < 2 {
            return bad("codes must be at least 2".into());
        }
        if self.width % self.heads.max(1) != 0 || self.heads == 0 {
            return bad(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.frames / DOWNSAMPLE + 1 > self.max_tokens {
            return bad(format!(
                "max_tokens {} cannot hold {} tokens plus BOS",
                self.max_tokens,
                self.frames / DOWNSAMPLE
            ));
        }
        if self.text_families.is_empty() && self.text_train + self.text_test > 0 {
            return bad("text samples requested but text_families is empty".into());
        }
        if self.dance_genres.is_empty() && self.audio_train + self.audio_test > 0 {
            return bad("audio samples requested but dance_genres is empty".into());
        }
        if self.sampling == SamplingKind::Temperature && !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !(self.beat_sigma_frames > 0.0) {
            return bad("beat_sigma_frames must be positive".into());
        }
        if self.samples_per_input == 0 {
            return bad("samples_per_input must be at least 1".into());
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            fps: self.fps,
            frames: self.frames,
            text: if self.text_families.is_empty() {
                Vec::new()
            } else {
                spread(&self.text_families, self.text_train, self.text_test)
            },
            dance: if self.dance_genres.is_empty() {
                Vec::new()
            } else {
                spread(&self.dance_genres, self.audio_train, self.audio_test)
            },
            compound_prob: self.compound_prob,
            ..SynthConfig::default()
        }
    }

    pub fn sampling(&self) -> Sampling {
        match self.sampling {
            SamplingKind::Greedy => Sampling::Greedy,
            SamplingKind::Temperature => Sampling::Temperature {
                temperature: self.temperature,
                top_k: if self.top_k == 0 { (self.codes / 4).max(1) } else { self.top_k },
            },
        }
    }

    /// Model and schedule settings for data with the given widths.
    pub fn pipeline(&self, channels: usize, vocab_size: usize, audio_dims: usize) -> PipelineConfig {
        let mut p = PipelineConfig::default();
        p.mq = MqConfig {
            hidden: self.mq_hidden,
            codes: self.codes,
            code_dim: self.code_dim,
            beta1: self.beta1,
            beta2: self.beta2,
            fps: self.fps,
            ..p.mq
        };
        p.mq_train = MqTrainConfig {
            epochs: self.mq_epochs,
            batch: self.mq_batch,
            lr: self.mq_lr,
            max_grad_norm: self.max_grad_norm,
            codebook_lr_scale: self.codebook_lr_scale,
        };
        p.mate = MateConfig {
            layers: self.mate_layers,
            heads: self.heads,
            hidden: self.hidden,
            max_text_len: self.max_text_len,
            max_audio_len: self.max_audio_len,
            ..p.mate
        };
        p.utt = UttConfig {
            width: self.width,
            layers: self.utt_layers,
            heads: self.heads,
            hidden: self.hidden,
            z_dim: self.z_dim,
            max_tokens: self.max_tokens,
            ..p.utt
        };
        p.disc = DiscConfig {
            layers: self.disc_layers,
            heads: self.heads,
            hidden: self.hidden,
            ..p.disc
        };
        p.utt_train = UttTrainConfig {
            epochs: self.utt_epochs,
            batch: self.utt_batch,
            lr: self.utt_lr,
            disc_lr: self.disc_lr,
            beta_adv: self.beta_adv,
            max_grad_norm: self.max_grad_norm,
        };
        p.dmd = DmdConfig {
            width: self.width,
            enc_layers: self.dmd_enc_layers,
            dec_layers: self.dmd_dec_layers,
            heads: self.heads,
            hidden: self.hidden,
            steps: self.diffusion_steps,
            ..p.dmd
        };
        p.dmd_train = DmdTrainConfig {
            epochs: self.dmd_epochs,
            batch: self.dmd_batch,
            lr: self.dmd_lr,
            max_grad_norm: self.max_grad_norm,
        };
        p.retrieval = RetrievalConfig {
            width: self.retrieval_width,
            dim: self.retrieval_dim,
            epochs: self.retrieval_epochs,
            batch: self.retrieval_batch,
            lr: self.retrieval_lr,
            temperature: self.retrieval_temperature,
            ..p.retrieval
        };
        p.for_data(channels, vocab_size, audio_dims)
    }

    /// Sets every stage's epoch count.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.mq_epochs = epochs;
        self.utt_epochs = epochs;
        self.dmd_epochs = epochs;
        self.retrieval_epochs = epochs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("epochs = 3\n").unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        assert!(e.to_string().contains("epochs"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::from_toml("codes = 16\nsampling = \"temperature\"\ntop_k = 4\n").unwrap();
        c.seed = 99;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.sampling(), Sampling::Temperature { temperature: 1.0, top_k: 4 });
        let d = RunConfig::default();
        assert_eq!(d.sampling(), Sampling::Temperature { temperature: 1.0, top_k: d.codes / 4 });
    }

    #[test]
    fn frames_must_split_into_tokens() {
        assert!(RunConfig::from_toml("frames = 30\n").is_err());
    }

    #[test]
    fn default_counts_match_the_synthetic_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.synth(), SynthConfig::default());
        let p = c.pipeline(24, 30, 17);
        assert_eq!(p.utt.codes, c.codes);
        assert_eq!(p.mate.vocab_size, 30);
    }

    #[test]
    fn zero_counts_drop_the_family() {
        let c = RunConfig::from_toml("text_train = 3\ntext_test = 0\n").unwrap();
        let s = c.synth();
        assert_eq!(s.text.len(), 3);
    }
}
