use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use ude_core::mate::ModalityInput;
use ude_core::motion::io::{load_features, save_motion, write_atomic};
use ude_core::motion::{Modality, MotionSequence, TextPrompt, Vocabulary};
use ude_core::mq::{TokenSequence, DOWNSAMPLE};
use ude_core::pipeline::{DecoderKind, GenSettings, Generator};

use crate::artifacts::{load_models, write_json, Models};
use crate::config::RunConfig;
use crate::plot::motion_svg;
use crate::{CliError, DecoderArg};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Text prompt.
    #[arg(long, conflicts_with = "audio", required_unless_present = "audio")]
    pub text: Option<String>,
    /// Audio feature file (`UDEFEAT v1`).
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
    #[arg(long, default_value = "generated")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TransitionArgs {
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub audio: PathBuf,
    /// Trailing text tokens fed as the prefix of the audio segment.
    #[arg(long, default_value_t = 8)]
    pub primitive_len: usize,
    #[command(flatten)]
    pub gen: GenFlags,
    #[arg(long, default_value = "transition")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct GenFlags {
    /// Frames per generated segment; must be a multiple of 4.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Inject a seeded random latent into the token transformer.
    #[arg(long)]
    pub z: bool,
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
    /// Run directory holding the checkpoints (overrides `run_dir`).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Also write an SVG of the root path and joint heights.
    #[arg(long)]
    pub plot: bool,
}

impl GenFlags {
    /// Applies the flags to `cfg`; returns the frame count.
    fn apply(&self, cfg: &mut RunConfig) -> Result<usize, CliError> {
        if self.z {
            cfg.use_z = true;
        }
        if let Some(d) = self.decoder {
            cfg.decoder = d.into();
        }
        if let Some(r) = &self.run {
            cfg.run_dir = r.clone();
        }
        cfg.validate()?;
        let frames = self.frames.unwrap_or(cfg.frames);
        if frames == 0 || frames % DOWNSAMPLE != 0 {
            return Err(CliError::Config(format!(
                "--frames must be a positive multiple of {DOWNSAMPLE}, got {frames}"
            )));
        }
        Ok(frames)
    }
}

/// Resolved request, echoed next to the output.
#[derive(Clone, Debug, Serialize)]
pub struct GenerationRequest {
    pub modality: Modality,
    pub prompt: Option<String>,
    pub feature_file: Option<PathBuf>,
    pub frames: usize,
    pub z: bool,
    pub decoder: DecoderKind,
    pub seed: u64,
    pub output: PathBuf,
}

pub fn settings(cfg: &RunConfig, frames: usize) -> GenSettings {
    GenSettings {
        frames,
        sampling: cfg.sampling(),
        use_z: cfg.use_z,
        decoder: cfg.decoder,
        seed: cfg.seed,
    }
}

pub fn text_input(text: &str, vocab: &Vocabulary) -> ModalityInput {
    let prompt = TextPrompt::tokenize(text, vocab);
    if prompt.all_unknown() {
        eprintln!("warning: no word of {text:?} is in the vocabulary; proceeding with <unk> tokens");
    }
    ModalityInput::Text(prompt.ids)
}

pub fn audio_input(path: &Path) -> Result<ModalityInput, CliError> {
    Ok(ModalityInput::Audio(load_features(path)?.features().clone()))
}

fn generator(models: &Models) -> Generator<'_> {
    Generator {
        mq: &models.mq,
        mate: &models.tokens.mate,
        utt: &models.tokens.utt,
        dmd: models.dmd.as_ref(),
    }
}

fn write_motion(out: &Path, name: &str, m: &MotionSequence, plot: bool, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let path = out.join(format!("{name}.motion"));
    save_motion(&path, m)?;
    if plot {
        write_atomic(&out.join(format!("{name}.svg")), motion_svg(m, name, cfg).as_bytes())?;
    }
    Ok(path)
}

#[derive(Serialize)]
struct GenerateReport<'a> {
    request: &'a GenerationRequest,
    tokens: &'a TokenSequence,
    config: &'a RunConfig,
}

pub fn generate(mut cfg: RunConfig, out: Option<PathBuf>, args: GenerateArgs) -> Result<(), CliError> {
    let frames = args.gen.apply(&mut cfg)?;
    let out = out.unwrap_or_else(|| PathBuf::from("out"));
    let models = load_models(&cfg.run_dir, cfg.decoder == DecoderKind::Diffusion, "generate")?;
    let input = match (&args.text, &args.audio) {
        (Some(t), _) => text_input(t, &models.tokens.vocab),
        (None, Some(a)) => audio_input(a)?,
        (None, None) => return Err(CliError::Config("pass --text or --audio".into())),
    };
    let (tokens, motion) = generator(&models).generate(&input, &settings(&cfg, frames))?;
    let path = write_motion(&out, &args.name, &motion, args.gen.plot, &cfg)?;
    let request = GenerationRequest {
        modality: input.modality(),
        prompt: args.text.clone(),
        feature_file: args.audio.clone(),
        frames,
        z: cfg.use_z,
        decoder: cfg.decoder,
        seed: cfg.seed,
        output: path.clone(),
    };
    write_json(
        &out.join(format!("{}.json", args.name)),
        &GenerateReport {
            request: &request,
            tokens: &tokens,
            config: &cfg,
        },
    )?;
    println!("{} ({} frames, {} tokens)", path.display(), motion.frames(), tokens.len());
    Ok(())
}

#[derive(Serialize)]
struct TransitionReport<'a> {
    prompt: &'a str,
    feature_file: &'a Path,
    primitive_len: usize,
    frames_per_segment: usize,
    text_tokens: &'a TokenSequence,
    audio_tokens: &'a TokenSequence,
    boundary_frame: usize,
    boundary_jump: f64,
    median_step: f64,
    output: &'a Path,
    config: &'a RunConfig,
}

pub fn transition(mut cfg: RunConfig, out: Option<PathBuf>, args: TransitionArgs) -> Result<(), CliError> {
    let frames = args.gen.apply(&mut cfg)?;
    let out = out.unwrap_or_else(|| PathBuf::from("out"));
    let models = load_models(&cfg.run_dir, cfg.decoder == DecoderKind::Diffusion, "transition")?;
    let text = text_input(&args.text, &models.tokens.vocab);
    let audio = audio_input(&args.audio)?;
    let t = generator(&models).transition(&text, &audio, args.primitive_len, &settings(&cfg, frames))?;
    let path = write_motion(&out, &args.name, &t.motion, args.gen.plot, &cfg)?;
    write_json(
        &out.join(format!("{}.json", args.name)),
        &TransitionReport {
            prompt: &args.text,
            feature_file: &args.audio,
            primitive_len: args.primitive_len,
            frames_per_segment: frames,
            text_tokens: &t.first,
            audio_tokens: &t.second,
            boundary_frame: t.boundary_frame,
            boundary_jump: t.jump,
            median_step: t.median_step,
            output: &path,
            config: &cfg,
        },
    )?;
    println!(
        "{} ({} frames); boundary jump {:.4} vs median step {:.4}",
        path.display(),
        t.motion.frames(),
        t.jump,
        t.median_step
    );
    Ok(())
}
