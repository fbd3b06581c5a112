//! The `ude` command line: dataset synthesis, staged training, generation,
//! transitions and evaluation.

pub mod artifacts;
pub mod config;
pub mod eval;
pub mod generate;
pub mod plot;
pub mod train;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ude_core::motion::{synth_dataset, Modality, Split};
use ude_core::pipeline::DecoderKind;

use crate::artifacts::{config_comment, Stage};
use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] ude_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(ude_core::Error::Config(_)) => 2,
            CliError::MissingDependency(_) => 3,
            CliError::Core(e) if e.is_numerical() => 5,
            CliError::Data(_) | CliError::Core(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ude", version, about = "Text- and audio-driven motion generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML run config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (dataset for synth, run directory for train).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Mq,
    Utt,
    Dmd,
    Retrieval,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Vq,
    Diffusion,
}

impl From<DecoderArg> for DecoderKind {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::Vq => DecoderKind::Vq,
            DecoderArg::Diffusion => DecoderKind::Diffusion,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic text and audio dataset.
    Synth,
    /// Trains one stage, or every stage in order.
    Train {
        stage: StageArg,
        /// Dataset directory (overrides `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epoch count for every stage being trained.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generates one motion from a text prompt or an audio feature file.
    Generate(generate::GenerateArgs),
    /// Text segment followed by an audio-driven continuation.
    Transition(generate::TransitionArgs),
    /// Metric battery on the test split.
    Eval(eval::EvalArgs),
}

/// Config file (or defaults) with the command-line seed applied.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            if let Some(out) = &cli.common.out {
                cfg.data_dir = out.clone();
            }
            cfg.validate()?;
            synth(&cfg)
        }
        Command::Train { stage, data, epochs } => {
            if let Some(out) = &cli.common.out {
                cfg.run_dir = out.clone();
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(e) = epochs {
                cfg.set_epochs(e);
            }
            cfg.validate()?;
            let stages: Vec<Stage> = match stage {
                StageArg::Mq => vec![Stage::Mq],
                StageArg::Utt => vec![Stage::Utt],
                StageArg::Dmd => vec![Stage::Dmd],
                StageArg::Retrieval => vec![Stage::Retrieval],
                StageArg::All => Stage::ALL.to_vec(),
            };
            train::train(&cfg, &stages)
        }
        Command::Generate(args) => generate::generate(cfg, cli.common.out, args),
        Command::Transition(args) => generate::transition(cfg, cli.common.out, args),
        Command::Eval(args) => eval::eval(cfg, cli.common.out, args),
    }
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = synth_dataset(&cfg.synth(), cfg.seed, &cfg.data_dir)?;
    let jsonl = manifest.to_jsonl();
    ude_core::motion::io::write_atomic(&cfg.data_dir.join("synth_config.toml"), config_comment(cfg).as_bytes())?;
    println!("dataset: {}", cfg.data_dir.display());
    println!("manifest sha256: {}", ude_core::checkpoint::content_hash(jsonl.as_bytes()));
    for m in [Modality::Text, Modality::Audio] {
        println!(
            "{:?}: train {} test {}",
            m,
            manifest.count(m, Split::Train),
            manifest.count(m, Split::Test)
        );
    }
    Ok(())
}

/// Parses `args` and runs the command; errors go to stderr and pick the exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
