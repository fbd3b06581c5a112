//! Checkpoint files, dependency checks, loss logs and dataset loading for a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ude_core::checkpoint;
use ude_core::dmd::DmdModel;
use ude_core::mate::MateModel;
use ude_core::metrics::RetrievalEncoder;
use ude_core::motion::io::{load_dataset, write_atomic};
use ude_core::motion::{Sample, Vocabulary};
use ude_core::mq::MqModel;
use ude_core::utt::{Discriminator, UttModel};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Mq,
    Utt,
    Dmd,
    Retrieval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Mq, Stage::Utt, Stage::Dmd, Stage::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mq => "mq",
            Stage::Utt => "utt",
            Stage::Dmd => "dmd",
            Stage::Retrieval => "retrieval",
        }
    }

    /// Stages whose checkpoints this stage is trained against.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Utt | Stage::Dmd => &[Stage::Mq],
            Stage::Mq | Stage::Retrieval => &[],
        }
    }

    pub fn checkpoint(self, run: &Path) -> PathBuf {
        run.join(format!("{}.ckpt", self.name()))
    }

    pub fn loss_log(self, run: &Path) -> PathBuf {
        run.join(format!("{}_loss.csv", self.name()))
    }
}

/// Checkpoint payload: the model plus the resolved config it was trained with.
#[derive(Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config: RunConfig,
    pub model: T,
}

/// Condition encoder, token transformer and discriminator, trained together,
/// plus the vocabulary prompts are tokenized with.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenBundle {
    pub vocab: Vocabulary,
    pub mate: MateModel,
    pub utt: UttModel,
    pub disc: Discriminator,
}

pub fn save_stage<T: Serialize>(
    run: &Path,
    stage: Stage,
    config: &RunConfig,
    model: &T,
    deps: &BTreeMap<String, String>,
) -> Result<String, CliError> {
    let stamped = Stamped { config: config.clone(), model };
    Ok(checkpoint::save(&stage.checkpoint(run), stage.name(), &stamped, deps)?)
}

pub struct LoadedStage<T> {
    pub model: T,
    pub config: RunConfig,
    pub hash: String,
}

/// Loads a stage checkpoint; a missing file is a missing dependency of `wanted_by`.
pub fn load_stage<T: DeserializeOwned>(run: &Path, stage: Stage, wanted_by: &str) -> Result<LoadedStage<T>, CliError> {
    let path = stage.checkpoint(run);
    if !path.is_file() {
        return Err(CliError::MissingDependency(format!(
            "{wanted_by} requires stage {}: {} not found",
            stage.name(),
            path.display()
        )));
    }
    let loaded: checkpoint::Loaded<Stamped<T>> = checkpoint::load(&path, stage.name())?;
    for dep in stage.deps() {
        let want = loaded.deps.get(dep.name());
        let have = checkpoint::file_hash(&dep.checkpoint(run)).ok();
        if want.is_none() || want != have.as_ref() {
            return Err(CliError::MissingDependency(format!(
                "{} checkpoint was trained against a different {} checkpoint; retrain stage {}",
                stage.name(),
                dep.name(),
                stage.name()
            )));
        }
    }
    Ok(LoadedStage {
        model: loaded.model.model,
        config: loaded.model.config,
        hash: loaded.hash,
    })
}

/// Content hashes of the dependency checkpoints of `stage`, which must exist.
pub fn dep_hashes(run: &Path, stage: Stage) -> Result<BTreeMap<String, String>, CliError> {
    let mut deps = BTreeMap::new();
    for dep in stage.deps() {
        let path = dep.checkpoint(run);
        if !path.is_file() {
            return Err(CliError::MissingDependency(format!(
                "stage {} requires stage {}: {} not found",
                stage.name(),
                dep.name(),
                path.display()
            )));
        }
        deps.insert(dep.name().to_string(), checkpoint::file_hash(&path)?);
    }
    Ok(deps)
}

/// Every trained model a generation needs.
pub struct Models {
    pub mq: MqModel,
    pub tokens: TokenBundle,
    pub dmd: Option<DmdModel>,
}

pub fn load_models(run: &Path, need_dmd: bool, wanted_by: &str) -> Result<Models, CliError> {
    let mq: LoadedStage<MqModel> = load_stage(run, Stage::Mq, wanted_by)?;
    let tokens: LoadedStage<TokenBundle> = load_stage(run, Stage::Utt, wanted_by)?;
    let dmd = if need_dmd {
        Some(load_stage::<DmdModel>(run, Stage::Dmd, wanted_by)?.model)
    } else {
        None
    };
    Ok(Models {
        mq: mq.model,
        tokens: tokens.model,
        dmd,
    })
}

pub fn load_retrieval(run: &Path, wanted_by: &str) -> Result<RetrievalEncoder, CliError> {
    Ok(load_stage::<RetrievalEncoder>(run, Stage::Retrieval, wanted_by)?.model)
}

/// `# key = value` lines holding the resolved config.
pub fn config_comment(config: &RunConfig) -> String {
    config.to_toml().lines().map(|l| format!("# {l}\n")).collect()
}

/// Per-epoch loss log: config comment, header, one row per epoch.
pub fn write_loss_log(path: &Path, config: &RunConfig, columns: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut s = config_comment(config);
    s.push_str("epoch");
    for c in columns {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for (i, row) in rows.iter().enumerate() {
        write!(s, "{}", i + 1).unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
}

pub fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    let manifest = dir.join("manifest.jsonl");
    if !manifest.is_file() {
        return Err(CliError::MissingDependency(format!(
            "no dataset at {}; run `ude synth` first",
            dir.display()
        )));
    }
    Ok(Dataset {
        samples: load_dataset(&manifest)?,
        vocab: Vocabulary::load(&dir.join("vocab.txt"))?,
    })
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}
