use std::path::Path;
use std::time::Instant;

use ude_core::mate::ModalityInput;
use ude_core::motion::io::write_atomic;
use ude_core::motion::{AudioConfig, Split};
use ude_core::mq::MqModel;
use ude_core::pipeline::{
    prepare, split, train_dmd_stage, train_mq_stage, train_retrieval_stage, train_token_stage, PipelineConfig, Prepared,
};

use crate::artifacts::{dep_hashes, load_data, load_stage, save_stage, write_loss_log, Stage, TokenBundle};
use crate::config::RunConfig;
use crate::plot::loss_svg;
use crate::CliError;

fn log(stage: Stage, run: &Path, cfg: &RunConfig, columns: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
    write_loss_log(&stage.loss_log(run), cfg, columns, rows)?;
    let svg = loss_svg(columns, rows, &format!("{} loss", stage.name()), cfg);
    write_atomic(&run.join(format!("{}_loss.svg", stage.name())), svg.as_bytes())?;
    Ok(())
}

/// Widths shared by all stages, read off the training data.
fn pipeline_config(cfg: &RunConfig, train: &[&Prepared], vocab_size: usize) -> PipelineConfig {
    let channels = train[0].motion.width();
    let audio_dims = train
        .iter()
        .find_map(|s| match &s.input {
            ModalityInput::Audio(f) => Some(f.cols()),
            ModalityInput::Text(_) => None,
        })
        .unwrap_or_else(|| AudioConfig::default().dims());
    cfg.pipeline(channels, vocab_size, audio_dims)
}

/// Codebook-dependent widths follow the MQ checkpoint actually loaded.
fn with_mq(p: &PipelineConfig, mq: &MqModel) -> PipelineConfig {
    let mut p = p.clone();
    p.mq = mq.config.clone();
    let (channels, vocab, audio) = (p.mq.channels, p.mate.vocab_size, p.mate.audio_dims);
    p.for_data(channels, vocab, audio)
}

/// Trains `stages` in order, writing checkpoints and loss logs under `cfg.run_dir`.
pub fn train(cfg: &RunConfig, stages: &[Stage]) -> Result<(), CliError> {
    let run = cfg.run_dir.as_path();
    // dependency checks come before the (slow) data loading
    for (i, &s) in stages.iter().enumerate() {
        if s.deps().iter().any(|d| !stages[..i].contains(d)) {
            dep_hashes(run, s)?;
        }
    }
    let data = load_data(&cfg.data_dir)?;
    let prepared = prepare(&data.samples, &data.vocab)?;
    let train = split(&prepared, Split::Train);
    if train.is_empty() {
        return Err(CliError::Data(format!("{} has an empty train split", cfg.data_dir.display())));
    }
    let pcfg = pipeline_config(cfg, &train, data.vocab.len());
    let started = Instant::now();
    for &stage in stages {
        let deps = dep_hashes(run, stage)?;
        let wanted_by = format!("stage {}", stage.name());
        match stage {
            Stage::Mq => {
                let (mq, history) = train_mq_stage(&pcfg, &train, cfg.seed)?;
                save_stage(run, stage, cfg, &mq, &deps)?;
                let rows: Vec<Vec<f64>> = history.iter().map(|&l| vec![l]).collect();
                log(stage, run, cfg, &["loss"], &rows)?;
                let motions: Vec<_> = train.iter().map(|s| s.motion.clone()).collect();
                eprintln!("mq: codebook utilization {:.3}", mq.utilization(&motions)?);
            }
            Stage::Utt => {
                let mq = load_stage::<MqModel>(run, Stage::Mq, &wanted_by)?.model;
                let p = with_mq(&pcfg, &mq);
                let t = train_token_stage(&p, &mq, &train, cfg.seed)?;
                let bundle = TokenBundle {
                    vocab: data.vocab.clone(),
                    mate: t.mate,
                    utt: t.utt,
                    disc: t.disc,
                };
                save_stage(run, stage, cfg, &bundle, &deps)?;
                let rows: Vec<Vec<f64>> = t.history.iter().map(|e| vec![e.ce, e.adv, e.disc]).collect();
                log(stage, run, cfg, &["ce", "adv", "disc"], &rows)?;
            }
            Stage::Dmd => {
                let mq = load_stage::<MqModel>(run, Stage::Mq, &wanted_by)?.model;
                let p = with_mq(&pcfg, &mq);
                let (dmd, history) = train_dmd_stage(&p, &mq, &train, cfg.seed)?;
                save_stage(run, stage, cfg, &dmd, &deps)?;
                let rows: Vec<Vec<f64>> = history.iter().map(|&l| vec![l]).collect();
                log(stage, run, cfg, &["loss"], &rows)?;
            }
            Stage::Retrieval => {
                let (enc, history) = train_retrieval_stage(&pcfg, &data.vocab, &train, cfg.seed)?;
                save_stage(run, stage, cfg, &enc, &deps)?;
                let rows: Vec<Vec<f64>> = history.iter().map(|&l| vec![l]).collect();
                log(stage, run, cfg, &["loss"], &rows)?;
            }
        }
        eprintln!(
            "trained {} ({:.1}s) -> {}",
            stage.name(),
            started.elapsed().as_secs_f64(),
            stage.checkpoint(run).display()
        );
    }
    Ok(())
}
