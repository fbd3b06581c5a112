use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rand::RngCore;
use rayon::prelude::*;
use ude_core::metrics::{
    diversity, fid, geometric_features, kinetic_features, recon_accuracy, retrieval_accuracy, FeatureSet, MetricReport,
};
use ude_core::motion::io::write_atomic;
use ude_core::motion::{Modality, MotionSequence, Split};
use ude_core::mq::DOWNSAMPLE;
use ude_core::pipeline::{mean_beat_align, prepare, split, DecoderKind, Generator, Prepared};
use ude_core::rng::derive;

use crate::artifacts::{config_comment, load_data, load_models, load_retrieval, write_json, Models};
use crate::config::RunConfig;
use crate::generate::settings;
use crate::{CliError, DecoderArg};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding the checkpoints (overrides `run_dir`).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generations per test input (overrides `samples_per_input`).
    #[arg(long)]
    pub samples_per_input: Option<usize>,
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
    /// Score the ground-truth motions in place of generations.
    #[arg(long)]
    pub ground_truth: bool,
}

/// Worker count from `UDE_THREADS`; unset means one per core.
fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("UDE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("UDE_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(e.to_string()))
}

struct Row<'a> {
    input: &'a Prepared,
    sample: usize,
    motion: MotionSequence,
}

fn generate_rows<'a>(
    cfg: &RunConfig,
    models: Option<&Models>,
    test: &[&'a Prepared],
) -> Result<Vec<Row<'a>>, CliError> {
    let n = cfg.samples_per_input;
    let jobs: Vec<(usize, usize)> = (0..test.len()).flat_map(|i| (0..n).map(move |k| (i, k))).collect();
    let pool = thread_pool()?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(i, k)| {
                let input = test[i];
                let motion = match models {
                    None => input.motion.clone(),
                    Some(m) => {
                        let gen = Generator {
                            mq: &m.mq,
                            mate: &m.tokens.mate,
                            utt: &m.tokens.utt,
                            dmd: m.dmd.as_ref(),
                        };
                        let frames = input.motion.frames() / DOWNSAMPLE * DOWNSAMPLE;
                        let mut s = settings(cfg, frames);
                        s.seed = derive(cfg.seed, (i * n + k) as u64).next_u64();
                        gen.generate(&input.input, &s)?.1
                    }
                };
                Ok(Row { input, sample: k, motion })
            })
            .collect()
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn eval(mut cfg: RunConfig, out: Option<PathBuf>, args: EvalArgs) -> Result<(), CliError> {
    if let Some(r) = args.run {
        cfg.run_dir = r;
    }
    if let Some(d) = args.data {
        cfg.data_dir = d;
    }
    if let Some(n) = args.samples_per_input {
        cfg.samples_per_input = n;
    }
    if let Some(d) = args.decoder {
        cfg.decoder = d.into();
    }
    cfg.validate()?;
    let out = out.unwrap_or_else(|| PathBuf::from("out"));

    let enc = load_retrieval(&cfg.run_dir, "eval")?;
    let models = if args.ground_truth {
        None
    } else {
        Some(load_models(&cfg.run_dir, cfg.decoder == DecoderKind::Diffusion, "eval")?)
    };
    let data = load_data(&cfg.data_dir)?;
    let prepared = prepare(&data.samples, &data.vocab)?;
    let test = split(&prepared, Split::Test);
    if test.is_empty() {
        return Err(CliError::Data(format!("{} has an empty test split", cfg.data_dir.display())));
    }

    let rows = generate_rows(&cfg, models.as_ref(), &test)?;
    let mut report = MetricReport {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.seed,
        ..MetricReport::default()
    };
    let metrics = &mut report.metrics;
    let counts = &mut report.counts;
    counts.insert("inputs".into(), test.len());
    counts.insert("samples_per_input".into(), cfg.samples_per_input);
    counts.insert("generated_rows".into(), rows.len());

    // dance metrics on audio-driven rows
    let audio_rows: Vec<&Row> = rows.iter().filter(|r| r.input.modality() == Modality::Audio).collect();
    counts.insert("audio_inputs".into(), test.iter().filter(|s| s.modality() == Modality::Audio).count());
    if !audio_rows.is_empty() {
        let gen: Vec<MotionSequence> = audio_rows.iter().map(|r| r.motion.clone()).collect();
        let gt: Vec<MotionSequence> = test
            .iter()
            .filter(|s| s.modality() == Modality::Audio)
            .map(|s| s.motion.clone())
            .collect();
        let (gk, gm) = (FeatureSet::kinetic(&gen)?, FeatureSet::geometric(&gen)?);
        let (tk, tm) = (FeatureSet::kinetic(&gt)?, FeatureSet::geometric(&gt)?);
        metrics.insert("FID_k".into(), fid(&gk, &tk)?);
        metrics.insert("FID_m".into(), fid(&gm, &tm)?);
        if gen.len() > 1 {
            metrics.insert("Div_k".into(), diversity(&gk)?);
            metrics.insert("Div_m".into(), diversity(&gm)?);
        }
        if gt.len() > 1 {
            metrics.insert("Div_k_gt".into(), diversity(&tk)?);
            metrics.insert("Div_m_gt".into(), diversity(&tm)?);
        }
        let sigma = cfg.beat_sigma_frames / cfg.fps;
        let pairs: Vec<(MotionSequence, Vec<f64>)> = audio_rows
            .iter()
            .map(|r| (r.motion.clone(), r.input.audio_beats.clone().unwrap_or_default()))
            .collect();
        metrics.insert("beat_align".into(), mean_beat_align(&pairs, sigma)?);
    }

    // text retrieval on text-driven rows
    let text_rows: Vec<&Row> = rows.iter().filter(|r| r.input.modality() == Modality::Text).collect();
    counts.insert("text_inputs".into(), test.iter().filter(|s| s.modality() == Modality::Text).count());
    let texts: Vec<String> = text_rows.iter().map(|r| r.input.text.clone().unwrap_or_default()).collect();
    let distinct = texts.iter().collect::<HashSet<_>>().len();
    if distinct > 1 {
        let distractors = cfg.retrieval_distractors.min(distinct - 1);
        let me = text_rows.iter().map(|r| enc.embed_motion(&r.motion)).collect::<Result<Vec<_>, _>>()?;
        let te = texts.iter().map(|t| enc.embed_text(t)).collect::<Result<Vec<_>, _>>()?;
        let seed = derive(cfg.seed, u64::MAX).next_u64();
        let score = retrieval_accuracy(&me, &te, &texts, distractors, cfg.retrieval_trials, seed)?;
        metrics.insert("top1".into(), score.top1);
        metrics.insert("top5".into(), score.top5);
        counts.insert("retrieval_distractors".into(), distractors);
        counts.insert("retrieval_trials".into(), cfg.retrieval_trials);
    }

    // reconstruction accuracy against each row's ground truth
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        let gt = r.input.motion.slice(0, r.motion.frames())?;
        let a = recon_accuracy(&r.motion, &gt)?;
        for (k, v) in [("APE", a.ape), ("AVE", a.ave), ("APE_root", a.ape_root), ("AVE_root", a.ave_root)] {
            acc.entry(k).or_default().push(v);
        }
    }
    for (k, v) in acc {
        metrics.insert(k.into(), mean(&v));
    }

    write_atomic(&out.join("features.csv"), feature_dump(&cfg, &rows, &test)?.as_bytes())?;
    write_json(&out.join("metrics.json"), &report)?;
    for (k, v) in &report.metrics {
        println!("{k}: {v:.6}");
    }
    Ok(())
}

/// One line per (motion, feature kind): generated rows first, then ground truth.
fn feature_dump(cfg: &RunConfig, rows: &[Row], test: &[&Prepared]) -> Result<String, CliError> {
    let mut s = config_comment(cfg);
    s.push_str("source,id,sample,kind,values\n");
    let mut line = |source: &str, id: &str, sample: usize, m: &MotionSequence| -> Result<(), CliError> {
        for (kind, values) in [("kinetic", kinetic_features(m)?), ("geometric", geometric_features(m))] {
            let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{source},{id},{sample},{kind},{}", joined.join(" ")).unwrap();
        }
        Ok(())
    };
    for r in rows {
        line("gen", &r.input.id, r.sample, &r.motion)?;
    }
    for t in test {
        line("gt", &t.id, 0, &t.motion)?;
    }
    Ok(s)
}
