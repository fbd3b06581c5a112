//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the report lines always
//! reach the `cargo test` output. Set `UDE_ACCEPTANCE=1,5,9` to run a subset.
//! A criterion that panics always fails the run. A criterion that completes
//! with FAIL fails the run only under `UDE_ACCEPTANCE_STRICT=1`; otherwise it
//! is reported in its line and the summary.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, RngCore};
use ude_cli::artifacts::{dep_hashes, save_stage, Stage, TokenBundle};
use ude_cli::config::RunConfig;
use ude_cli::generate::settings;
use ude_core::dmd::{make_schedule, scaled_schedule, train_dmd, DmdConfig, DmdModel, DmdSample, DmdTrainConfig};
use ude_core::mate::{MateModel, ModalityInput};
use ude_core::metrics::retrieval::evaluate_retrieval;
use ude_core::metrics::{
    beat_align, diversity, fid, retrieval_accuracy, FeatureKind, FeatureSet, DEFAULT_SIGMA_FRAMES,
};
use ude_core::metrics::features::frechet_distance;
use ude_core::motion::synth::{synth_samples, text_vocabulary};
use ude_core::motion::{Modality, MotionSequence, Split, Vocabulary};
use ude_core::mq::{quantize, MqModel};
use ude_core::numerics::gradcheck::{check_gradients, random_projection};
use ude_core::numerics::nn::Standardizer;
use ude_core::numerics::{Graph, Tensor, Var};
use ude_core::pipeline::{
    init_token_models, mean_beat_align, prepare, split, train_dmd_stage, train_mq_stage, train_retrieval_stage,
    train_token_stage, DecoderKind, GenSettings, Generator, PipelineConfig, Prepared, TokenStage,
};
use ude_core::rng::{derive, seeded, Rng};
use ude_core::utt::{Sampling, UttModel};
use ude_core::Result as CoreResult;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// shared trained pipeline

struct Trained {
    cfg: RunConfig,
    pcfg: PipelineConfig,
    vocab: Vocabulary,
    data: Vec<Prepared>,
    mq: MqModel,
    mq_secs: f64,
    enc: ude_core::metrics::RetrievalEncoder,
    tokens: TokenStage,
    untrained: (MateModel, UttModel),
    dmd: DmdModel,
    train_secs: f64,
}

impl Trained {
    fn train(&self) -> Vec<&Prepared> {
        split(&self.data, Split::Train)
    }

    fn test(&self) -> Vec<&Prepared> {
        split(&self.data, Split::Test)
    }

    fn generator(&self) -> Generator<'_> {
        Generator {
            mq: &self.mq,
            mate: &self.tokens.mate,
            utt: &self.tokens.utt,
            dmd: Some(&self.dmd),
        }
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let cfg = RunConfig::default();
        let vocab = text_vocabulary();
        let samples = synth_samples(&cfg.synth(), cfg.seed).expect("synthetic data");
        let data = prepare(&samples, &vocab).expect("prepare");
        let train = split(&data, Split::Train);
        let audio_dims = train
            .iter()
            .find_map(|s| match &s.input {
                ModalityInput::Audio(f) => Some(f.cols()),
                ModalityInput::Text(_) => None,
            })
            .expect("audio samples");
        let pcfg = cfg.pipeline(train[0].motion.width(), vocab.len(), audio_dims);

        let t = Instant::now();
        let (mq, _) = train_mq_stage(&pcfg, &train, cfg.seed).expect("mq stage");
        let mq_secs = t.elapsed().as_secs_f64();
        eprintln!("  [pipeline] mq trained in {mq_secs:.1}s");
        let (enc, _) = train_retrieval_stage(&pcfg, &vocab, &train, cfg.seed).expect("retrieval stage");
        eprintln!("  [pipeline] retrieval encoder at {:.1}s", started.elapsed().as_secs_f64());
        let (m0, u0, _) = init_token_models(&pcfg, &mq, &train, cfg.seed).expect("init");
        let tokens = train_token_stage(&pcfg, &mq, &train, cfg.seed).expect("token stage");
        eprintln!("  [pipeline] token models at {:.1}s", started.elapsed().as_secs_f64());
        let (dmd, _) = train_dmd_stage(&pcfg, &mq, &train, cfg.seed).expect("dmd stage");
        eprintln!("  [pipeline] dmd at {:.1}s", started.elapsed().as_secs_f64());
        drop(train);
        Trained {
            cfg,
            pcfg,
            vocab,
            data,
            mq,
            mq_secs,
            enc,
            tokens,
            untrained: (m0, u0),
            dmd,
            train_secs: started.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> CoreResult<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    f: Loss,
}

fn u(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Reduces `y` to a scalar through a projection fixed by `seed`.
fn proj(g: &mut Graph, y: Var, seed: u64) -> CoreResult<Var> {
    random_projection(g, y, &mut seeded(seed))
}

fn unary(rng: &mut Rng, op: fn(&mut Graph, Var) -> CoreResult<Var>) -> Case {
    let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
    let seed = rng.next_u64();
    Case {
        inputs: vec![u(rng, &[r, c])],
        f: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            proj(g, y, seed)
        }),
    }
}

fn binary(rng: &mut Rng, op: fn(&mut Graph, Var, Var) -> CoreResult<Var>) -> Case {
    let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
    let seed = rng.next_u64();
    Case {
        inputs: vec![u(rng, &[r, c]), u(rng, &[r, c])],
        f: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            proj(g, y, seed)
        }),
    }
}

fn gradient_cases() -> Vec<(&'static str, fn(&mut Rng) -> Case)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng, 1, 6), dim(rng, 1, 6), dim(rng, 1, 6));
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[m, k]), u(rng, &[k, n])],
                f: Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("add", |rng| binary(rng, Graph::add)),
        ("sub", |rng| binary(rng, Graph::sub)),
        ("mul", |rng| binary(rng, Graph::mul)),
        ("add_row", |rng| {
            let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[r, c]), u(rng, &[c])],
                f: Box::new(move |g, v| {
                    let y = g.add_row(v[0], v[1])?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("affine", |rng| {
            let (scale, shift) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut c = unary(rng, Graph::relu);
            let seed = rng.next_u64();
            c.f = Box::new(move |g, v| {
                let y = g.affine(v[0], scale, shift)?;
                let y = g.mul(y, y)?;
                proj(g, y, seed)
            });
            c
        }),
        ("scale", |rng| {
            let s = rng.random_range(-3.0..3.0);
            let mut c = unary(rng, Graph::relu);
            let seed = rng.next_u64();
            c.f = Box::new(move |g, v| {
                let y = g.scale(v[0], s)?;
                proj(g, y, seed)
            });
            c
        }),
        ("relu", |rng| unary(rng, Graph::relu)),
        ("gelu", |rng| unary(rng, Graph::gelu)),
        ("tanh", |rng| unary(rng, Graph::tanh)),
        ("softmax", |rng| {
            let shape: Vec<usize> = (0..dim(rng, 1, 3)).map(|_| dim(rng, 1, 5)).collect();
            let axis = rng.random_range(0..shape.len());
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &shape)],
                f: Box::new(move |g, v| {
                    let y = g.softmax(v[0], axis)?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("layer_norm", |rng| {
            let (r, c) = (dim(rng, 1, 5), dim(rng, 2, 8));
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[r, c]), u(rng, &[c]), u(rng, &[c])],
                f: Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("conv1d", |rng| {
            let (w, stride, pad) = (dim(rng, 1, 3), dim(rng, 1, 2), dim(rng, 0, 1));
            let t = dim(rng, w.max(2), 9);
            let (cin, cout) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[t, cin]), u(rng, &[w, cin, cout])],
                f: Box::new(move |g, v| {
                    let y = g.conv1d(v[0], v[1], stride, pad)?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("upsample_rows", |rng| {
            let factor = dim(rng, 1, 3);
            let mut c = unary(rng, Graph::relu);
            let seed = rng.next_u64();
            c.f = Box::new(move |g, v| {
                let y = g.upsample_rows(v[0], factor)?;
                proj(g, y, seed)
            });
            c
        }),
        ("attention", |rng| {
            let heads = dim(rng, 1, 3);
            let d = heads * dim(rng, 1, 3);
            let (sq, sk) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let mask: Option<Vec<bool>> = rng.random_bool(0.5).then(|| {
                // every query row keeps at least one visible key
                (0..sq * sk).map(|i| i % sk == (i / sk) % sk || rng.random_bool(0.5)).collect()
            });
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[sq, d]), u(rng, &[sk, d]), u(rng, &[sk, d])],
                f: Box::new(move |g, v| {
                    let y = g.attention(v[0], v[1], v[2], heads, mask.as_deref())?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("gather_rows", |rng| {
            let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 4));
            let ids: Vec<usize> = (0..dim(rng, 1, 7)).map(|_| rng.random_range(0..r)).collect();
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[r, c])],
                f: Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &ids)?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("concat_rows", |rng| {
            let c = dim(rng, 1, 4);
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[a, c]), u(rng, &[b, c])],
                f: Box::new(move |g, v| {
                    let y = g.concat_rows(&[v[0], v[1], v[0]])?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("slice_rows", |rng| {
            let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 4));
            let start = rng.random_range(0..r);
            let end = rng.random_range(start + 1..=r);
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[r, c])],
                f: Box::new(move |g, v| {
                    let y = g.slice_rows(v[0], start, end)?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("slice_cols", |rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 6));
            let start = rng.random_range(0..c);
            let end = rng.random_range(start + 1..=c);
            let seed = rng.next_u64();
            Case {
                inputs: vec![u(rng, &[r, c])],
                f: Box::new(move |g, v| {
                    let y = g.slice_cols(v[0], start, end)?;
                    proj(g, y, seed)
                }),
            }
        }),
        ("transpose", |rng| unary(rng, Graph::transpose)),
        ("sum", |rng| {
            let mut c = unary(rng, Graph::relu);
            c.f = Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            });
            c
        }),
        ("mean", |rng| {
            let mut c = unary(rng, Graph::relu);
            c.f = Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            });
            c
        }),
        ("mse", |rng| {
            let mut c = binary(rng, Graph::add);
            c.f = Box::new(|g, v| g.mse(v[0], v[1]));
            c
        }),
        ("cross_entropy", |rng| {
            let (r, c) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            Case {
                inputs: vec![u(rng, &[r, c])],
                f: Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
            }
        }),
        ("max_pool_rows", |rng| unary(rng, Graph::max_pool_rows)),
        ("mean_rows", |rng| unary(rng, Graph::mean_rows)),
        ("l2_normalize_rows", |rng| unary(rng, Graph::l2_normalize_rows)),
    ]
}

/// The straight-through node has no derivative to difference; its contract
/// is that the upstream gradient reaches `soft` unchanged and `hard` gets none.
fn straight_through_copies(rng: &mut Rng) -> bool {
    let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let (soft, hard, w) = (u(rng, &[r, c]), u(rng, &[r, c]), u(rng, &[r, c]));
    let mut g = Graph::new();
    let (s, h) = (g.param(soft), g.param(hard.clone()));
    let y = g.straight_through(s, h).unwrap();
    let wv = g.constant(w.clone());
    let l = g.mul(y, wv).unwrap();
    let l = g.sum(l).unwrap();
    let grads = g.backward(l).unwrap();
    g.value(y) == &hard && grads.get(s) == w && grads.get(h).data().iter().all(|&x| x == 0.0)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = seeded(1);
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    let cases = gradient_cases();
    for (name, make) in &cases {
        for _ in 0..20 {
            let case = make(&mut rng);
            let report = check_gradients(&case.inputs, 1e-5, &case.f).expect("gradient check runs");
            let err = report.max_rel_error();
            if err > worst.0 {
                worst = (err, name);
            }
            if !(err < 1e-4) {
                failures.push(format!("{name}: {err:.2e}"));
            }
        }
    }
    let st_ok = (0..20).all(|_| straight_through_copies(&mut rng));
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && st_ok && secs < 60.0,
        format!(
            "{} ops x 20 instances, max rel err {:.2e} ({}), straight-through copy {}, {secs:.1}s (< 60s){}",
            cases.len(),
            worst.0,
            worst.1,
            if st_ok { "ok" } else { "WRONG" },
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. MQ reconstruction

fn criterion_2() -> Outcome {
    let p = trained();
    let motions: Vec<MotionSequence> = p.train().iter().map(|s| s.motion.clone()).collect();
    let c = motions[0].width();
    let (mut n, mut sum, mut sq, mut err) = (0usize, vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for m in &motions {
        let recon = p.mq.decode(&p.mq.tokenize(m).unwrap()).unwrap();
        for t in 0..m.frames() {
            for (k, (&x, &y)) in m.frame(t).iter().zip(recon.frame(t)).enumerate() {
                sum[k] += x;
                sq[k] += x * x;
                err[k] += (x - y) * (x - y);
            }
            n += 1;
        }
    }
    let ratios: Vec<f64> = (0..c)
        .map(|k| {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            (err[k] / n as f64) / var
        })
        .collect();
    let mean_ratio = ratios.iter().sum::<f64>() / c as f64;
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let util = p.mq.utilization(&motions).unwrap();
    let epochs = p.pcfg.mq_train.epochs;
    let (frames, joints) = (motions[0].frames(), motions[0].joints());
    outcome(
        motions.len() == 512
            && frames == 64
            && joints == 8
            && epochs <= 50
            && mean_ratio < 0.10
            && util >= 0.25
            && p.mq_secs < 600.0,
        format!(
            "{} seqs (T={frames}, J={joints}), {epochs} epochs: MSE/var {:.2}% (< 10%; worst coordinate {:.2}%), \
             utilization {:.1}% (>= 25%), {:.1}s (< 600s)",
            motions.len(),
            100.0 * mean_ratio,
            100.0 * max_ratio,
            100.0 * util,
            p.mq_secs
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. quantizer and VQ loss oracles

/// Exhaustive nearest neighbour, lowest index on ties.
fn brute_nearest(codebook: &Tensor, row: &[f64]) -> usize {
    let dists: Vec<f64> = (0..codebook.rows())
        .map(|k| codebook.row(k).iter().zip(row).map(|(c, e)| (c - e).powi(2)).sum())
        .collect();
    let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).unwrap()
}

fn mean_sq(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn criterion_3() -> Outcome {
    let mut rng = seeded(3);
    let mut mismatches = 0;
    for i in 0..1000 {
        let (k, d, rows) = (dim(&mut rng, 2, 64), dim(&mut rng, 1, 16), dim(&mut rng, 1, 32));
        let mut cb = Tensor::randn(&[k, d], 1.0, &mut rng);
        let mut e = Tensor::randn(&[rows, d], 1.0, &mut rng);
        if i % 4 == 0 {
            // duplicated codes and embeddings sitting exactly on codes exercise ties
            let src = cb.row(0).to_vec();
            cb.row_mut(k - 1).copy_from_slice(&src);
            e.row_mut(0).copy_from_slice(&src);
        }
        let got = quantize(&cb, &e).unwrap();
        let want: Vec<usize> = (0..rows).map(|r| brute_nearest(&cb, e.row(r))).collect();
        mismatches += usize::from(got != want);
    }

    let p = trained();
    let untrained = MqModel::new(p.pcfg.mq.clone(), p.mq.norm.clone(), 99).unwrap();
    let mut worst = 0.0f64;
    for (mq, samples) in [(&p.mq, p.train()), (&untrained, p.test())] {
        for s in samples.iter().take(100) {
            let loss = mq.vq_loss(&s.motion).unwrap();
            let xn = mq.normalize(&s.motion).unwrap();
            let e = mq.encode(&s.motion).unwrap();
            let ids: Vec<usize> = (0..e.rows()).map(|r| brute_nearest(mq.codebook(), e.row(r))).collect();
            let q = mq.code_rows(&ids).unwrap();
            let rec = mean_sq(&mq.decode_latent(&q).unwrap(), &xn);
            let dist = mean_sq(&e, &q);
            let total = rec + mq.config.beta1 * dist + mq.config.beta2 * dist;
            for (a, b) in [
                (loss.reconstruction, rec),
                (loss.codebook, dist),
                (loss.commitment, dist),
                (loss.total, total),
            ] {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        mismatches == 0 && worst <= 1e-12,
        format!("quantize vs brute force: {mismatches}/1000 mismatches; vq_loss terms max |diff| {worst:.1e} (<= 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 4. causality

fn criterion_4() -> Outcome {
    let p = trained();
    let test = p.test();
    let random = UttModel::new(p.pcfg.utt.clone(), 4242).unwrap();
    let mut rng = seeded(4);
    let mut violations = 0;
    for trial in 0..100 {
        let (mate, utt) = if trial % 2 == 0 { (&p.tokens.mate, &p.tokens.utt) } else { (&p.untrained.0, &random) };
        let input = &test[rng.random_range(0..test.len())].input;
        let cond = mate.encode(input).unwrap();
        let cfg = &utt.config;
        let len = dim(&mut rng, 2, cfg.max_tokens - 1);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.codes)).collect();
        let j = rng.random_range(0..len);
        let mut changed = tokens.clone();
        changed[j] = (tokens[j] + rng.random_range(1..cfg.codes)) % cfg.codes;
        let z = rng.random_bool(0.5).then(|| utt.sample_z(rng.next_u64()));
        let logits = |t: &[usize]| {
            let mut prefix = vec![cfg.bos()];
            prefix.extend_from_slice(t);
            utt.forward_logits(&cond, &prefix, z.as_deref()).unwrap()
        };
        let (a, b) = (logits(&tokens), logits(&changed));
        // row r predicts token r from BOS and tokens[..r]; rows 0..=j never see token j
        violations += usize::from((0..=j).any(|r| a.row(r) != b.row(r)));
    }
    outcome(
        violations == 0,
        format!("{violations}/100 trials changed an earlier logit row (trained and random weights, z on and off)"),
    )
}

// ---------------------------------------------------------------------------
// 5. diffusion math and toy conditional model

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut worst_bar = 0.0f64;
    let mut worst_q = 0.0f64;
    let mut rng = seeded(5);
    for sched in [make_schedule(1000, 1e-4, 0.02).unwrap(), scaled_schedule(50).unwrap(), scaled_schedule(7).unwrap()] {
        let steps = sched.steps();
        for t in 1..=steps {
            let brute: f64 = (1..=t).map(|s| 1.0 - sched.betas[s]).product();
            worst_bar = worst_bar.max((sched.alpha_bars[t] - brute).abs());
        }
        for _ in 0..200 {
            let t = rng.random_range(1..=steps);
            let shape = [dim(&mut rng, 1, 8), dim(&mut rng, 1, 4)];
            let (x0, eps) = (Tensor::randn(&shape, 1.0, &mut rng), Tensor::randn(&shape, 1.0, &mut rng));
            let brute: f64 = (1..=t).map(|s| 1.0 - sched.betas[s]).product();
            let got = sched.q_sample(&x0, t, &eps).unwrap();
            for ((g, x), e) in got.data().iter().zip(x0.data()).zip(eps.data()) {
                worst_q = worst_q.max((g - (brute.sqrt() * x + (1.0 - brute).sqrt() * e)).abs());
            }
        }
    }

    let cfg = DmdConfig {
        channels: 1,
        codes: 2,
        width: 32,
        enc_layers: 1,
        dec_layers: 2,
        heads: 4,
        hidden: 64,
        steps: 50,
        fps: 20.0,
    };
    let mut model = DmdModel::new(cfg, Standardizer::identity(1), 5).unwrap();
    let data: Vec<DmdSample> = (0..256)
        .map(|i| DmdSample {
            x0: Tensor::full(&[4, 1], if i % 2 == 0 { 1.0 } else { -1.0 }),
            tokens: vec![i % 2],
        })
        .collect();
    let train_cfg = DmdTrainConfig {
        epochs: 60,
        batch: 16,
        ..DmdTrainConfig::default()
    };
    train_dmd(&mut model, &data, &train_cfg, 5).unwrap();
    let mut means = [0.0; 2];
    for (class, mean) in means.iter_mut().enumerate() {
        let cond = model.encode_condition(&[class]).unwrap();
        let total: f64 = (0..1000u64)
            .map(|s| {
                let x = model.sample_normalized(&cond, 4, s * 2 + class as u64).unwrap();
                x.sum() / x.len() as f64
            })
            .sum();
        *mean = total / 1000.0;
    }
    let secs = started.elapsed().as_secs_f64();
    let toy_ok = (means[0] - 1.0).abs() <= 0.2 && (means[1] + 1.0).abs() <= 0.2;
    outcome(
        worst_bar <= 1e-12 && worst_q <= 1e-12 && toy_ok && secs < 300.0,
        format!(
            "alpha_bar max |diff| {worst_bar:.1e}, q_sample max |diff| {worst_q:.1e} (<= 1e-12); toy class means \
             {:+.3} / {:+.3} (targets +1 / -1, within 0.2) over 1000 samples each; {secs:.1}s (< 300s)",
            means[0], means[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. metric oracles

fn criterion_6() -> Outcome {
    let one = DMatrix::from_element(1, 1, 1.0);
    let fd = frechet_distance(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
    let fid_ok = (fd - 1.0).abs() <= 1e-6;

    let mut rng = seeded(6);
    let mut worst_ba = 0.0f64;
    let mut equal_ok = true;
    for _ in 0..1000 {
        let sigma = rng.random_range(0.05..1.0);
        let mb: Vec<f64> = (0..dim(&mut rng, 1, 10)).map(|_| rng.random_range(0.0..10.0)).collect();
        let ab: Vec<f64> = (0..dim(&mut rng, 1, 10)).map(|_| rng.random_range(0.0..10.0)).collect();
        let direct = ab
            .iter()
            .map(|a| {
                let d2 = mb.iter().map(|m| (m - a) * (m - a)).fold(f64::INFINITY, f64::min);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>()
            / ab.len() as f64;
        worst_ba = worst_ba.max((beat_align(&mb, &ab, sigma).unwrap() - direct).abs());
        equal_ok &= beat_align(&ab, &ab, sigma).unwrap() == 1.0;
    }

    let mut worst_div = 0.0f64;
    for _ in 0..200 {
        let (n, d) = (dim(&mut rng, 2, 20), dim(&mut rng, 1, 8));
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let mut dists = Vec::new();
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in rows.iter().enumerate() {
                if i != j {
                    dists.push(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
                }
            }
        }
        let oracle = dists.iter().sum::<f64>() / dists.len() as f64;
        let got = diversity(&FeatureSet::new(FeatureKind::Kinetic, rows).unwrap()).unwrap();
        worst_div = worst_div.max((got - oracle).abs());
    }

    // fresh unit vectors for every pair keeps the 10k trials close to independent
    let n = 10_000;
    let unit = |rng: &mut Rng| {
        let v: Vec<f64> = Tensor::randn(&[16], 1.0, rng).into_data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    let me: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng)).collect();
    let te: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng)).collect();
    let texts: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    let r = retrieval_accuracy(&me, &te, &texts, 60, 10_000, 6).unwrap();
    let chance = 1.0 / 61.0;
    let top1_ok = (r.top1 - chance).abs() <= 0.005;

    outcome(
        fid_ok && worst_ba <= 1e-12 && equal_ok && worst_div <= 1e-12 && top1_ok,
        format!(
            "FD(N(0,1), N(1,1)) = {fd:.9} (1 +- 1e-6); beat_align max |diff| {worst_ba:.1e}, equal sets give 1.0: {equal_ok}; \
             diversity max |diff| {worst_div:.1e}; random top1 {:.4} vs {chance:.4} (+- 0.005, 10k trials)",
            r.top1
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. unified model

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let p = trained();
    let test = p.test();
    let sigma = DEFAULT_SIGMA_FRAMES / p.cfg.fps;
    let score = |mate: &MateModel, utt: &UttModel| {
        let gen = Generator { mq: &p.mq, mate, utt, dmd: None };
        let (mut motions, mut texts, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
        for s in &test {
            let (_, m) = gen.generate(&s.input, &GenSettings::deterministic(p.cfg.frames)).unwrap();
            match s.modality() {
                Modality::Text => {
                    motions.push(m);
                    texts.push(s.text.clone().unwrap());
                }
                Modality::Audio => pairs.push((m, s.audio_beats.clone().unwrap())),
            }
        }
        let r = evaluate_retrieval(&p.enc, &motions, &texts, 10_000, 7).unwrap();
        (r.top1, mean_beat_align(&pairs, sigma).unwrap())
    };
    let (top1, ba) = score(&p.tokens.mate, &p.tokens.utt);
    let (top1_0, ba_0) = score(&p.untrained.0, &p.untrained.1);
    let total = p.train_secs + started.elapsed().as_secs_f64();
    outcome(
        top1 >= 0.08 && ba - ba_0 >= 0.05 && total < 1800.0,
        format!(
            "held-out top1 {:.3} (>= 0.08; untrained {:.3}); beat_align {:.3} vs untrained {:.3}, gain {:+.3} (>= 0.05); \
             pipeline {total:.0}s (< 1800s)",
            top1,
            top1_0,
            ba,
            ba_0,
            ba - ba_0
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. transition

fn criterion_8() -> Outcome {
    let p = trained();
    let test = p.test();
    let texts: Vec<&Prepared> = test.iter().copied().filter(|s| s.modality() == Modality::Text).collect();
    let audio: Vec<&Prepared> = test.iter().copied().filter(|s| s.modality() == Modality::Audio).collect();
    let gen = p.generator();
    let pairs = 16;
    let (mut prim_ok, mut smooth_ok) = (0, 0);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let settings = GenSettings::deterministic(p.cfg.frames);
        let t = gen.transition(&texts[i].input, &audio[i].input, 8, &settings).unwrap();
        prim_ok += usize::from(t.second[..8] == t.first[t.first.len() - 8..]);
        smooth_ok += usize::from(t.jump <= 2.0 * t.median_step);
        worst = worst.max(t.jump / t.median_step);
    }
    outcome(
        prim_ok == pairs && smooth_ok == pairs,
        format!(
            "{pairs} text->audio pairs: primitive kept {prim_ok}/{pairs}; boundary jump <= 2x median step {smooth_ok}/{pairs} \
             (worst ratio {worst:.2})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism

fn ude(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ude")).args(args).output().expect("run ude")
}

fn save_run(p: &Trained, run: &Path) {
    save_stage(run, Stage::Mq, &p.cfg, &p.mq, &BTreeMap::new()).unwrap();
    let deps = dep_hashes(run, Stage::Utt).unwrap();
    let bundle = TokenBundle {
        vocab: p.vocab.clone(),
        mate: p.tokens.mate.clone(),
        utt: p.tokens.utt.clone(),
        disc: p.tokens.disc.clone(),
    };
    save_stage(run, Stage::Utt, &p.cfg, &bundle, &deps).unwrap();
}

fn criterion_9() -> Outcome {
    let p = trained();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    save_run(p, &run);
    let out = dir.path().join("out");
    let (run_s, out_s) = (run.to_str().unwrap(), out.to_str().unwrap());
    let prompts = [p.test().iter().find_map(|s| s.text.clone()).unwrap(), "a person walks forward".to_string()];
    let mut identical = true;
    let mut runs_ok = true;
    for prompt in &prompts {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let o = ude(&[
                "--seed", "11", "--out", out_s, "generate", "--text", prompt, "--run", run_s, "--decoder", "vq",
            ]);
            runs_ok &= o.status.success();
            outputs.push((
                std::fs::read(out.join("generated.motion")).unwrap_or_default(),
                std::fs::read(out.join("generated.json")).unwrap_or_default(),
            ));
            let _ = std::fs::remove_dir_all(&out);
        }
        identical &= !outputs[0].0.is_empty() && outputs[0] == outputs[1];
    }

    // z on with the default generation settings; the greedy rate isolates the latent's own effect
    let gen = p.generator();
    let test = p.test();
    let defaults = RunConfig { use_z: true, ..RunConfig::default() };
    let mut rng = seeded(9);
    let (mut differ, mut differ_greedy) = (0, 0);
    for trial in 0..100 {
        let input = &test[trial % test.len()].input;
        let (a, b) = (rng.next_u64(), rng.next_u64());
        let tokens = |seed: u64, greedy: bool| {
            let mut s = GenSettings { seed, ..settings(&defaults, p.cfg.frames) };
            if greedy {
                s.sampling = Sampling::Greedy;
            }
            gen.tokens(input, &s, &[]).unwrap()
        };
        differ += usize::from(tokens(a, false) != tokens(b, false));
        differ_greedy += usize::from(tokens(a, true) != tokens(b, true));
    }
    outcome(
        runs_ok && identical && differ >= 95,
        format!(
            "`ude generate` z off + VQ twice per prompt: byte-identical {identical} (exit ok {runs_ok}); z on, default \
             sampling: {differ}/100 seed pairs differ (>= 95); greedy with z only: {differ_greedy}/100"
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. diffusion decoder diversity

fn criterion_10() -> Outcome {
    let p = trained();
    let input = &p.test().into_iter().find(|s| s.modality() == Modality::Audio).unwrap().input;
    let gen = p.generator();
    let tokens = gen.tokens(input, &GenSettings::deterministic(p.cfg.frames), &[]).unwrap();
    let mut seeds = derive(10, 0);
    let dmd: Vec<MotionSequence> =
        (0..30).map(|_| gen.decode(&tokens, DecoderKind::Diffusion, seeds.next_u64()).unwrap()).collect();
    let vq: Vec<MotionSequence> = (0..30).map(|_| gen.decode(&tokens, DecoderKind::Vq, seeds.next_u64()).unwrap()).collect();
    let div = |m: &[MotionSequence]| {
        (
            diversity(&FeatureSet::kinetic(m).unwrap()).unwrap(),
            diversity(&FeatureSet::geometric(m).unwrap()).unwrap(),
        )
    };
    let ((dk, dm), (vk, vm)) = (div(&dmd), div(&vq));
    // identical decodes also give identical features, so FID between the two VQ halves is zero
    let fid_vq = fid(&FeatureSet::kinetic(&vq[..15]).unwrap(), &FeatureSet::kinetic(&vq[15..]).unwrap()).unwrap();
    outcome(
        dk > 0.0 && dm > 0.0 && vk == 0.0 && vm == 0.0,
        format!(
            "{} tokens, 30 decodes each: DMD Div_k {dk:.4} Div_m {dm:.4} vs VQ Div_k {vk} Div_m {vm} (VQ half-split FID {fid_vq:.1e})",
            tokens.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("MQ reconstruction", criterion_2),
        ("quantizer and VQ loss oracles", criterion_3),
        ("causality", criterion_4),
        ("diffusion math", criterion_5),
        ("metric oracles", criterion_6),
        ("unified model", criterion_7),
        ("transition", criterion_8),
        ("determinism", criterion_9),
        ("diffusion decoder diversity", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("UDE_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("UDE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut panicked = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            panicked += 1;
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {n:>2} {name}: {} [{:.1}s] {}",
            if result.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if panicked == 0 && (failed == 0 || !strict) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
