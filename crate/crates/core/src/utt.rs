//! Unified token transformer: autoregressive motion-token prediction behind a
//! fully visible condition prefix, plus the conditional patch discriminator.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mate::{CondEmbedding, MateModel, ModalityInput};
use crate::motion::{Modality, MotionSequence};
use crate::mq::{MqModel, TokenSequence, DOWNSAMPLE};
use crate::numerics::nn::{sinusoidal_positions, Conv1d, Linear, Standardizer, TransformerStack};
use crate::numerics::params::{accumulate, clip_grad_norm};
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{derive, seeded};

pub const FULL_SCALE_LAYERS: usize = 8;

/// Row-major `(L+S)²` visibility: `visible(r, c) ⇔ c < L or c ≤ r`.
pub fn build_mask(cond_len: usize, motion_len: usize) -> Vec<bool> {
    let n = cond_len + motion_len;
    let mut m = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            m[r * n + c] = c < cond_len || c <= r;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttConfig {
    /// Codebook size `K`; the vocabulary adds BOS and EOS.
    pub codes: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub z_dim: usize,
    /// Longest prefix (BOS included) the model accepts.
    pub max_tokens: usize,
}

impl Default for UttConfig {
    fn default() -> Self {
        UttConfig {
            codes: 64,
            width: 64,
            layers: 2,
            heads: 4,
            hidden: 128,
            z_dim: 16,
            max_tokens: 65,
        }
    }
}

impl UttConfig {
    pub fn bos(&self) -> usize {
        self.codes
    }

    pub fn eos(&self) -> usize {
        self.codes + 1
    }

    pub fn vocab(&self) -> usize {
        self.codes + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, top_k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    /// Longest output, primitive included.
    pub max_len: usize,
    /// EOS is not allowed before this many tokens.
    pub min_len: usize,
    pub sampling: Sampling,
    pub primitive: TokenSequence,
    pub z: Option<Vec<f64>>,
    pub seed: u64,
}

impl GenerateOptions {
    /// Exactly `len` tokens, greedy, no primitive, no z.
    pub fn fixed(len: usize) -> Self {
        GenerateOptions {
            max_len: len,
            min_len: len,
            sampling: Sampling::Greedy,
            primitive: Vec::new(),
            z: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UttModel {
    pub config: UttConfig,
    pub store: ParamStore,
    token_embed: ParamId,
    stack: TransformerStack,
    out: Linear,
    z_mlp: [Linear; 2],
}

impl UttModel {
    pub fn new(config: UttConfig, seed: u64) -> Result<Self> {
        if config.codes < 2 || config.max_tokens < 2 {
            return Err(Error::Config("UTT needs at least two codes and two context slots".into()));
        }
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let d = config.width;
        let token_embed = s.add("token_embed", Tensor::randn(&[config.vocab(), d], 0.5, &mut rng));
        let stack = TransformerStack::new(&mut s, "decoder", config.layers, d, config.heads, config.hidden, &mut rng);
        let out = Linear::new(&mut s, "out", d, config.vocab(), &mut rng);
        let z_mlp = [
            Linear::new(&mut s, "z_mlp.0", config.z_dim, d, &mut rng),
            Linear::new(&mut s, "z_mlp.1", d, d, &mut rng),
        ];
        Ok(UttModel {
            config,
            store: s,
            token_embed,
            stack,
            out,
            z_mlp,
        })
    }

    /// Parameters of the z-injection MLP, for zeroing in tests.
    pub fn z_params(&self) -> Vec<ParamId> {
        self.z_mlp.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn sample_z(&self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..self.config.z_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `S × (K+2)` logits; row `i` predicts the token after `prefix[i]`.
    pub fn logits_var(&self, g: &mut Graph, p: &Bound, cond: Var, prefix: &[usize], z: Option<&[f64]>) -> Result<Var> {
        let cfg = &self.config;
        let (l, d) = (g.shape(cond)[0], cfg.width);
        if l == 0 || g.shape(cond)[1] != d {
            return Err(Error::dim(format!("condition {:?} for width {d}", g.shape(cond))));
        }
        if prefix.is_empty() || prefix[0] != cfg.bos() {
            return Err(Error::Contract("token prefix must start with BOS".into()));
        }
        if prefix.len() > cfg.max_tokens {
            return Err(Error::Length(format!(
                "{} tokens exceed the context of {}",
                prefix.len(),
                cfg.max_tokens
            )));
        }
        if let Some(bad) = prefix.iter().find(|&&t| t >= cfg.vocab()) {
            return Err(Error::Token(format!("token {bad} outside vocabulary of {}", cfg.vocab())));
        }
        let cond = match z {
            Some(z) => {
                if z.len() != cfg.z_dim {
                    return Err(Error::dim(format!("z has {} values, expected {}", z.len(), cfg.z_dim)));
                }
                let zv = g.constant(Tensor::new(&[1, cfg.z_dim], z.to_vec())?);
                let h = self.z_mlp[0].forward(g, p, zv)?;
                let h = g.relu(h)?;
                let zt = self.z_mlp[1].forward(g, p, h)?;
                let glob = g.slice_rows(cond, 0, 1)?;
                let glob = g.add(glob, zt)?;
                if l > 1 {
                    let rest = g.slice_rows(cond, 1, l)?;
                    g.concat_rows(&[glob, rest])?
                } else {
                    glob
                }
            }
            None => cond,
        };
        let s = prefix.len();
        let emb = g.gather_rows(p[self.token_embed], prefix)?;
        let pos = g.constant(sinusoidal_positions(s, d));
        let emb = g.add(emb, pos)?;
        let x = g.concat_rows(&[cond, emb])?;
        let mask = build_mask(l, s);
        let h = self.stack.forward(g, p, x, Some(&mask))?;
        let h = g.slice_rows(h, l, l + s)?;
        self.out.forward(g, p, h)
    }

    pub fn forward_logits(&self, cond: &CondEmbedding, prefix: &[usize], z: Option<&[f64]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let c = g.constant(cond.rows());
        let y = self.logits_var(&mut g, &p, c, prefix, z)?;
        Ok(g.value(y).clone())
    }

    /// Autoregressive decoding. The primitive is copied verbatim; BOS is never emitted.
    pub fn generate_tokens(&self, cond: &CondEmbedding, opts: &GenerateOptions) -> Result<TokenSequence> {
        let cfg = &self.config;
        if opts.max_len < opts.primitive.len() {
            return Err(Error::Contract(format!(
                "max_len {} is shorter than the primitive of {}",
                opts.max_len,
                opts.primitive.len()
            )));
        }
        if opts.max_len + 1 > cfg.max_tokens {
            return Err(Error::Length(format!(
                "{} tokens exceed the context of {}",
                opts.max_len,
                cfg.max_tokens - 1
            )));
        }
        if let Some(bad) = opts.primitive.iter().find(|&&t| t >= cfg.codes) {
            return Err(Error::Token(format!("primitive token {bad} outside codebook of {}", cfg.codes)));
        }
        let mut rng = seeded(opts.seed);
        let rows = cond.rows();
        let mut out = opts.primitive.clone();
        while out.len() < opts.max_len {
            let mut prefix = Vec::with_capacity(out.len() + 1);
            prefix.push(cfg.bos());
            prefix.extend_from_slice(&out);
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let c = g.constant(rows.clone());
            let y = self.logits_var(&mut g, &p, c, &prefix, opts.z.as_deref())?;
            let logits = g.value(y).row(prefix.len() - 1).to_vec();
            let allow_eos = out.len() >= opts.min_len;
            let next = pick_token(&logits, cfg, allow_eos, &opts.sampling, &mut rng);
            if next == cfg.eos() {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

fn pick_token<R: rand::Rng>(logits: &[f64], cfg: &UttConfig, allow_eos: bool, sampling: &Sampling, rng: &mut R) -> usize {
    let mut cands: Vec<usize> = (0..cfg.codes).collect();
    if allow_eos {
        cands.push(cfg.eos());
    }
    // descending logit, lowest index first on ties
    cands.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    match *sampling {
        Sampling::Greedy => cands[0],
        Sampling::Temperature { temperature, top_k } => {
            let k = top_k.clamp(1, cands.len());
            if k == 1 {
                return cands[0];
            }
            let t = temperature.max(1e-12);
            let top = logits[cands[0]];
            let w: Vec<f64> = cands[..k].iter().map(|&c| ((logits[c] - top) / t).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return cands[i];
                }
                u -= wi;
            }
            cands[0]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub channels: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            channels: 24,
            width: 64,
            layers: 2,
            heads: 4,
            hidden: 128,
        }
    }
}

/// Conditional patch discriminator: one score per 4-frame patch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub store: ParamStore,
    /// Motion normalization, shared with the MQ model.
    pub norm: Standardizer,
    conv: [Conv1d; 2],
    cond: Linear,
    stack: TransformerStack,
    score: Linear,
}

impl Discriminator {
    pub fn new(config: DiscConfig, norm: Standardizer, seed: u64) -> Result<Self> {
        if norm.mean.len() != config.channels {
            return Err(Error::Config(format!(
                "normalizer has {} columns for {} channels",
                norm.mean.len(),
                config.channels
            )));
        }
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let d = config.width;
        let conv = [
            Conv1d::new(&mut s, "conv1", config.channels, d, 3, 2, &mut rng),
            Conv1d::new(&mut s, "conv2", d, d, 3, 2, &mut rng),
        ];
        let cond = Linear::new(&mut s, "cond", d, d, &mut rng);
        let stack = TransformerStack::new(&mut s, "encoder", config.layers, d, config.heads, config.hidden, &mut rng);
        let score = Linear::new(&mut s, "score", d, 1, &mut rng);
        Ok(Discriminator {
            config,
            store: s,
            norm,
            conv,
            cond,
            stack,
            score,
        })
    }

    /// Scores `T/4 × 1` for normalized frames `xn` and a `1 × D` global embedding.
    pub fn scores_var(&self, g: &mut Graph, p: &Bound, glob: Var, xn: Var) -> Result<Var> {
        let t = g.shape(xn)[0];
        if t == 0 || t % DOWNSAMPLE != 0 {
            return Err(Error::dim(format!("{t} frames is not a positive multiple of {DOWNSAMPLE}")));
        }
        let h = self.conv[0].forward(g, p, xn)?;
        let h = g.relu(h)?;
        let h = self.conv[1].forward(g, p, h)?;
        let c = self.cond.forward(g, p, glob)?;
        let h = g.add_row(h, c)?;
        let h = self.stack.forward(g, p, h, None)?;
        self.score.forward(g, p, h)
    }

    pub fn discriminate(&self, glob: &[f64], motion: &MotionSequence) -> Result<Vec<f64>> {
        if glob.len() != self.config.width {
            return Err(Error::dim(format!("e_glob has {} values, expected {}", glob.len(), self.config.width)));
        }
        if motion.width() != self.config.channels {
            return Err(Error::dim(format!(
                "motion has {} values per frame, expected {}",
                motion.width(),
                self.config.channels
            )));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let e = g.constant(Tensor::new(&[1, glob.len()], glob.to_vec())?);
        let x = g.constant(self.norm.apply(&motion.to_tensor()));
        let s = self.scores_var(&mut g, &p, e, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttLoss {
    pub total: f64,
    pub ce: f64,
    pub adv: f64,
}

/// `[BOS, t_0..t_{S−1}]` in, `[t_0..t_{S−1}, EOS]` out.
pub fn teacher_forcing(cfg: &UttConfig, tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(cfg.bos());
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(cfg.eos());
    (input, target)
}

struct Bindings {
    mate: Bound,
    utt: Bound,
    mq: Bound,
    disc: Bound,
}

struct Models<'a> {
    mate: &'a MateModel,
    utt: &'a UttModel,
    disc: &'a Discriminator,
    mq: &'a MqModel,
}

impl Models<'_> {
    fn bind(&self, g: &mut Graph, train_gen: bool) -> Bindings {
        Bindings {
            mate: self.mate.store.bind(g, train_gen),
            utt: self.utt.store.bind(g, train_gen),
            mq: self.mq.store.bind(g, false),
            disc: self.disc.store.bind(g, !train_gen),
        }
    }

    /// Generator objective; also returns the decoded motion and global embedding.
    fn generator(&self, g: &mut Graph, b: &Bindings, input: &ModalityInput, tokens: &[usize], beta_adv: f64) -> Result<GenOut> {
        let cfg = &self.utt.config;
        if tokens.is_empty() {
            return Err(Error::Token("empty target token sequence".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= cfg.codes) {
            return Err(Error::Token(format!("target token {bad} outside codebook of {}", cfg.codes)));
        }
        let cond = self.mate.encode_var(g, &b.mate, input)?;
        let (inp, target) = teacher_forcing(cfg, tokens);
        let logits = self.utt.logits_var(g, &b.utt, cond, &inp, None)?;
        let ce = g.cross_entropy(logits, &target)?;
        let glob = g.slice_rows(cond, 0, 1)?;
        if beta_adv == 0.0 {
            let zero = g.constant(Tensor::scalar(0.0));
            return Ok(GenOut { total: ce, ce, adv: zero, motion: None, glob });
        }
        // predicted tokens made differentiable through a straight-through one-hot
        let s = tokens.len();
        let code_logits = g.slice_rows(logits, 0, s)?;
        let code_logits = g.slice_cols(code_logits, 0, cfg.codes)?;
        let soft = g.softmax(code_logits, 1)?;
        let probs = g.value(soft).clone();
        let mut hard = Tensor::zeros(&[s, cfg.codes]);
        for r in 0..s {
            let row = probs.row(r);
            let best = (0..cfg.codes).fold(0, |a, k| if row[k] > row[a] { k } else { a });
            hard.row_mut(r)[best] = 1.0;
        }
        let hard = g.constant(hard);
        let onehot = g.straight_through(soft, hard)?;
        let q = g.matmul(onehot, b.mq[self.mq.codebook])?;
        let y = self.mq.decode_var(g, &b.mq, q)?;
        let scores = self.disc.scores_var(g, &b.disc, glob, y)?;
        let m = g.mean(scores)?;
        let adv = g.scale(m, -1.0)?;
        let weighted = g.scale(adv, beta_adv)?;
        let total = g.add(ce, weighted)?;
        Ok(GenOut { total, ce, adv, motion: Some(y), glob })
    }
}

struct GenOut {
    total: Var,
    ce: Var,
    adv: Var,
    motion: Option<Var>,
    glob: Var,
}

/// `L_ce + β_adv·L_adv` for one conditioned sequence, teacher forced.
pub fn utt_loss(
    mate: &MateModel,
    utt: &UttModel,
    disc: &Discriminator,
    mq: &MqModel,
    input: &ModalityInput,
    tokens: &[usize],
    beta_adv: f64,
) -> Result<UttLoss> {
    let models = Models { mate, utt, disc, mq };
    let mut g = Graph::new();
    let b = models.bind(&mut g, false);
    let out = models.generator(&mut g, &b, input, tokens, beta_adv)?;
    Ok(UttLoss {
        total: g.value(out.total).item(),
        ce: g.value(out.ce).item(),
        adv: g.value(out.adv).item(),
    })
}

/// Hinge objective `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
fn hinge(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let r = g.affine(real, -1.0, 1.0)?;
    let r = g.relu(r)?;
    let r = g.mean(r)?;
    let f = g.affine(fake, 1.0, 1.0)?;
    let f = g.relu(f)?;
    let f = g.mean(f)?;
    g.add(r, f)
}

/// One training pair for the token transformer.
#[derive(Clone, Debug)]
pub struct UttSample {
    pub input: ModalityInput,
    pub tokens: TokenSequence,
    /// Real example for the discriminator: the ground-truth tokens decoded by the
    /// frozen MQ decoder, in normalized coordinates. Fakes go through the same
    /// decoder, so the two differ only in token choice.
    pub motion: Tensor,
}

impl UttSample {
    pub fn new(mq: &MqModel, input: ModalityInput, motion: &MotionSequence) -> Result<Self> {
        let tokens = mq.tokenize(motion)?;
        Ok(UttSample {
            motion: mq.decode_latent(&mq.code_rows(&tokens)?)?,
            tokens,
            input,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub beta_adv: f64,
    pub max_grad_norm: f64,
}

impl Default for UttTrainConfig {
    fn default() -> Self {
        UttTrainConfig {
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            disc_lr: 1e-4,
            beta_adv: 1.0,
            max_grad_norm: 1.0,
        }
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttEpoch {
    pub ce: f64,
    pub adv: f64,
    pub disc: f64,
}

/// Batches of one modality at a time, alternating text and audio while both last.
pub fn interleave_batches<R: rand::Rng>(samples: &[UttSample], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut text: Vec<usize> = Vec::new();
    let mut audio: Vec<usize> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match s.input.modality() {
            Modality::Text => text.push(i),
            Modality::Audio => audio.push(i),
        }
    }
    text.shuffle(rng);
    audio.shuffle(rng);
    let b = batch.max(1);
    let mut t = text.chunks(b).map(<[usize]>::to_vec);
    let mut a = audio.chunks(b).map(<[usize]>::to_vec);
    let mut out = Vec::new();
    loop {
        let (x, y) = (t.next(), a.next());
        if x.is_none() && y.is_none() {
            return out;
        }
        out.extend(x);
        out.extend(y);
    }
}

/// Alternating generator and discriminator steps over interleaved batches.
pub fn train_utt(
    mate: &mut MateModel,
    utt: &mut UttModel,
    disc: &mut Discriminator,
    mq: &MqModel,
    samples: &[UttSample],
    cfg: &UttTrainConfig,
    seed: u64,
) -> Result<Vec<UttEpoch>> {
    if samples.is_empty() {
        return Err(Error::Training("UTT training set is empty".into()));
    }
    if mate.config.width != utt.config.width || disc.config.width != utt.config.width {
        return Err(Error::Config("MATE, UTT and discriminator widths differ".into()));
    }
    if utt.config.codes != mq.config.codes {
        return Err(Error::Config("UTT vocabulary does not match the MQ codebook".into()));
    }
    let mut rng = derive(seed, 0);
    let mut opt_mate = AdamState::new(AdamConfig::with_lr(cfg.lr), &mate.store);
    let mut opt_utt = AdamState::new(AdamConfig::with_lr(cfg.lr), &utt.store);
    let mut opt_disc = AdamState::new(AdamConfig::with_lr(cfg.disc_lr), &disc.store);
    let adversarial = cfg.beta_adv != 0.0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut ce_sum, mut adv_sum, mut d_sum) = (0.0, 0.0, 0.0);
        let mut d_count = 0usize;
        for batch in interleave_batches(samples, cfg.batch, &mut rng) {
            step += 1;
            let mut g_mate = mate.store.zero_grads();
            let mut g_utt = utt.store.zero_grads();
            let mut g_disc = disc.store.zero_grads();
            let mut fakes = Vec::with_capacity(batch.len());
            {
                let models = Models { mate, utt, disc, mq };
                for &i in &batch {
                    let s = &samples[i];
                    let mut g = Graph::new();
                    let b = models.bind(&mut g, true);
                    let out = models.generator(&mut g, &b, &s.input, &s.tokens, cfg.beta_adv)?;
                    let (ce, adv) = (g.value(out.ce).item(), g.value(out.adv).item());
                    if !ce.is_finite() || !adv.is_finite() {
                        return Err(Error::Training(format!("UTT loss is not finite at step {step} (epoch {epoch})")));
                    }
                    ce_sum += ce;
                    adv_sum += adv;
                    if let Some(y) = out.motion {
                        fakes.push((g.value(y).clone(), g.value(out.glob).clone()));
                    }
                    let mut grads = g.backward(out.total)?;
                    accumulate(&mut g_mate, &mate.store.grads(&b.mate, &mut grads));
                    accumulate(&mut g_utt, &utt.store.grads(&b.utt, &mut grads));
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in g_mate.iter_mut().chain(g_utt.iter_mut()) {
                t.scale_in_place(scale);
            }
            if cfg.max_grad_norm > 0.0 {
                let mut joint: Vec<Tensor> = g_mate.drain(..).chain(g_utt.drain(..)).collect();
                clip_grad_norm(&mut joint, cfg.max_grad_norm);
                g_utt = joint.split_off(mate.store.len());
                g_mate = joint;
            }
            opt_mate.step(&mut mate.store, &g_mate)?;
            opt_utt.step(&mut utt.store, &g_utt)?;

            if adversarial {
                for (&i, (fake, glob)) in batch.iter().zip(&fakes) {
                    let mut g = Graph::new();
                    let p = disc.store.bind(&mut g, true);
                    let e = g.constant(glob.clone());
                    let real = g.constant(samples[i].motion.clone());
                    let fake = g.constant(fake.clone());
                    let sr = disc.scores_var(&mut g, &p, e, real)?;
                    let sf = disc.scores_var(&mut g, &p, e, fake)?;
                    let loss = hinge(&mut g, sr, sf)?;
                    let v = g.value(loss).item();
                    if !v.is_finite() {
                        return Err(Error::Training(format!("discriminator loss is not finite at step {step}")));
                    }
                    d_sum += v;
                    d_count += 1;
                    let mut grads = g.backward(loss)?;
                    accumulate(&mut g_disc, &disc.store.grads(&p, &mut grads));
                }
                g_disc.iter_mut().for_each(|t| t.scale_in_place(scale));
                if cfg.max_grad_norm > 0.0 {
                    clip_grad_norm(&mut g_disc, cfg.max_grad_norm);
                }
                opt_disc.step(&mut disc.store, &g_disc)?;
            }
        }
        let n = samples.len() as f64;
        history.push(UttEpoch {
            ce: ce_sum / n,
            adv: adv_sum / n,
            disc: if d_count > 0 { d_sum / d_count as f64 } else { 0.0 },
        });
    }
    Ok(history)
}

/// Mean teacher-forced cross-entropy over `samples`.
pub fn mean_cross_entropy(mate: &MateModel, utt: &UttModel, samples: &[UttSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let pm = mate.store.bind(&mut g, false);
        let pu = utt.store.bind(&mut g, false);
        let cond = mate.encode_var(&mut g, &pm, &s.input)?;
        let (inp, target) = teacher_forcing(&utt.config, &s.tokens);
        let logits = utt.logits_var(&mut g, &pu, cond, &inp, None)?;
        let ce = g.cross_entropy(logits, &target)?;
        total += g.value(ce).item();
    }
    Ok(total / samples.len() as f64)
}
