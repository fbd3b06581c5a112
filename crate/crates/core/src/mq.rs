//! Motion quantization: temporal-conv VQ-VAE with a learned codebook.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::numerics::nn::{Conv1d, Standardizer};
use crate::numerics::params::{accumulate, clip_grad_norm};
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{derive, seeded};

/// Integer code indices, one per `downsample` frames.
pub type TokenSequence = Vec<usize>;

pub const DOWNSAMPLE: usize = 4;
pub const FULL_SCALE_CODES: usize = 2048;
pub const FULL_SCALE_CODE_DIM: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MqConfig {
    /// Values per frame (`J · 3`).
    pub channels: usize,
    pub hidden: usize,
    pub codes: usize,
    pub code_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub fps: f64,
}

impl Default for MqConfig {
    fn default() -> Self {
        MqConfig {
            channels: 24,
            hidden: 64,
            codes: 64,
            code_dim: 32,
            beta1: 1.0,
            beta2: 1.0,
            fps: 20.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MqModel {
    pub config: MqConfig,
    pub store: ParamStore,
    pub norm: Standardizer,
    enc: [Conv1d; 3],
    dec: [Conv1d; 3],
    pub codebook: ParamId,
    /// Assignments per code during the last training epoch.
    pub usage: Vec<u64>,
    seeded_codebook: bool,
}

/// Scalar loss terms of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Index of the nearest code (squared Euclidean), lowest index on ties.
pub fn nearest_code(codebook: &Tensor, row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows() {
        let d: f64 = codebook.row(k).iter().zip(row).map(|(c, e)| (e - c) * (e - c)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Row-wise nearest-code assignment.
pub fn quantize(codebook: &Tensor, e: &Tensor) -> Result<TokenSequence> {
    if codebook.cols() != e.cols() {
        return Err(Error::dim(format!(
            "codes have dim {}, embeddings {}",
            codebook.cols(),
            e.cols()
        )));
    }
    Ok((0..e.rows()).map(|r| nearest_code(codebook, e.row(r))).collect())
}

impl MqModel {
    pub fn new(config: MqConfig, norm: Standardizer, seed: u64) -> Result<Self> {
        if config.codes < 2 {
            return Err(Error::Config("codebook needs at least two codes".into()));
        }
        if norm.mean.len() != config.channels {
            return Err(Error::Config(format!(
                "normalizer has {} columns for {} channels",
                norm.mean.len(),
                config.channels
            )));
        }
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let (c, h, d) = (config.channels, config.hidden, config.code_dim);
        let enc = [
            Conv1d::new(&mut s, "enc.conv1", c, h, 3, 1, &mut rng),
            Conv1d::new(&mut s, "enc.conv2", h, h, 3, 2, &mut rng),
            Conv1d::new(&mut s, "enc.conv3", h, d, 3, 2, &mut rng),
        ];
        let dec = [
            Conv1d::new(&mut s, "dec.conv1", d, h, 3, 1, &mut rng),
            Conv1d::new(&mut s, "dec.conv2", h, h, 3, 1, &mut rng),
            Conv1d::new(&mut s, "dec.conv3", h, c, 3, 1, &mut rng),
        ];
        let codebook = s.add("codebook", Tensor::randn(&[config.codes, d], 1.0, &mut rng));
        Ok(MqModel {
            usage: vec![0; config.codes],
            config,
            store: s,
            norm,
            enc,
            dec,
            codebook,
            seeded_codebook: false,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.codebook)
    }

    pub fn normalize(&self, x: &MotionSequence) -> Result<Tensor> {
        if x.width() != self.config.channels {
            return Err(Error::dim(format!(
                "model expects {} values per frame, motion has {}",
                self.config.channels,
                x.width()
            )));
        }
        if x.frames() % DOWNSAMPLE != 0 {
            return Err(Error::Length(format!(
                "{} frames is not a multiple of {DOWNSAMPLE}; crop or pad first",
                x.frames()
            )));
        }
        Ok(self.norm.apply(&x.to_tensor()))
    }

    fn encode_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.enc[0].forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.enc[1].forward(g, p, h)?;
        let h = g.relu(h)?;
        self.enc[2].forward(g, p, h)
    }

    /// Latent rows (`T'×d`) to normalized frames (`4T'×c`).
    pub fn decode_var(&self, g: &mut Graph, p: &Bound, q: Var) -> Result<Var> {
        let h = self.dec[0].forward(g, p, q)?;
        let h = g.relu(h)?;
        let h = g.upsample_rows(h, 2)?;
        let h = self.dec[1].forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = g.upsample_rows(h, 2)?;
        self.dec[2].forward(g, p, h)
    }

    /// Encoder output `e`, `T/4 × d`.
    pub fn encode(&self, x: &MotionSequence) -> Result<Tensor> {
        let xn = self.normalize(x)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(xn);
        let e = self.encode_var(&mut g, &p, xv)?;
        Ok(g.value(e).clone())
    }

    pub fn tokenize(&self, x: &MotionSequence) -> Result<TokenSequence> {
        quantize(self.codebook(), &self.encode(x)?)
    }

    /// Codebook rows for `tokens`.
    pub fn code_rows(&self, tokens: &[usize]) -> Result<Tensor> {
        let k = self.config.codes;
        if let Some(bad) = tokens.iter().find(|&&t| t >= k) {
            return Err(Error::Token(format!("token {bad} outside codebook of {k}")));
        }
        let cb = self.codebook();
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| cb.row(t).to_vec()).collect();
        if rows.is_empty() {
            return Err(Error::Token("empty token sequence".into()));
        }
        Tensor::from_rows(&rows)
    }

    /// Decoder output in normalized coordinates.
    pub fn decode_latent(&self, q: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let qv = g.constant(q.clone());
        let y = self.decode_var(&mut g, &p, qv)?;
        Ok(g.value(y).clone())
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<MotionSequence> {
        let y = self.decode_latent(&self.code_rows(tokens)?)?;
        MotionSequence::from_tensor(self.config.fps, &self.norm.invert(&y))
    }

    /// Builds the loss graph for one sequence; returns `(total, [rec, codebook, commit], e, tokens)`.
    fn loss_graph(&self, g: &mut Graph, p: &Bound, xn: &Tensor) -> Result<(Var, [Var; 3], Var, TokenSequence)> {
        let x = g.constant(xn.clone());
        let e = self.encode_var(g, p, x)?;
        let tokens = quantize(self.codebook(), g.value(e))?;
        let q = g.gather_rows(p[self.codebook], &tokens)?;
        let q_st = g.straight_through(e, q)?;
        let y = self.decode_var(g, p, q_st)?;
        let rec = g.mse(y, x)?;
        let e_sg = g.detach(e);
        let q_sg = g.detach(q);
        let cb = g.mse(e_sg, q)?;
        let commit = g.mse(e, q_sg)?;
        let a = g.scale(cb, self.config.beta1)?;
        let b = g.scale(commit, self.config.beta2)?;
        let total = g.add(rec, a)?;
        let total = g.add(total, b)?;
        Ok((total, [rec, cb, commit], e, tokens))
    }

    /// `rec + β1·codebook + β2·commitment` for one sequence, each a mean squared error.
    pub fn vq_loss(&self, x: &MotionSequence) -> Result<VqLoss> {
        let xn = self.normalize(x)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (total, [rec, cb, commit], _, _) = self.loss_graph(&mut g, &p, &xn)?;
        Ok(VqLoss {
            total: g.value(total).item(),
            reconstruction: g.value(rec).item(),
            codebook: g.value(cb).item(),
            commitment: g.value(commit).item(),
        })
    }

    /// Gradients of the total loss for one sequence, in store order.
    pub fn loss_gradients(&self, x: &MotionSequence) -> Result<(VqLoss, Vec<Tensor>)> {
        let xn = self.normalize(x)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, true);
        let (total, [rec, cb, commit], _, _) = self.loss_graph(&mut g, &p, &xn)?;
        let mut grads = g.backward(total)?;
        let loss = VqLoss {
            total: g.value(total).item(),
            reconstruction: g.value(rec).item(),
            codebook: g.value(cb).item(),
            commitment: g.value(commit).item(),
        };
        Ok((loss, self.store.grads(&p, &mut grads)))
    }

    /// Fraction of codes assigned at least once over `motions`.
    pub fn utilization(&self, motions: &[MotionSequence]) -> Result<f64> {
        let mut used = vec![false; self.config.codes];
        for m in motions {
            for t in self.tokenize(m)? {
                used[t] = true;
            }
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / self.config.codes as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MqTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Joint gradient-norm cap per step; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Learning-rate multiplier for the codebook.
    pub codebook_lr_scale: f64,
}

impl Default for MqTrainConfig {
    fn default() -> Self {
        MqTrainConfig {
            epochs: 50,
            batch: 16,
            lr: 2e-3,
            max_grad_norm: 1.0,
            codebook_lr_scale: 10.0,
        }
    }
}

/// Minibatch Adam on the VQ loss. Codes left unused for a whole epoch are moved onto
/// random encoder outputs from that epoch. Returns the mean loss of every epoch.
pub fn train_mq(model: &mut MqModel, motions: &[MotionSequence], cfg: &MqTrainConfig, seed: u64) -> Result<Vec<f64>> {
    if motions.is_empty() {
        return Err(Error::Training("MQ training set is empty".into()));
    }
    let inputs = motions.iter().map(|m| model.normalize(m)).collect::<Result<Vec<_>>>()?;
    let mut rng = derive(seed, 0);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.store);
    adam.set_lr_scale(model.codebook.index(), cfg.codebook_lr_scale);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    if cfg.epochs > 0 && !model.seeded_codebook {
        let rows = encoder_rows(model, &inputs, &mut rng)?;
        let cb = model.store.get_mut(model.codebook);
        for k in 0..cb.rows() {
            let src = &rows[rng.random_range(0..rows.len())];
            cb.row_mut(k).copy_from_slice(src);
        }
        model.seeded_codebook = true;
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![0u64; model.config.codes];
        let mut sum = 0.0;
        let mut reservoir: Vec<Vec<f64>> = Vec::new();
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut acc = model.store.zero_grads();
            for &i in chunk {
                let mut g = Graph::new();
                let p = model.store.bind(&mut g, true);
                let (total, _, e, tokens) = model.loss_graph(&mut g, &p, &inputs[i])?;
                let value = g.value(total).item();
                if !value.is_finite() {
                    return Err(Error::Training(format!("MQ loss is {value} in epoch {epoch}")));
                }
                sum += value;
                for &t in &tokens {
                    usage[t] += 1;
                }
                let e = g.value(e);
                if reservoir.len() < 256 {
                    let r = rng.random_range(0..e.rows());
                    reservoir.push(e.row(r).to_vec());
                }
                let mut grads = g.backward(total)?;
                accumulate(&mut acc, &model.store.grads(&p, &mut grads));
            }
            let scale = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|t| t.scale_in_place(scale));
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut acc, cfg.max_grad_norm);
            }
            adam.step(&mut model.store, &acc)?;
        }
        let cb = model.store.get_mut(model.codebook);
        for (k, &u) in usage.iter().enumerate() {
            if u == 0 && !reservoir.is_empty() {
                let src = &reservoir[rng.random_range(0..reservoir.len())];
                cb.row_mut(k).copy_from_slice(src);
            }
        }
        model.usage = usage;
        history.push(sum / inputs.len() as f64);
    }
    Ok(history)
}

fn encoder_rows<R: rand::Rng>(model: &MqModel, inputs: &[Tensor], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for _ in 0..inputs.len().min(128) {
        let x = &inputs[rng.random_range(0..inputs.len())];
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = model.encode_var(&mut g, &p, xv)?;
        let e = g.value(e);
        for r in 0..e.rows() {
            rows.push(e.row(r).to_vec());
        }
    }
    Ok(rows)
}
