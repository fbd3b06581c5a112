//! Diffusion motion decoder: DDPM over normalized frames, conditioned on a
//! max-pooled encoding of the motion-token sequence.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::mq::{MqModel, TokenSequence, DOWNSAMPLE};
use crate::numerics::nn::{sinusoidal_positions, Linear, Standardizer, TransformerStack};
use crate::numerics::params::{accumulate, clip_grad_norm};
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{derive, seeded, Rng};

pub const FULL_SCALE_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Variance tables, indexed by step `t ∈ [1, steps]` (slot 0 unused).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linearly spaced `β` from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = vec![0.0; steps + 1];
    for (t, b) in betas.iter_mut().enumerate().skip(1) {
        *b = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
        };
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

/// Standard endpoints rescaled by `1000 / steps`, so short chains still end near pure noise.
pub fn scaled_schedule(steps: usize) -> Result<NoiseSchedule> {
    let r = FULL_SCALE_STEPS as f64 / steps.max(1) as f64;
    make_schedule(steps, (BETA_START * r).min(0.5), (BETA_END * r).min(0.999))
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::dim(format!("x0 {:?} and noise {:?}", x0.shape(), eps.shape())));
        }
        let (a, b) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Tensor::new(x0.shape(), data)
    }

    /// One ancestral step `x_t → x_{t−1}` given the predicted noise and the fresh draw `zeta`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, zeta: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let inv = 1.0 / self.alphas[t].sqrt();
        let k = self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt();
        let sigma = if t > 1 { self.betas[t].sqrt() } else { 0.0 };
        let data = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .zip(zeta.data())
            .map(|((x, e), z)| inv * (x - k * e) + sigma * z)
            .collect();
        Tensor::new(x_t.shape(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmdConfig {
    pub channels: usize,
    pub codes: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub steps: usize,
    pub fps: f64,
}

impl Default for DmdConfig {
    fn default() -> Self {
        DmdConfig {
            channels: 24,
            codes: 64,
            width: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            hidden: 128,
            steps: 50,
            fps: 20.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DmdModel {
    pub config: DmdConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub norm: Standardizer,
    token_embed: ParamId,
    cond_stack: TransformerStack,
    time_embed: ParamId,
    in_proj: Linear,
    dec_stack: TransformerStack,
    out: Linear,
}

impl DmdModel {
    pub fn new(config: DmdConfig, norm: Standardizer, seed: u64) -> Result<Self> {
        if norm.mean.len() != config.channels {
            return Err(Error::Config(format!(
                "normalizer has {} columns for {} channels",
                norm.mean.len(),
                config.channels
            )));
        }
        let schedule = scaled_schedule(config.steps)?;
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let d = config.width;
        let token_embed = s.add("token_embed", Tensor::randn(&[config.codes, d], 0.5, &mut rng));
        let cond_stack = TransformerStack::new(&mut s, "cond", config.enc_layers, d, config.heads, config.hidden, &mut rng);
        // learned, initialized from the sinusoidal table
        let time_embed = s.add("time_embed", sinusoidal_positions(config.steps + 1, d));
        let in_proj = Linear::new(&mut s, "in_proj", config.channels, d, &mut rng);
        let dec_stack = TransformerStack::new(&mut s, "denoiser", config.dec_layers, d, config.heads, config.hidden, &mut rng);
        let out = Linear::new(&mut s, "out", d, config.channels, &mut rng);
        Ok(DmdModel {
            config,
            schedule,
            store: s,
            norm,
            token_embed,
            cond_stack,
            time_embed,
            in_proj,
            dec_stack,
            out,
        })
    }

    /// Replaces the noise schedule; the timestep table keeps its size.
    pub fn set_schedule(&mut self, schedule: NoiseSchedule) -> Result<()> {
        if schedule.steps() != self.config.steps {
            return Err(Error::Config(format!(
                "schedule has {} steps, model {}",
                schedule.steps(),
                self.config.steps
            )));
        }
        self.schedule = schedule;
        Ok(())
    }

    /// Encoder rows before pooling, `S × D`.
    pub fn token_rows_var(&self, g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.config.codes) {
            return Err(Error::Token(format!("token {bad} outside codebook of {}", self.config.codes)));
        }
        let e = g.gather_rows(p[self.token_embed], tokens)?;
        let pos = g.constant(sinusoidal_positions(tokens.len(), self.config.width));
        let e = g.add(e, pos)?;
        self.cond_stack.forward(g, p, e, None)
    }

    pub fn condition_var(&self, g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
        let rows = self.token_rows_var(g, p, tokens)?;
        g.max_pool_rows(rows)
    }

    pub fn encode_condition(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let c = self.condition_var(&mut g, &p, tokens)?;
        Ok(g.value(c).data().to_vec())
    }

    pub fn noise_var(&self, g: &mut Graph, p: &Bound, cond: Var, t: usize, x_t: Var) -> Result<Var> {
        self.schedule.check(t)?;
        let (frames, c) = (g.shape(x_t)[0], g.shape(x_t)[1]);
        if c != self.config.channels || frames == 0 {
            return Err(Error::dim(format!("x_t {:?} for {} channels", g.shape(x_t), c)));
        }
        let te = g.gather_rows(p[self.time_embed], &[t])?;
        let bias = g.add(cond, te)?;
        let h = self.in_proj.forward(g, p, x_t)?;
        let h = g.add_row(h, bias)?;
        let pos = g.constant(sinusoidal_positions(frames, self.config.width));
        let h = g.add(h, pos)?;
        let h = self.dec_stack.forward(g, p, h, None)?;
        self.out.forward(g, p, h)
    }

    /// `ε̂ = ε_θ(x_t, t, c)` in normalized coordinates.
    pub fn predict_noise(&self, cond: &[f64], t: usize, x_t: &Tensor) -> Result<Tensor> {
        if cond.len() != self.config.width {
            return Err(Error::dim(format!("condition has {} values, expected {}", cond.len(), self.config.width)));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let c = g.constant(Tensor::new(&[1, cond.len()], cond.to_vec())?);
        let x = g.constant(x_t.clone());
        let y = self.noise_var(&mut g, &p, c, t, x)?;
        Ok(g.value(y).clone())
    }

    /// Noise-prediction loss graph for a given step and noise draw.
    fn loss_graph(&self, g: &mut Graph, p: &Bound, x0: &Tensor, tokens: &[usize], t: usize, eps: &Tensor) -> Result<Var> {
        let x_t = self.schedule.q_sample(x0, t, eps)?;
        let c = self.condition_var(g, p, tokens)?;
        let x = g.constant(x_t);
        let eps_hat = self.noise_var(g, p, c, t, x)?;
        let target = g.constant(eps.clone());
        g.mse(eps_hat, target)
    }

    /// Squared noise-prediction error with `t` and `ε` drawn from `rng`.
    pub fn dmd_loss(&self, x0: &Tensor, tokens: &[usize], rng: &mut Rng) -> Result<f64> {
        let (t, eps) = draw(self.schedule.steps(), x0.shape(), rng);
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let l = self.loss_graph(&mut g, &p, x0, tokens, t, &eps)?;
        Ok(g.value(l).item())
    }

    /// Ancestral sampling from `x_T ∼ N(0, I)`; returns normalized frames.
    pub fn sample_normalized(&self, cond: &[f64], frames: usize, seed: u64) -> Result<Tensor> {
        if frames == 0 {
            return Err(Error::Contract("need at least one frame".into()));
        }
        let mut rng = seeded(seed);
        let shape = [frames, self.config.channels];
        let mut x = randn(&shape, &mut rng);
        for t in (1..=self.schedule.steps()).rev() {
            let eps = self.predict_noise(cond, t, &x)?;
            let zeta = if t > 1 { randn(&shape, &mut rng) } else { Tensor::zeros(&shape) };
            x = self.schedule.reverse_step(&x, t, &eps, &zeta)?;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("sample_reverse"));
        }
        Ok(x)
    }

    pub fn sample_reverse(&self, cond: &[f64], frames: usize, seed: u64) -> Result<MotionSequence> {
        let x = self.sample_normalized(cond, frames, seed)?;
        MotionSequence::from_tensor(self.config.fps, &self.norm.invert(&x))
    }

    /// Decodes tokens at the MQ frame rate (`4` frames per token).
    pub fn decode_tokens(&self, tokens: &TokenSequence, seed: u64) -> Result<MotionSequence> {
        let c = self.encode_condition(tokens)?;
        self.sample_reverse(&c, tokens.len() * DOWNSAMPLE, seed)
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

fn draw(steps: usize, shape: &[usize], rng: &mut Rng) -> (usize, Tensor) {
    let t = rng.random_range(1..=steps);
    (t, randn(shape, rng))
}

/// One training pair: normalized frames and their token sequence.
#[derive(Clone, Debug)]
pub struct DmdSample {
    pub x0: Tensor,
    pub tokens: TokenSequence,
}

impl DmdSample {
    pub fn from_mq(mq: &MqModel, motion: &MotionSequence) -> Result<Self> {
        Ok(DmdSample {
            x0: mq.normalize(motion)?,
            tokens: mq.tokenize(motion)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmdTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for DmdTrainConfig {
    fn default() -> Self {
        DmdTrainConfig {
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            max_grad_norm: 1.0,
        }
    }
}

/// Minibatch Adam on the noise-prediction loss; returns the mean loss of every epoch.
pub fn train_dmd(model: &mut DmdModel, samples: &[DmdSample], cfg: &DmdTrainConfig, seed: u64) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    if samples.is_empty() {
        return Err(Error::Training("DMD training set is empty".into()));
    }
    let mut rng = derive(seed, 0);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut acc = model.store.zero_grads();
            for &i in chunk {
                let s = &samples[i];
                let (t, eps) = draw(model.schedule.steps(), s.x0.shape(), &mut rng);
                let mut g = Graph::new();
                let p = model.store.bind(&mut g, true);
                let loss = model.loss_graph(&mut g, &p, &s.x0, &s.tokens, t, &eps)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::Training(format!("DMD loss is {v} in epoch {epoch}")));
                }
                sum += v;
                let mut grads = g.backward(loss)?;
                accumulate(&mut acc, &model.store.grads(&p, &mut grads));
            }
            let scale = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|t| t.scale_in_place(scale));
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut acc, cfg.max_grad_norm);
            }
            adam.step(&mut model.store, &acc)?;
        }
        history.push(sum / samples.len() as f64);
    }
    Ok(history)
}
