//! Contrastively trained motion/text encoders and the 61-candidate retrieval protocol.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, TextPrompt, Vocabulary};
use crate::numerics::nn::{sinusoidal_positions, Conv1d, Linear, Standardizer};
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{derive, seeded};

pub const DEFAULT_DISTRACTORS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub width: usize,
    pub dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub max_text_len: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            width: 64,
            dim: 32,
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            temperature: 0.07,
            max_text_len: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalEncoder {
    pub config: RetrievalConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub norm: Standardizer,
    m_conv1: Conv1d,
    m_conv2: Conv1d,
    m_head_a: Linear,
    m_head_b: Linear,
    t_embed: ParamId,
    t_conv: Conv1d,
    t_head: Linear,
}

impl RetrievalEncoder {
    pub fn new(config: RetrievalConfig, vocab: Vocabulary, norm: Standardizer, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let (h, d, c) = (config.width, config.dim, norm.mean.len());
        let m_conv1 = Conv1d::new(&mut store, "motion.conv1", c, h, 3, 1, &mut rng);
        let m_conv2 = Conv1d::new(&mut store, "motion.conv2", h, h, 3, 2, &mut rng);
        let m_head_a = Linear::new(&mut store, "motion.head_a", h, d, &mut rng);
        let m_head_b = Linear::new(&mut store, "motion.head_b", h, d, &mut rng);
        let t_embed = store.add("text.embed", Tensor::randn(&[vocab.len(), h], 1.0, &mut rng));
        let t_conv = Conv1d::new(&mut store, "text.conv", h, h, 3, 1, &mut rng);
        let t_head = Linear::new(&mut store, "text.head", h, d, &mut rng);
        RetrievalEncoder {
            config,
            store,
            vocab,
            norm,
            m_conv1,
            m_conv2,
            m_head_a,
            m_head_b,
            t_embed,
            t_conv,
            t_head,
        }
    }

    fn motion_var(&self, g: &mut Graph, p: &Bound, m: &MotionSequence) -> Result<Var> {
        if m.width() != self.norm.mean.len() {
            return Err(Error::dim(format!(
                "encoder expects {} coordinates per frame, motion has {}",
                self.norm.mean.len(),
                m.width()
            )));
        }
        if m.frames() < 4 {
            return Err(Error::Metric("retrieval encoder needs at least 4 frames".into()));
        }
        let x = g.constant(self.norm.apply(&m.to_tensor()));
        let h = self.m_conv1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.m_conv2.forward(g, p, h)?;
        let h = g.relu(h)?;
        let t = g.shape(h)[0];
        let a = g.slice_rows(h, 0, t / 2)?;
        let a = g.mean_rows(a)?;
        let b = g.slice_rows(h, t / 2, t)?;
        let b = g.mean_rows(b)?;
        let a = self.m_head_a.forward(g, p, a)?;
        let b = self.m_head_b.forward(g, p, b)?;
        let z = g.add(a, b)?;
        g.l2_normalize_rows(z)
    }

    fn text_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = TextPrompt::tokenize(text, &self.vocab).ids;
        ids.truncate(self.config.max_text_len);
        if ids.is_empty() {
            ids.push(crate::motion::text::UNK_ID);
        }
        ids
    }

    fn text_var(&self, g: &mut Graph, p: &Bound, text: &str) -> Result<Var> {
        let ids = self.text_ids(text);
        let e = g.gather_rows(p[self.t_embed], &ids)?;
        let pos = g.constant(sinusoidal_positions(ids.len(), self.config.width));
        let e = g.add(e, pos)?;
        let h = self.t_conv.forward(g, p, e)?;
        let h = g.relu(h)?;
        let h = g.mean_rows(h)?;
        let z = self.t_head.forward(g, p, h)?;
        g.l2_normalize_rows(z)
    }

    pub fn embed_motion(&self, m: &MotionSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let v = self.motion_var(&mut g, &p, m)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let v = self.text_var(&mut g, &p, text)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Symmetric in-batch InfoNCE loss.
    fn batch_loss(&self, g: &mut Graph, p: &Bound, batch: &[(&MotionSequence, &str)]) -> Result<Var> {
        let ms = batch.iter().map(|(m, _)| self.motion_var(g, p, m)).collect::<Result<Vec<_>>>()?;
        let ts = batch.iter().map(|(_, t)| self.text_var(g, p, t)).collect::<Result<Vec<_>>>()?;
        let m = g.concat_rows(&ms)?;
        let t = g.concat_rows(&ts)?;
        let tt = g.transpose(t)?;
        let logits = g.matmul(m, tt)?;
        let logits = g.scale(logits, 1.0 / self.config.temperature)?;
        let targets: Vec<usize> = (0..batch.len()).collect();
        let a = g.cross_entropy(logits, &targets)?;
        let lt = g.transpose(logits)?;
        let b = g.cross_entropy(lt, &targets)?;
        let s = g.add(a, b)?;
        g.scale(s, 0.5)
    }
}

/// Trains both encoders on `(motion, text)` pairs; returns the per-epoch mean loss.
pub fn train_retrieval_encoder(
    pairs: &[(MotionSequence, String)],
    vocab: &Vocabulary,
    config: &RetrievalConfig,
    seed: u64,
) -> Result<(RetrievalEncoder, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Training("retrieval training needs at least one text sample".into()));
    }
    let tensors: Vec<Tensor> = pairs.iter().map(|(m, _)| m.to_tensor()).collect();
    let norm = Standardizer::fit(&tensors);
    let mut enc = RetrievalEncoder::new(config.clone(), vocab.clone(), norm, seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &enc.store);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = derive(seed, 1);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(&MotionSequence, &str)> = chunk.iter().map(|&i| (&pairs[i].0, pairs[i].1.as_str())).collect();
            let mut g = Graph::new();
            let p = enc.store.bind(&mut g, true);
            let loss = enc.batch_loss(&mut g, &p, &batch)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("retrieval loss is {value} in epoch {epoch}")));
            }
            let mut grads = g.backward(loss)?;
            let grads = enc.store.grads(&p, &mut grads);
            adam.step(&mut enc.store, &grads)?;
            total += value;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok((enc, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub top1: f64,
    pub top5: f64,
    pub trials: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Each trial picks a random pair, draws `distractors` texts different from its own,
/// places the true text at a random slot and ranks all candidates by cosine
/// similarity to the motion. Equal similarities rank by slot.
pub fn retrieval_accuracy(
    motion_emb: &[Vec<f64>],
    text_emb: &[Vec<f64>],
    texts: &[String],
    distractors: usize,
    trials: usize,
    seed: u64,
) -> Result<RetrievalScore> {
    let n = motion_emb.len();
    if n == 0 || text_emb.len() != n || texts.len() != n {
        return Err(Error::Metric(format!(
            "retrieval needs equal non-empty lists, got {n} motions, {} text embeddings, {} texts",
            text_emb.len(),
            texts.len()
        )));
    }
    // one representative embedding per distinct text
    let mut first: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<usize> = Vec::new();
    for (i, t) in texts.iter().enumerate() {
        first.entry(t.as_str()).or_insert_with(|| {
            unique.push(i);
            i
        });
    }
    if unique.len() < distractors + 1 {
        return Err(Error::Metric(format!(
            "{} distinct texts; need {} for {distractors} distractors",
            unique.len(),
            distractors + 1
        )));
    }
    let mut rng = seeded(seed);
    let (mut top1, mut top5) = (0usize, 0usize);
    for _ in 0..trials {
        let i = rng.random_range(0..n);
        let own = first[texts[i].as_str()];
        let pool: Vec<usize> = unique.iter().copied().filter(|&k| k != own).collect();
        let picked = rand::seq::index::sample(&mut rng, pool.len(), distractors);
        let slot = rng.random_range(0..=distractors);
        let mut candidates: Vec<&[f64]> = picked.iter().map(|k| text_emb[pool[k]].as_slice()).collect();
        candidates.insert(slot, &text_emb[i]);
        let sims: Vec<f64> = candidates.iter().map(|c| cosine(&motion_emb[i], c)).collect();
        let truth = sims[slot];
        let rank = sims
            .iter()
            .enumerate()
            .filter(|&(k, &s)| s > truth || (s == truth && k < slot))
            .count();
        top1 += usize::from(rank < 1);
        top5 += usize::from(rank < 5);
    }
    let t = trials.max(1) as f64;
    Ok(RetrievalScore {
        top1: top1 as f64 / t,
        top5: top5 as f64 / t,
        trials,
    })
}

/// Embeds motions and their texts with `enc`, then runs [`retrieval_accuracy`].
pub fn evaluate_retrieval(
    enc: &RetrievalEncoder,
    motions: &[MotionSequence],
    texts: &[String],
    trials: usize,
    seed: u64,
) -> Result<RetrievalScore> {
    let me = motions.iter().map(|m| enc.embed_motion(m)).collect::<Result<Vec<_>>>()?;
    let te = texts.iter().map(|t| enc.embed_text(t)).collect::<Result<Vec<_>>>()?;
    retrieval_accuracy(&me, &te, texts, DEFAULT_DISTRACTORS, trials, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_embeddings_always_rank_first() {
        let n = 70;
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 * 0.09;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let texts: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let s = retrieval_accuracy(&emb, &emb, &texts, 60, 500, 1).unwrap();
        assert_eq!(s.top1, 1.0);
        assert!(retrieval_accuracy(&emb[..30], &emb[..30], &texts[..30], 60, 5, 1).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let vocab = Vocabulary::new(["a", "person", "jumps"]);
        let norm = Standardizer::identity(24);
        let enc = RetrievalEncoder::new(RetrievalConfig::default(), vocab, norm, 3);
        let m = MotionSequence::new(20.0, 8, (0..24 * 16).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        for e in [enc.embed_motion(&m).unwrap(), enc.embed_text("a person jumps").unwrap()] {
            let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
