//! Modality-agnostic transformer encoder: text ids or audio features to a
//! global embedding plus one sequential embedding per input element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::Modality;
use crate::numerics::nn::{sinusoidal_positions, Linear, Standardizer, TransformerStack};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::seeded;

pub const FULL_SCALE_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MateConfig {
    pub vocab_size: usize,
    pub audio_dims: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_text_len: usize,
    pub max_audio_len: usize,
}

impl Default for MateConfig {
    fn default() -> Self {
        MateConfig {
            vocab_size: 32,
            audio_dims: 17,
            width: 64,
            layers: 2,
            heads: 4,
            hidden: 128,
            max_text_len: 77,
            max_audio_len: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModalityInput {
    Text(Vec<usize>),
    /// `T × F` feature rows.
    Audio(Tensor),
}

impl ModalityInput {
    pub fn modality(&self) -> Modality {
        match self {
            ModalityInput::Text(_) => Modality::Text,
            ModalityInput::Audio(_) => Modality::Audio,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ModalityInput::Text(ids) => ids.len(),
            ModalityInput::Audio(f) => f.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Global embedding plus one row per input element.
#[derive(Clone, Debug, PartialEq)]
pub struct CondEmbedding {
    pub glob: Vec<f64>,
    pub seq: Tensor,
    pub modality: Modality,
}

impl CondEmbedding {
    /// All `1 + I` rows, global first.
    pub fn rows(&self) -> Tensor {
        let d = self.glob.len();
        let mut data = self.glob.clone();
        data.extend_from_slice(self.seq.data());
        Tensor::new(&[1 + self.seq.len() / d.max(1), d], data).expect("shape")
    }
}

fn slot(m: Modality) -> usize {
    match m {
        Modality::Text => 0,
        Modality::Audio => 1,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MateModel {
    pub config: MateConfig,
    pub store: ParamStore,
    pub audio_norm: Standardizer,
    text_embed: ParamId,
    audio_proj: Linear,
    /// Per-modality token added to every input element.
    modality_token: [ParamId; 2],
    /// Per-modality aggregation token prepended to the sequence.
    agg_token: [ParamId; 2],
    stack: TransformerStack,
    /// When false, positional encodings are left out (used to check the assembly rule).
    pub use_positions: bool,
}

impl MateModel {
    pub fn new(config: MateConfig, audio_norm: Standardizer, seed: u64) -> Result<Self> {
        if audio_norm.mean.len() != config.audio_dims {
            return Err(Error::Config(format!(
                "audio normalizer has {} columns for {} feature dims",
                audio_norm.mean.len(),
                config.audio_dims
            )));
        }
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let d = config.width;
        let text_embed = s.add("text_embed", Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng));
        let audio_proj = Linear::new(&mut s, "audio_proj", config.audio_dims, d, &mut rng);
        let modality_token = [
            s.add("modality_token.text", Tensor::randn(&[d], 0.1, &mut rng)),
            s.add("modality_token.audio", Tensor::randn(&[d], 0.1, &mut rng)),
        ];
        let agg_token = [
            s.add("agg_token.text", Tensor::randn(&[1, d], 0.1, &mut rng)),
            s.add("agg_token.audio", Tensor::randn(&[1, d], 0.1, &mut rng)),
        ];
        let stack = TransformerStack::new(&mut s, "encoder", config.layers, d, config.heads, config.hidden, &mut rng);
        Ok(MateModel {
            config,
            store: s,
            audio_norm,
            text_embed,
            audio_proj,
            modality_token,
            agg_token,
            stack,
            use_positions: true,
        })
    }

    fn max_len(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.config.max_text_len,
            Modality::Audio => self.config.max_audio_len,
        }
    }

    /// One `D` row per input element; `None` for an empty payload.
    pub fn embed_var(&self, g: &mut Graph, p: &Bound, inp: &ModalityInput) -> Result<Option<Var>> {
        if inp.is_empty() {
            return Ok(None);
        }
        let max = self.max_len(inp.modality());
        if inp.len() > max {
            return Err(Error::Length(format!(
                "{} condition elements exceed the limit of {max}",
                inp.len()
            )));
        }
        match inp {
            ModalityInput::Text(ids) => {
                if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
                    return Err(Error::Token(format!(
                        "word id {bad} outside vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                Ok(Some(g.gather_rows(p[self.text_embed], ids)?))
            }
            ModalityInput::Audio(f) => {
                if f.cols() != self.config.audio_dims {
                    return Err(Error::dim(format!(
                        "audio has {} dims, projection expects {}",
                        f.cols(),
                        self.config.audio_dims
                    )));
                }
                let x = g.constant(self.audio_norm.apply(f));
                Ok(Some(self.audio_proj.forward(g, p, x)?))
            }
        }
    }

    /// Row 0 is the aggregation token plus position 0; row `i + 1` is
    /// `raw[i] + modality token + position i + 1`.
    pub fn assemble_var(&self, g: &mut Graph, p: &Bound, raw: Option<Var>, modality: Modality) -> Result<Var> {
        let d = self.config.width;
        let k = slot(modality);
        let n = raw.map_or(0, |r| g.shape(r)[0]);
        let limit = self.config.max_text_len.max(self.config.max_audio_len);
        if n + 1 > limit + 1 {
            return Err(Error::Length(format!(
                "sequence of {} rows exceeds the positional table of {}",
                n + 1,
                limit + 1
            )));
        }
        let pos = if self.use_positions {
            sinusoidal_positions(n + 1, d)
        } else {
            Tensor::zeros(&[n + 1, d])
        };
        let agg_pos = g.constant(pos.slice_rows(0, 1));
        let head = g.add(p[self.agg_token[k]], agg_pos)?;
        let Some(raw) = raw else {
            return Ok(head);
        };
        let body = g.add_row(raw, p[self.modality_token[k]])?;
        let body_pos = g.constant(pos.slice_rows(1, n + 1));
        let body = g.add(body, body_pos)?;
        g.concat_rows(&[head, body])
    }

    /// Full `(1 + I) × D` encoder output; row 0 is the global embedding.
    pub fn encode_var(&self, g: &mut Graph, p: &Bound, inp: &ModalityInput) -> Result<Var> {
        let raw = self.embed_var(g, p, inp)?;
        let x = self.assemble_var(g, p, raw, inp.modality())?;
        self.stack.forward(g, p, x, None)
    }

    pub fn embed_modality(&self, inp: &ModalityInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        match self.embed_var(&mut g, &p, inp)? {
            Some(v) => Ok(g.value(v).clone()),
            None => Ok(Tensor::zeros(&[0, self.config.width])),
        }
    }

    pub fn assemble_sequence(&self, raw: &Tensor, modality: Modality) -> Result<Tensor> {
        if raw.rows() > 0 && raw.cols() != self.config.width {
            return Err(Error::dim(format!("raw rows have width {}, model {}", raw.cols(), self.config.width)));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let r = (raw.rows() > 0).then(|| g.constant(raw.clone()));
        let v = self.assemble_var(&mut g, &p, r, modality)?;
        Ok(g.value(v).clone())
    }

    pub fn encode(&self, inp: &ModalityInput) -> Result<CondEmbedding> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.encode_var(&mut g, &p, inp)?;
        Ok(split_rows(g.value(out), inp.modality()))
    }
}

pub fn split_rows(rows: &Tensor, modality: Modality) -> CondEmbedding {
    let d = rows.cols();
    CondEmbedding {
        glob: rows.row(0).to_vec(),
        seq: Tensor::new(&[rows.rows() - 1, d], rows.data()[d..].to_vec()).expect("shape"),
        modality,
    }
}
