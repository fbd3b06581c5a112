//! Layer building blocks shared by every model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fixed sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let k = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * k / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n, d], data).expect("shape")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[inp, out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_row(y, p[self.bias])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], LAYER_NORM_EPS)
    }
}

/// Temporal convolution with bias; `pad = width / 2` keeps "same" length at stride 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        width: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / (cin * width) as f64).sqrt();
        Conv1d {
            kernel: store.add(
                format!("{name}.kernel"),
                Tensor::randn(&[width, cin, cout], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: width / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p[self.kernel], self.stride, self.pad)?;
        g.add_row(y, p[self.bias])
    }
}

/// Pre-norm transformer encoder layer: self-attention then a GELU MLP, both residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    pub width: usize,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff1: Linear::new(store, &format!("{name}.ff1"), width, hidden, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, width, rng),
            width,
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, visible: Option<&[bool]>) -> Result<Var> {
        let d = self.width;
        let h = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, 2 * d)?;
        let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        let a = g.attention(q, k, v, self.heads, visible)?;
        let a = self.out.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let f = self.ff1.forward(g, p, h)?;
        let f = g.gelu(f)?;
        let f = self.ff2.forward(g, p, f)?;
        g.add(x, f)
    }
}

/// Stack of [`TransformerLayer`]s with a final layer norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerStack {
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        TransformerStack {
            layers: (0..layers)
                .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), width, heads, hidden, rng))
                .collect(),
            final_ln: LayerNorm::new(store, &format!("{name}.ln_final"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var, visible: Option<&[bool]>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x, visible)?;
        }
        self.final_ln.forward(g, p, x)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Per-column affine standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the rows of every `T×C` matrix; columns with tiny spread get std 1.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for m in mats {
            let c = m.cols();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for r in 0..m.rows() {
                for (j, v) in m.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.rows();
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(cols: usize) -> Self {
        Standardizer {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        out
    }
}
