//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is the computation record for one forward pass: every op
//! appends a node holding its output value and enough cached state to
//! replay its vector-Jacobian product. Nodes are appended in execution
//! order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use super::gemm::{gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    StraightThrough(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | Mse(a, b) => {
                vec![*a, *b]
            }
            Affine(x, _) | Relu(x) | Gelu(x) | Tanh(x) | Transpose(x) | Sum(x) | Mean(x)
            | MeanRows(x) | StraightThrough(x) => vec![*x],
            Softmax { x, .. }
            | Upsample { x, .. }
            | SliceRows { x, .. }
            | SliceCols { x, .. }
            | MaxPoolRows { x, .. }
            | L2NormalizeRows { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv1d { x, kernel, .. } => vec![*x, *kernel],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record of a forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn expect_2d(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copy of `v` that blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_2d(self.value(a), "matmul")?;
        let (k2, n) = expect_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rows(self.value(a).data(), k),
            View::rows(self.value(b).data(), n),
            0.0,
            ViewMut::rows(&mut out, n),
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds the vector `row` (length = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::dim(format!(
                "add_row: row of {} values for {} columns",
                self.value(row).len(),
                c
            )));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape.get(axis).copied().unwrap_or(1);
        if len == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            "softmax",
        )
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(Error::dim("layer_norm over an empty axis"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(format!(
                "layer_norm: gain/bias must have {d} values"
            )));
        }
        let rows = self.value(x).rows();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Temporal convolution (cross-correlation, zero padding).
    ///
    /// `x` is `T×Cin`, `kernel` is `W×Cin×Cout`; output length is
    /// `(T + 2·pad − W) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (t, cin) = expect_2d(self.value(x), "conv1d")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != cin {
            return Err(Error::dim(format!(
                "conv1d kernel {ks:?} incompatible with input channels {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d stride must be positive"));
        }
        let (w, cout) = (ks[0], ks[2]);
        if t + 2 * pad < w {
            return Err(Error::dim(format!(
                "conv1d: window {w} longer than padded input {}",
                t + 2 * pad
            )));
        }
        let t_out = (t + 2 * pad - w) / stride + 1;
        let mut out = vec![0.0; t_out * cout];
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        for tap in 0..w {
            let Some((o0, s0, count)) = conv_tap_range(t, t_out, stride, pad, tap) else {
                continue;
            };
            gemm(
                count,
                cin,
                cout,
                1.0,
                View {
                    data: xd,
                    offset: s0 * cin,
                    rs: stride * cin,
                    cs: 1,
                },
                View::rows(kd, cout).at(tap * cin * cout),
                1.0,
                ViewMut::rows(&mut out, cout).at(o0 * cout),
            );
        }
        let value = Tensor::new(&[t_out, cout], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
            },
            "conv1d",
        )
    }

    /// Nearest-neighbour upsampling along rows: each row repeated `factor` times.
    pub fn upsample_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (t, c) = expect_2d(self.value(x), "upsample_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(t * factor * c);
        for r in 0..t {
            for _ in 0..factor {
                out.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(&[t * factor, c], out)?;
        self.push(value, Op::Upsample { x, factor }, "upsample_rows")
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Sq×D`, `k` and `v` are `Sk×D`. `visible`, when given, is a
    /// row-major `Sq×Sk` matrix; hidden entries get zero probability.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        visible: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, d) = expect_2d(self.value(q), "attention")?;
        let (sk, dk) = expect_2d(self.value(k), "attention")?;
        if self.shape(v) != [sk, d] || dk != d {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = visible {
            if m.len() != sq * sk {
                return Err(Error::dim("attention mask has the wrong size"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * sq * sk];
        let mut out = vec![0.0; sq * d];
        for h in 0..heads {
            let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
            gemm(
                sq,
                dh,
                sk,
                scale,
                View::rows(qd, d).at(h * dh),
                View::transposed(kd, d).at(h * dh),
                0.0,
                ViewMut::rows(p, sk),
            );
            for i in 0..sq {
                let row = &mut p[i * sk..(i + 1) * sk];
                let vis = |j: usize| visible.is_none_or(|m| m[i * sk + j]);
                let max = (0..sk)
                    .filter(|&j| vis(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    if vis(j) {
                        *s = (*s - max).exp();
                        total += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                if total > 0.0 {
                    row.iter_mut().for_each(|s| *s /= total);
                }
            }
            gemm(
                sq,
                sk,
                dh,
                1.0,
                View::rows(p, sk),
                View::rows(vd, d).at(h * dh),
                0.0,
                ViewMut::rows(&mut out, d).at(h * dh),
            );
        }
        let value = Tensor::new(&[sq, d], out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = expect_2d(self.value(table), "gather_rows")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::dim(format!("row id {id} outside table of {n} rows")));
            }
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let value = Tensor::new(&[ids.len(), c], out)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::dim("concat_rows of nothing"));
        };
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Error::dim(format!(
                    "concat_rows: shape {:?} does not have {c} columns",
                    t.shape()
                )));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, c], out)?;
        self.push(value, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, _) = expect_2d(self.value(x), "slice_rows")?;
        if start > end || end > r {
            return Err(Error::dim(format!("row slice {start}..{end} of {r} rows")));
        }
        let value = self.value(x).slice_rows(start, end);
        self.push(value, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = expect_2d(self.value(x), "slice_cols")?;
        if start > end || end > c {
            return Err(Error::dim(format!("column slice {start}..{end} of {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let value = Tensor::new(&[r, end - start], out)?;
        self.push(value, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        expect_2d(self.value(x), "transpose")?;
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.is_empty() {
            return Err(Error::dim("mse of empty tensors"));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let m = s / ta.len() as f64;
        self.push(Tensor::scalar(m), Op::Mse(a, b), "mse")
    }

    /// Mean token-level cross-entropy of `logits` (S×V) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (s, v) = expect_2d(self.value(logits), "cross_entropy")?;
        if targets.len() != s || s == 0 {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {s} rows",
                targets.len()
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; s * v];
        let mut loss = 0.0;
        for i in 0..s {
            let t = targets[i];
            if t >= v {
                return Err(Error::dim(format!("target {t} outside {v} classes")));
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            loss += lse - row[t];
        }
        loss /= s as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Element-wise max over rows: `T×D → 1×D`. Ties go to the earliest row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (t, c) = expect_2d(self.value(x), "max_pool_rows")?;
        if t == 0 {
            return Err(Error::dim("max_pool_rows of zero rows"));
        }
        let src = self.value(x).data();
        let mut argmax = vec![0; c];
        let mut out = src[..c].to_vec();
        for r in 1..t {
            for j in 0..c {
                if src[r * c + j] > out[j] {
                    out[j] = src[r * c + j];
                    argmax[j] = r;
                }
            }
        }
        let value = Tensor::new(&[1, c], out)?;
        self.push(value, Op::MaxPoolRows { x, argmax }, "max_pool_rows")
    }

    /// Mean over rows: `T×D → 1×D`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, c) = expect_2d(self.value(x), "mean_rows")?;
        if t == 0 {
            return Err(Error::dim("mean_rows of zero rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for r in 0..t {
            for j in 0..c {
                out[j] += src[r * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        let value = Tensor::new(&[1, c], out)?;
        self.push(value, Op::MeanRows(x), "mean_rows")
    }

    /// Straight-through estimator: forward value of `hard`, gradient passed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Var) -> Result<Var> {
        self.same_shape(soft, hard, "straight_through")?;
        let value = self.value(hard).clone();
        self.push(value, Op::StraightThrough(soft), "straight_through")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = expect_2d(self.value(x), "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        self.push(value, Op::L2NormalizeRows { x, norms }, "l2_normalize_rows")
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate across fan-out. Leaves that do not reach the
    /// loss report zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulation buffer for input `v`, created as zeros on first use.
        macro_rules! buf {
            ($v:expr) => {{
                let idx = $v.0;
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(self.nodes[idx].value.shape()));
                }
                grads[idx].as_mut().unwrap().data_mut()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let nn = val(*b).cols();
                if wants(*a) {
                    let bd = val(*b).data();
                    gemm(
                        m,
                        nn,
                        k,
                        1.0,
                        View::rows(gd, nn),
                        View::transposed(bd, nn),
                        1.0,
                        ViewMut::rows(buf!(a), k),
                    );
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    gemm(
                        k,
                        m,
                        nn,
                        1.0,
                        View::transposed(ad, k),
                        View::rows(gd, nn),
                        1.0,
                        ViewMut::rows(buf!(b), nn),
                    );
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        buf!(v).iter_mut().zip(gd).for_each(|(o, g)| *o += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        buf!(v).iter_mut().zip(gd).for_each(|(o, g)| *o += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = val(*b).data().to_vec();
                    for ((o, g), y) in buf!(a).iter_mut().zip(gd).zip(&bd) {
                        *o += g * y;
                    }
                }
                if wants(*b) {
                    let ad = val(*a).data().to_vec();
                    for ((o, g), x) in buf!(b).iter_mut().zip(gd).zip(&ad) {
                        *o += g * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    buf!(x).iter_mut().zip(gd).for_each(|(o, g)| *o += g);
                }
                if wants(*row) {
                    let c = val(*x).cols();
                    let b = buf!(row);
                    for chunk in gd.chunks(c) {
                        for (o, g) in b.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                }
            }
            Op::Affine(x, s) => {
                buf!(x).iter_mut().zip(gd).for_each(|(o, g)| *o += s * g);
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                for ((o, g), v) in buf!(x).iter_mut().zip(gd).zip(xd) {
                    if *v > 0.0 {
                        *o += g;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                for ((o, g), v) in buf!(x).iter_mut().zip(gd).zip(xd) {
                    *o += g * gelu_parts(*v).1;
                }
            }
            Op::Tanh(x) => {
                let yd = node.value.data();
                for ((o, g), y) in buf!(x).iter_mut().zip(gd).zip(yd) {
                    *o += g * (1.0 - y * y);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let yd = node.value.data();
                let b = buf!(x);
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..*len).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..*len {
                            b[idx(j)] += yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*x).cols();
                let rows = val(*x).rows();
                if wants(*gain) {
                    let b = buf!(gain);
                    for r in 0..rows {
                        for j in 0..d {
                            b[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let b = buf!(bias);
                    for r in 0..rows {
                        for j in 0..d {
                            b[j] += gd[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gn = val(*gain).data().to_vec();
                    let b = buf!(x);
                    let df = d as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gn[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[r * d + j] * gn[j];
                            b[r * d + j] +=
                                inv_std[r] / df * (df * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (t, cin) = (val(*x).rows(), val(*x).cols());
                let ks = val(*kernel).shape();
                let (w, cout) = (ks[0], ks[2]);
                let t_out = node.value.rows();
                if wants(*x) {
                    let kd = val(*kernel).data();
                    let b = buf!(x);
                    for tap in 0..w {
                        let Some((o0, s0, count)) = conv_tap_range(t, t_out, *stride, *pad, tap)
                        else {
                            continue;
                        };
                        gemm(
                            count,
                            cout,
                            cin,
                            1.0,
                            View::rows(gd, cout).at(o0 * cout),
                            View::transposed(kd, cout).at(tap * cin * cout),
                            1.0,
                            ViewMut {
                                data: b,
                                offset: s0 * cin,
                                rs: stride * cin,
                                cs: 1,
                            },
                        );
                    }
                }
                if wants(*kernel) {
                    let xd = val(*x).data();
                    let b = buf!(kernel);
                    for tap in 0..w {
                        let Some((o0, s0, count)) = conv_tap_range(t, t_out, *stride, *pad, tap)
                        else {
                            continue;
                        };
                        gemm(
                            cin,
                            count,
                            cout,
                            1.0,
                            View {
                                data: xd,
                                offset: s0 * cin,
                                rs: 1,
                                cs: stride * cin,
                            },
                            View::rows(gd, cout).at(o0 * cout),
                            1.0,
                            ViewMut::rows(b, cout).at(tap * cin * cout),
                        );
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let c = val(*x).cols();
                let b = buf!(x);
                for (r, chunk) in gd.chunks(c).enumerate() {
                    let src = r / factor;
                    for (o, g) in b[src * c..(src + 1) * c].iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gd, grads);
            }
            Op::Gather { table, ids } => {
                let c = val(*table).cols();
                let b = buf!(table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        b[id * c + j] += gd[r * c + j];
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = val(x).len();
                    if wants(x) {
                        buf!(x)
                            .iter_mut()
                            .zip(&gd[off..off + n])
                            .for_each(|(o, g)| *o += g);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                let b = buf!(x);
                b[start * c..start * c + gd.len()]
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(o, g)| *o += g);
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                let b = buf!(x);
                for (r, chunk) in gd.chunks(w.max(1)).enumerate() {
                    for (j, g) in chunk.iter().enumerate() {
                        b[r * c + start + j] += g;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let b = buf!(x);
                for i in 0..r {
                    for j in 0..c {
                        b[i * c + j] += gd[j * r + i];
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                buf!(x).iter_mut().for_each(|o| *o += g0);
            }
            Op::Mean(x) => {
                let g0 = gd[0] / val(*x).len() as f64;
                buf!(x).iter_mut().for_each(|o| *o += g0);
            }
            Op::Mse(a, b) => {
                let n = val(*a).len() as f64;
                let diff: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) / n * gd[0])
                    .collect();
                if wants(*a) {
                    buf!(a).iter_mut().zip(&diff).for_each(|(o, d)| *o += d);
                }
                if wants(*b) {
                    buf!(b).iter_mut().zip(&diff).for_each(|(o, d)| *o -= d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = val(*logits).cols();
                let s = targets.len() as f64;
                let b = buf!(logits);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let p = probs[i * v + j] - if j == t { 1.0 } else { 0.0 };
                        b[i * v + j] += gd[0] * p / s;
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let c = val(*x).cols();
                let b = buf!(x);
                for (j, &r) in argmax.iter().enumerate() {
                    b[r * c + j] += gd[j];
                }
            }
            Op::MeanRows(x) => {
                let (t, c) = (val(*x).rows(), val(*x).cols());
                let b = buf!(x);
                for r in 0..t {
                    for j in 0..c {
                        b[r * c + j] += gd[j] / t as f64;
                    }
                }
            }
            Op::StraightThrough(soft) => {
                buf!(soft).iter_mut().zip(gd).for_each(|(o, g)| *o += g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = val(*x).cols();
                let yd = node.value.data();
                let b = buf!(x);
                for (i, n) in norms.iter().enumerate() {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = gd[row.clone()].iter().zip(&yd[row.clone()]).map(|(g, y)| g * y).sum();
                    for j in row {
                        b[j] += (gd[j] - yd[j] * dot) / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (sq, d) = (self.value(q).rows(), self.value(q).cols());
        let sk = self.value(k).rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; sq * d];
        let mut dk = vec![0.0; sk * d];
        let mut dv = vec![0.0; sk * d];
        let mut ds = vec![0.0; sq * sk];
        for h in 0..heads {
            let p = &probs[h * sq * sk..(h + 1) * sq * sk];
            // dV_h = Pᵀ · dO_h
            gemm(
                sk,
                sq,
                dh,
                1.0,
                View::transposed(p, sk),
                View::rows(gd, d).at(h * dh),
                0.0,
                ViewMut::rows(&mut dv, d).at(h * dh),
            );
            // dP = dO_h · V_hᵀ
            gemm(
                sq,
                dh,
                sk,
                1.0,
                View::rows(gd, d).at(h * dh),
                View::transposed(vd, d).at(h * dh),
                0.0,
                ViewMut::rows(&mut ds, sk),
            );
            for i in 0..sq {
                let row = i * sk..(i + 1) * sk;
                let dot: f64 = ds[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                for j in row {
                    ds[j] = p[j] * (ds[j] - dot);
                }
            }
            gemm(
                sq,
                sk,
                dh,
                scale,
                View::rows(&ds, sk),
                View::rows(kd, d).at(h * dh),
                0.0,
                ViewMut::rows(&mut dq, d).at(h * dh),
            );
            gemm(
                sk,
                sq,
                dh,
                scale,
                View::transposed(&ds, sk),
                View::rows(qd, d).at(h * dh),
                0.0,
                ViewMut::rows(&mut dk, d).at(h * dh),
            );
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(o, x)| *o += x),
                slot @ None => {
                    *slot = Some(Tensor::new(self.value(var).shape(), g).expect("shape"))
                }
            }
        }
    }
}

/// For a conv tap, the first output row, first source row and number of
/// output rows whose source row `o*stride + tap - pad` lies inside `0..t`.
fn conv_tap_range(
    t: usize,
    t_out: usize,
    stride: usize,
    pad: usize,
    tap: usize,
) -> Option<(usize, usize, usize)> {
    // smallest o with o*stride + tap >= pad
    let o0 = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    if o0 >= t_out {
        return None;
    }
    let s0 = o0 * stride + tap - pad;
    if s0 >= t {
        return None;
    }
    let max_by_src = (t - 1 - s0) / stride + 1;
    let count = max_by_src.min(t_out - o0);
    Some((o0, s0, count))
}
