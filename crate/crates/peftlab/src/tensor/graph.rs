//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients. The graph owns
//! copies of leaf values, so parameters bind by value and gradients flow back
//! to [`ParamSet`] entries through [`Graph::accumulate_param_grads`]. Graphs
//! are cheap and dropped after each step.

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Loss reduction over token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Cols {
        a: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        reduction: Reduction,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires: bool,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(usize, String)>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Shape check: `v` must be a 2-D node; returns (rows, cols).
    fn dims2(&self, v: Var, ctx: &str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "{ctx}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient of the last `backward` with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    /// Binds a parameter into the graph. Gradients flow back to the owning
    /// [`ParamSet`] through [`Graph::accumulate_param_grads`]; frozen or
    /// non-trainable parameters enter as constants.
    pub fn param(&mut self, p: &super::Parameter) -> Var {
        let requires = p.is_updatable();
        let v = self.push(
            p.tensor.data().to_vec(),
            p.tensor.shape().to_vec(),
            requires,
            Op::Leaf,
        );
        if requires {
            self.bindings.push((v.0, p.name.clone()));
        }
        v
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: lhs {:?} vs rhs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        let req = self.node(a).requires || self.node(b).requires;
        Ok(self.push(data, vec![m, n], req, Op::Matmul { a: a.0, b: b.0 }))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        ctx: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "{ctx}: shapes {:?} and {:?} differ",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).shape.clone();
        let req = self.node(a).requires || self.node(b).requires;
        Ok(self.push(data, shape, req, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x * c).collect();
        let shape = self.node(a).shape.clone();
        let req = self.node(a).requires;
        self.push(data, shape, req, Op::Scale { a: a.0, c })
    }

    /// Adds a length-n bias row to every row of an m x n matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_bias input")?;
        if self.node(bias).data.len() != n {
            return Err(Error::Shape(format!(
                "add_bias: bias numel {} does not match row width {n}",
                self.node(bias).data.len()
            )));
        }
        let mut data = self.node(a).data.clone();
        let bdata = &self.node(bias).data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bdata[j];
            }
        }
        let req = self.node(a).requires || self.node(bias).requires;
        Ok(self.push(
            data,
            vec![m, n],
            req,
            Op::AddBias {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let data = transpose_raw(&self.node(a).data, m, n);
        let req = self.node(a).requires;
        Ok(self.push(data, vec![n, m], req, Op::Transpose { a: a.0 }))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.node(a).data.len() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.node(a).shape,
                new_shape
            )));
        }
        let data = self.node(a).data.clone();
        let req = self.node(a).requires;
        Ok(self.push(data, new_shape.to_vec(), req, Op::Reshape { a: a.0 }))
    }

    /// Column slice `[.., start..start+len]` of a matrix.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "cols")?;
        if start + len > n {
            return Err(Error::Index(format!(
                "cols: range {start}..{} out of width {n}",
                start + len
            )));
        }
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.node(a).requires;
        Ok(self.push(data, vec![m, len], req, Op::Cols { a: a.0, start, len }))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols: empty part list".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({m} vs {mp})"
                )));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.node(p).data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let req = parts.iter().any(|&p| self.node(p).requires);
        Ok(self.push(
            data,
            vec![m, total],
            req,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.node(a).shape.clone();
        let req = self.node(a).requires;
        self.push(data, shape, req, Op::Gelu { a: a.0 })
    }

    /// Numerically stable softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        if self.node(a).data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax: NaN in input".into()));
        }
        let axis_size = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(a).data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |s: usize| o * axis_size * inner + s * inner + i;
                let max = (0..axis_size)
                    .map(|s| src[at(s)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in 0..axis_size {
                    let e = (src[at(s)] - max).exp();
                    data[at(s)] = e;
                    sum += e;
                }
                for s in 0..axis_size {
                    data[at(s)] /= sum;
                }
            }
        }
        let req = self.node(a).requires;
        Ok(self.push(data, shape, req, Op::Softmax { a: a.0, axis }))
    }

    /// Last-dimension layer norm with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on empty shape".into()))?;
        if self.node(gamma).data.len() != d || self.node(beta).data.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta must have numel {d}"
            )));
        }
        let xd = &self.node(x).data;
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut data = vec![0.0; xd.len()];
        for (row, out_row) in xd.chunks(d).zip(data.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let req = self.node(x).requires || self.node(gamma).requires || self.node(beta).requires;
        Ok(self.push(
            data,
            shape,
            req,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding table")?;
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding: id {id} out of vocabulary size {v}"
                )));
            }
        }
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.node(table).requires;
        Ok(self.push(
            data,
            vec![ids.len(), d],
            req,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.node(a).data.iter().sum();
        let req = self.node(a).requires;
        self.push(vec![s], vec![1], req, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.node(a).data.len() as f64;
        let s: f64 = self.node(a).data.iter().sum();
        let req = self.node(a).requires;
        self.push(vec![s / n], vec![1], req, Op::MeanAll { a: a.0 })
    }

    /// Token-level cross-entropy of `logits[t, :]` against `targets[t]`,
    /// computed via a stable log-softmax. Gradient at the logits is
    /// `(softmax - onehot)` scaled by `1/T` under mean reduction.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "cross_entropy: {t} logit rows but {} targets",
                targets.len()
            )));
        }
        if t == 0 {
            return Err(Error::Input("cross_entropy: empty target sequence".into()));
        }
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= v {
                return Err(Error::Index(format!(
                    "cross_entropy: target {tgt} at position {i} out of vocabulary size {v}"
                )));
            }
        }
        let src = &self.node(logits).data;
        let mut total = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total -= row[tgt] - lse;
        }
        if let Reduction::Mean = reduction {
            total /= t as f64;
        }
        let req = self.node(logits).requires;
        Ok(self.push(
            vec![total],
            vec![1],
            req,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                reduction,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Only
    /// nodes actually reachable from the loss get gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires {
                self.grads[i] = Some(grad);
                continue;
            }
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let nn = self.nodes[b].shape[1];
                    if self.nodes[a].requires {
                        let bt = transpose_raw(&self.nodes[b].data, k, nn);
                        let da = matmul_raw(&grad, &bt, m, nn, k);
                        self.accum(a, &da);
                    }
                    if self.nodes[b].requires {
                        let at = transpose_raw(&self.nodes[a].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, nn);
                        self.accum(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accum(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accum(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].requires {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[b].data)
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.nodes[b].requires {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accum(a, &da);
                }
                Op::AddBias { a, bias } => {
                    self.accum(a, &grad);
                    if self.nodes[bias].requires {
                        let nb = self.nodes[bias].data.len();
                        let mut db = vec![0.0; nb];
                        for (idx, g) in grad.iter().enumerate() {
                            db[idx % nb] += g;
                        }
                        self.accum(bias, &db);
                    }
                }
                Op::Transpose { a } => {
                    let (n0, n1) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let da = transpose_raw(&grad, n0, n1);
                    self.accum(a, &da);
                }
                Op::Reshape { a } => {
                    self.accum(a, &grad);
                }
                Op::Cols { a, start, len } => {
                    let (m, n_src) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let mut da = vec![0.0; m * n_src];
                    for r in 0..m {
                        for j in 0..len {
                            da[r * n_src + start + j] = grad[r * len + j];
                        }
                    }
                    self.accum(a, &da);
                }
                Op::ConcatCols { parts } => {
                    let m = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p].shape[1];
                        if self.nodes[p].requires {
                            let mut dp = vec![0.0; m * w];
                            for r in 0..m {
                                dp[r * w..(r + 1) * w].copy_from_slice(
                                    &grad[r * total + offset..r * total + offset + w],
                                );
                            }
                            self.accum(p, &dp);
                        }
                        offset += w;
                    }
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(g, &x)| {
                            let inner = GELU_C * (x + 0.044715 * x * x * x);
                            let th = inner.tanh();
                            let sech2 = 1.0 - th * th;
                            let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner)
                        })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Softmax { a, axis } => {
                    let shape = self.nodes[i].shape.clone();
                    let axis_size = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let out = &self.nodes[i].data;
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |s: usize| o * axis_size * inner + s * inner + ii;
                            let dot: f64 = (0..axis_size).map(|s| grad[at(s)] * out[at(s)]).sum();
                            for s in 0..axis_size {
                                da[at(s)] = out[at(s)] * (grad[at(s)] - dot);
                            }
                        }
                    }
                    self.accum(a, &da);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let d = *self.nodes[x].shape.last().unwrap();
                    let xd = self.nodes[x].data.clone();
                    let g = self.nodes[gamma].data.clone();
                    let rows = xd.len() / d;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * g[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if self.nodes[x].requires {
                        self.accum(x, &dx);
                    }
                    if self.nodes[gamma].requires {
                        self.accum(gamma, &dgamma);
                    }
                    if self.nodes[beta].requires {
                        self.accum(beta, &dbeta);
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad[row * d + j];
                        }
                    }
                    self.accum(table, &dt);
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.nodes[a].data.len()];
                    self.accum(a, &da);
                }
                Op::MeanAll { a } => {
                    let n_el = self.nodes[a].data.len();
                    let da = vec![grad[0] / n_el as f64; n_el];
                    self.accum(a, &da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    reduction,
                } => {
                    let (t, v) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                    let src = &self.nodes[logits].data;
                    let scale = match reduction {
                        Reduction::Mean => grad[0] / t as f64,
                        Reduction::Sum => grad[0],
                    };
                    let mut dl = vec![0.0; t * v];
                    for (row, &tgt) in targets.iter().enumerate() {
                        let r = &src[row * v..(row + 1) * v];
                        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = r.iter().map(|&x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..v {
                            let softmax = exps[j] / sum;
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            dl[row * v + j] = scale * (softmax - onehot);
                        }
                    }
                    self.accum(logits, &dl);
                }
            }
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn accum(&mut self, idx: usize, contribution: &[f64]) {
        if !self.nodes[idx].requires {
            return;
        }
        match &mut self.grads[idx] {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => self.grads[idx] = Some(contribution.to_vec()),
        }
    }

    /// Adds the gradients of every bound parameter into its `ParamSet`
    /// entry. Accumulates across calls; the optimizer clears them.
    /// Bindings whose names are absent from `params` are skipped, so a
    /// graph can span several parameter sets.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) -> Result<()> {
        for (idx, name) in &self.bindings {
            if !params.contains(name) {
                continue;
            }
            if let Some(g) = self.grads.get(*idx).and_then(|g| g.as_ref()) {
                params.get_mut(name)?.tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }
}
