//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably while the forward pass is
//! recorded. [`Graph::backward`] consumes the graph and returns the parameter
//! [`Gradients`], which the caller folds into the store with
//! [`ParamStore::accumulate`]. Operations are coarse (matmul, layer norm,
//! fused multi-head attention, fused losses) so the tape stays short even for
//! a full encoder-decoder step.

use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, log_softmax_into};
use super::loss::{class_nll_forward, smoothed_nll_backward, smoothed_nll_forward, SmoothedNll};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which (query, key) pairs may attend, laid out `[batch, q_len, k_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from per-key validity (`[batch, k_len]`), optionally
    /// forbidding keys after the query position.
    pub fn new(batch: usize, q_len: usize, k_len: usize, key_valid: &[bool], causal: bool) -> Result<Self> {
        if key_valid.len() != batch * k_len {
            return Err(Error::Shape(format!(
                "key mask has {} entries, expected {batch}x{k_len}",
                key_valid.len()
            )));
        }
        let mut allowed = Vec::with_capacity(batch * q_len * k_len);
        for b in 0..batch {
            for i in 0..q_len {
                for j in 0..k_len {
                    allowed.push(key_valid[b * k_len + j] && (!causal || j <= i));
                }
            }
        }
        Ok(Self {
            batch,
            q_len,
            k_len,
            allowed,
        })
    }

    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.q_len + i) * self.k_len + j]
    }
}

/// Receives the gradient contribution for one input slot.
type GradSink<'a> = dyn FnMut(usize, &mut dyn FnMut(&mut [f64])) + 'a;

#[derive(Debug)]
struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    dim: usize,
    mask: AttentionMask,
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Softmax(usize),
    Attention(Box<AttentionSaved>),
    SmoothedNll {
        logits: usize,
        targets: Vec<u32>,
        epsilon: f64,
        ignore_index: u32,
        fwd: SmoothedNll,
    },
    ClassNll {
        logits: usize,
        labels: Vec<usize>,
        log_probs: Vec<f64>,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations over borrowed parameters.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    let n: usize = shape.iter().product();
    n / last_dim(shape).max(1)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[usize]) -> Var {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(values),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &[f64] {
        match &self.nodes[i].value {
            Value::Owned(v) => v,
            Value::Param(id) => self.params.get(*id).values(),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.val(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph nodes keep shape and value consistent")
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            shape: t.shape().to_vec(),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: Value::Owned(t.into_values()),
            shape,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.val(a.0).iter().zip(self.val(b.0)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.val(a.0).iter().zip(self.val(b.0)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.val(a.0).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a.0, factor), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.val(a.0).iter().sum();
        self.push(vec![total], Vec::new(), Op::Sum(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.val(a.0).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.val(a.0).to_vec();
        Ok(self.push(out, shape, Op::Reshape(a.0), &[a.0]))
    }

    /// `x · w` where `x` is `[.., k]` and `w` is `[k, n]`; leading axes of
    /// `x` are flattened into rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_impl(x, w, false)
    }

    /// `x · wᵀ` where `w` is stored `[n, k]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_impl(x, w, true)
    }

    fn matmul_impl(&mut self, x: Var, w: Var, b_t: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() {
            return Err(Error::Shape(format!("matmul of {xs:?} by {ws:?}")));
        }
        let k = last_dim(&xs);
        let (wk, n) = if b_t { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if wk != k {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {xs:?} by {ws:?}{}",
                if b_t { " (transposed)" } else { "" }
            )));
        }
        let m = rows_of(&xs);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(x.0), false, self.val(w.0), b_t, &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a: x.0,
                b: w.0,
                b_t,
                m,
                k,
                n,
            },
            &[x.0, w.0],
        ))
    }

    /// Adds a `[n]` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.val(bias.0);
        let out = self
            .val(x.0)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.val(x.0).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Gelu(x.0), &[x.0])
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layer norm affine {:?}/{:?} for input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let src = self.val(x.0);
        let g = self.val(gamma.0);
        let b = self.val(beta.0);
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Row lookup in a `[rows, dim]` table; output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embedding table of shape {ts:?}")));
        }
        let (rows, dim) = (ts[0], ts[1]);
        let src = self.val(table.0);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::InvalidArgument(format!(
                    "id {id} outside an embedding table of {rows} rows"
                )));
            }
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.val(x.0).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.val(x.0).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// Selects rows of a `[.., n]` input; output `[rows.len(), n]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = last_dim(self.shape(x));
        let total = rows_of(self.shape(x));
        let src = self.val(x.0);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= total {
                return Err(Error::InvalidArgument(format!(
                    "row {r} outside an input of {total} rows"
                )));
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            out,
            vec![rows.len(), n],
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        let src = self.val(x.0);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; src.len()];
        for (o, row) in out.chunks_mut(n).zip(src.chunks(n)) {
            log_softmax_into(row, o);
            o.iter_mut().for_each(|v| *v = v.exp());
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Softmax(x.0), &[x.0]))
    }

    /// Fused scaled dot-product multi-head attention.
    ///
    /// `q` is `[batch·q_len, dim]`, `k` and `v` are `[batch·k_len, dim]`
    /// (any leading layout with those row counts). Queries with no allowed
    /// key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let dim = last_dim(self.shape(q));
        let (bsz, tq, tk) = (mask.batch, mask.q_len, mask.k_len);
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Shape(format!("{dim} features across {heads} heads")));
        }
        if rows_of(self.shape(q)) != bsz * tq
            || rows_of(self.shape(k)) != bsz * tk
            || rows_of(self.shape(v)) != bsz * tk
            || last_dim(self.shape(k)) != dim
            || last_dim(self.shape(v)) != dim
        {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?} against mask {bsz}x{tq}x{tk}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let mut out = vec![0.0; bsz * tq * dim];
        let mut probs = vec![0.0; bsz * heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for b in 0..bsz {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qv[(b * tq + i) * dim + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if mask.allowed(b, i, j) {
                            let krow = &kv[(b * tk + j) * dim + off..][..dh];
                            let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let mut total = 0.0;
                    for j in 0..tk {
                        if mask.allowed(b, i, j) {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * dim + off..][..dh];
                    for j in 0..tk {
                        if mask.allowed(b, i, j) {
                            p[j] /= total;
                            let vrow = &vv[(b * tk + j) * dim + off..][..dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::Attention(Box::new(AttentionSaved {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                dim,
                mask: mask.clone(),
                probs,
            })),
            &[q.0, k.0, v.0],
        ))
    }

    /// Label-smoothed token NLL over `[.., V]` logits, mean over positions
    /// whose target differs from `ignore_index`.
    pub fn label_smoothed_nll(&mut self, logits: Var, targets: &[u32], epsilon: f64, ignore_index: u32) -> Result<Var> {
        let vocab = last_dim(self.shape(logits));
        let fwd = smoothed_nll_forward(self.val(logits.0), vocab, targets, epsilon, ignore_index)?;
        Ok(self.push(
            vec![fwd.loss],
            Vec::new(),
            Op::SmoothedNll {
                logits: logits.0,
                targets: targets.to_vec(),
                epsilon,
                ignore_index,
                fwd,
            },
            &[logits.0],
        ))
    }

    /// Mean classification NLL over `[B, C]` logits.
    pub fn classification_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let classes = last_dim(self.shape(logits));
        let (loss, log_probs) = class_nll_forward(self.val(logits.0), classes, labels)?;
        Ok(self.push(
            vec![loss],
            Vec::new(),
            Op::ClassNll {
                logits: logits.0,
                labels: labels.to_vec(),
                log_probs,
            },
            &[logits.0],
        ))
    }

    /// Gradients of a scalar `loss` with respect to every parameter it reaches.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`Graph::backward`] but seeds the output gradient with `scale`,
    /// i.e. differentiates `scale · loss`.
    pub fn backward_scaled(self, loss: Var, scale: f64) -> Result<Gradients> {
        if self.val(loss.0).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients::with_capacity(self.params.len());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![scale]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backprop_node(idx, &g, &mut grads, &mut out);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let nodes = &self.nodes;
        // Lazily allocates the gradient slot of input `i` and hands it to `f`.
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[i].needs_grad {
                return;
            }
            let len = match &nodes[i].value {
                Value::Owned(v) => v.len(),
                Value::Param(id) => self.params.get(*id).numel(),
            };
            let slot = grads[i].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g),
            Op::Add(a, b) => {
                for i in [*a, *b] {
                    acc(i, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f)),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::MatMul { a, b, b_t, m, k, n } => {
                let (m, k, n, b_t) = (*m, *k, *n, *b_t);
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, !b_t, s, true));
                acc(*b, &mut |s| {
                    if b_t {
                        gemm(n, m, k, g, true, av, false, s, true);
                    } else {
                        gemm(k, m, n, av, true, g, false, s, true);
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*bias, &mut |s| {
                    let n = s.len();
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.val(*x);
                acc(*x, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        *s += g * gelu_grad(*x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.val(*gamma);
                let n = gv.len();
                acc(*gamma, &mut |s| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(n) {
                        s.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                });
                acc(*x, &mut |s| {
                    for (r, ((sr, gr), hr)) in s.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            sr[c] += rstd[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                acc(*table, &mut |s| {
                    let dim = g.len() / ids.len().max(1);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut s[id as usize * dim..(id as usize + 1) * dim];
                        dst.iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |s| {
                    for ((s, g), m) in s.iter_mut().zip(g).zip(mask) {
                        *s += g * m;
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                acc(*x, &mut |s| {
                    let n = g.len() / rows.len().max(1);
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut s[r * n..(r + 1) * n];
                        dst.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.val(idx);
                let n = last_dim(&nodes[idx].shape);
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for c in 0..n {
                            sr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, &mut acc),
            Op::SmoothedNll {
                logits,
                targets,
                epsilon,
                ignore_index,
                fwd,
            } => {
                let vocab = last_dim(&nodes[*logits].shape);
                acc(*logits, &mut |s| {
                    smoothed_nll_backward(fwd, vocab, targets, *epsilon, *ignore_index, g[0], s)
                });
            }
            Op::ClassNll {
                logits,
                labels,
                log_probs,
            } => {
                let classes = last_dim(&nodes[*logits].shape);
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |s| {
                    for (b, &label) in labels.iter().enumerate() {
                        let row = b * classes..(b + 1) * classes;
                        for (c, (s, lp)) in s[row.clone()].iter_mut().zip(&log_probs[row]).enumerate() {
                            let hit = if c == label { 1.0 } else { 0.0 };
                            *s += scale * (lp.exp() - hit);
                        }
                    }
                });
            }
        }
    }

    fn backprop_attention(&self, saved: &AttentionSaved, g: &[f64], acc: &mut GradSink) {
        let AttentionSaved {
            q,
            k,
            v,
            heads,
            dim,
            mask,
            probs,
        } = saved;
        let (heads, dim) = (*heads, *dim);
        let (bsz, tq, tk) = (mask.batch, mask.q_len, mask.k_len);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..bsz {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let grow = &g[(b * tq + i) * dim + off..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..tk {
                        if !mask.allowed(b, i, j) {
                            continue;
                        }
                        let vbase = (b * tk + j) * dim + off;
                        let vrow = &vv[vbase..vbase + dh];
                        dp[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        weighted += p[j] * dp[j];
                        for (d, x) in dv[vbase..vbase + dh].iter_mut().zip(grow) {
                            *d += p[j] * x;
                        }
                    }
                    let qbase = (b * tq + i) * dim + off;
                    for j in 0..tk {
                        if !mask.allowed(b, i, j) {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kbase = (b * tk + j) * dim + off;
                        for c in 0..dh {
                            dq[qbase + c] += ds * kv[kbase + c];
                            dk[kbase + c] += ds * qv[qbase + c];
                        }
                    }
                }
            }
        }
        for (i, d) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
            acc(i, &mut |s| s.iter_mut().zip(d.iter()).for_each(|(s, d)| *s += d));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert(name, Tensor::from_vec(values)).unwrap();
        (store, id)
    }

    #[test]
    fn sum_gives_ones() {
        let (mut store, id) = store_with("w", vec![0.5, -2.0, 3.0]);
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let loss = g.sum(w);
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_twice_w_and_accumulates() {
        let (mut store, id) = store_with("w", vec![0.5, -2.0, 3.0]);
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param(id);
                let sq = g.mul(w, w).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap()
            };
            store.accumulate(&grads).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, -8.0, 12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, id) = store_with("w", vec![1.0, 2.0]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let y = g.scale(w, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn scaled_backward_is_exactly_scaled() {
        let (store, id) = store_with("w", vec![0.3, -1.7, 2.2]);
        let run = |s: f64| {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let sm = g.softmax(w).unwrap();
            let sq = g.mul(sm, w).unwrap();
            let loss = g.sum(sq);
            g.backward_scaled(loss, s).unwrap().get(id).unwrap().to_vec()
        };
        let full = run(1.0);
        let half = run(0.5);
        for (f, h) in full.iter().zip(&half) {
            assert_eq!(f * 0.5, *h);
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let (mut store, id) = store_with("w", vec![1.0, 2.0]);
        store.get_mut(id).set_requires_grad(false);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(id).is_none());
    }

    #[test]
    fn attention_with_no_allowed_keys_is_zero() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new([2, 4], vec![0.1; 8]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let mask = AttentionMask::new(1, 2, 2, &[false, false], false).unwrap();
        let y = g.attention(x, x, x, 2, &mask).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }
}
