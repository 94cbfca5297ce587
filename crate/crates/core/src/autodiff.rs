//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one node per primitive application. Nodes are appended
//! in evaluation order, so every node's inputs precede it and the backward
//! sweep is a single reverse pass over the node list.

use std::collections::BTreeSet;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name, in registration order.
pub type Gradients = IndexMap<String, Tensor>;

/// Which named parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub enum GradScope {
    #[default]
    All,
    /// No parameter is trainable; backward still reports zeros for each.
    Frozen,
    Only(BTreeSet<String>),
}

impl GradScope {
    fn includes(&self, name: &str) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Frozen => false,
            GradScope::Only(names) => names.contains(name),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Tanh(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    AttnScores {
        q: Var,
        k: Var,
        scale: f64,
        causal: Option<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    scope: GradScope,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scope(scope: GradScope) -> Self {
        Tape {
            scope,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter leaf. Registering the same name again
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let requires_grad = self.scope.includes(name);
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if self.shape_of(a).len() != 2 || self.shape_of(b).len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if self.shape_of(a).len() != 2 || self.shape_of(b).len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}^T", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.value(a).data(), false, self.value(b).data(), true, m, k, n, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    /// Elementwise sum of equal shapes, or a matrix plus a row vector
    /// broadcast over its rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let out = self.value(a).with_data(data);
            return Ok(self.push(out, Op::Add(a, b), &[a, b]));
        }
        if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            let mut data = self.value(a).data().to_vec();
            kernels::add_row_bias(&mut data, self.value(b).data());
            let out = self.value(a).with_data(data);
            return Ok(self.push(out, Op::AddRow(a, b), &[a, b]));
        }
        Err(Error::shape("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = self.value(a).with_data(data);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = self.value(a).with_data(data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.with_data(kernels::softmax_rows(x.data(), x.cols()));
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape_of(gamma) != [d] || self.shape_of(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape_of(x),
                    self.shape_of(gamma),
                    self.shape_of(beta)
                ),
            ));
        }
        let (out, normed, inv_std) = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = self.value(x).with_data(out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Gathers rows of `table` (`vocab x d`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table));
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table {:?}", self.shape_of(table)),
            ));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks matrices with equal column counts along the sequence axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let d = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d || t.shape().len() > 2 {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} does not stack with width {d}", t.shape()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, self.shape_of(x)),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let r = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape_of(p).to_vec()).collect();
            return Err(Error::shape("concat_cols", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Attention logits `scale * q k^T`. With `causal = Some(offset)`, query
    /// row `i` sees key rows `j <= i + offset`; masked scores are a large
    /// negative constant so the row softmax assigns them zero weight.
    pub fn attention_scores(&mut self, q: Var, k: Var, scale: f64, causal: Option<usize>) -> Result<Var> {
        let (tq, d) = dims2(self.value(q));
        let (tk, d2) = dims2(self.value(k));
        if d != d2 {
            return Err(Error::shape(
                "attention_scores",
                format!("query {:?} vs key {:?}", self.shape_of(q), self.shape_of(k)),
            ));
        }
        let s = kernels::attention_scores(self.value(q).data(), self.value(k).data(), tq, tk, d, scale, causal);
        let out = Tensor::new(vec![tq, tk], s)?;
        Ok(self.push(out, Op::AttnScores { q, k, scale, causal }, &[q, k]))
    }

    /// Summed cross-entropy of row-wise log-softmax against targets; rows
    /// with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = dims2(self.value(logits));
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), self.shape_of(logits)),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} >= vocab {v}")));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, v);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &x[i * v..(i + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - row[*t];
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar node. Returns a gradient for every
    /// registered parameter; parameters that are frozen or not on a path to
    /// the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lshape = self.shape_of(loss);
        if lshape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(lshape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            let value = &self.nodes[v.0].value;
            let g = match grads.get(v.0).and_then(|g| g.as_ref()) {
                Some(g) if self.nodes[v.0].requires_grad => value.with_data(g.clone()),
                _ => Tensor::zeros(value.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(g, false, self.value(*b).data(), true, m, n, k, &mut da, false);
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(self.value(*a).data(), true, g, false, k, m, n, &mut db, false);
                    acc(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(g, false, self.value(*b).data(), false, m, n, k, &mut da, false);
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(g, true, self.value(*a).data(), false, n, m, k, &mut db, false);
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (x, y) in db.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    acc(grads, *bias, db);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    acc(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    acc(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0]; n]);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, nr) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * nr[j];
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    acc(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), nr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(normed.chunks(d)).enumerate() {
                        let dn: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxr[j] = inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(grads, *a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[row * d + j];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        acc(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims2(self.value(*x));
                let len = node.value.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        acc(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::AttnScores { q, k, scale, causal } => {
                let (tq, d) = dims2(self.value(*q));
                let tk = self.value(*k).rows();
                let mut gs = g.to_vec();
                for i in 0..tq {
                    for j in 0..tk {
                        let masked = matches!(causal, Some(off) if j > i + off);
                        gs[i * tk + j] = if masked { 0.0 } else { gs[i * tk + j] * scale };
                    }
                }
                if self.wants(*q) {
                    let mut dq = vec![0.0; tq * d];
                    kernels::gemm(&gs, false, self.value(*k).data(), false, tq, tk, d, &mut dq, false);
                    acc(grads, *q, dq);
                }
                if self.wants(*k) {
                    let mut dk = vec![0.0; tk * d];
                    kernels::gemm(&gs, true, self.value(*q).data(), false, tk, tq, d, &mut dk, false);
                    acc(grads, *k, dk);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let mut dl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..v {
                            dl[i * v + j] = g[0] * probs[i * v + j];
                        }
                        dl[i * v + t] -= g[0];
                    }
                }
                acc(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = t.constant(m(2, 2, &[3.0, -1.0, 2.5, 7.0]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 4, &[0.0; 4]));
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 39, &[0.3; 39]));
        let l = t.cross_entropy(x, &[Some(5)]).unwrap();
        assert_abs_diff_eq!(t.value(l).data()[0], 39f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(39f64.ln(), 3.6636, epsilon = 1e-4);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let theta = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0);
        let p = t.param("theta", &theta);
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g["theta"].data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut t = Tape::new();
        let theta = Tensor::from_fn(&[4], |i| (i as f64).sin());
        let p = t.param("theta", &theta);
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g["theta"].data(), theta.data());
    }

    #[test]
    fn unreached_and_frozen_params_get_zero() {
        let mut t = Tape::with_scope(GradScope::Only(["used".to_string()].into()));
        let used = t.param("used", &Tensor::filled(&[2], 1.5));
        let _unused = t.param("unused", &Tensor::filled(&[3], 2.0));
        let frozen = t.param("frozen", &Tensor::filled(&[2], 4.0));
        let prod = t.mul(used, frozen).unwrap();
        let l = t.sum(prod);
        let g = t.backward(l).unwrap();
        assert_eq!(g["used"].data(), &[4.0, 4.0]);
        assert_eq!(g["unused"].data(), &[0.0; 3]);
        assert_eq!(g["frozen"].data(), &[0.0; 2]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.param("p", &Tensor::zeros(&[2]));
        assert!(matches!(t.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let mut t = Tape::new();
        let a = t.param("w", &Tensor::zeros(&[2]));
        let b = t.param("w", &Tensor::filled(&[2], 9.0));
        assert_eq!(a, b);
        assert_eq!(t.value(a).data(), &[0.0, 0.0]);
    }
}
