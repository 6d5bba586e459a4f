//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute its vector-Jacobian product. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order. A tape has a single writer; independent tapes can live on
//! independent threads and share a read-only [`ParamStore`].

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Clamp applied to probabilities inside the log of binary cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters are recorded on the tape but skipped by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients (`+=`).
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.params {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    ParamRows { param: ParamId, ids: Vec<usize>, table_rows: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, ids: Vec<usize> },
    GatherElems { x: Var, idx: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, target: Tensor, probs: Tensor, scale: f64 },
    Bce { probs: Var, labels: Tensor, weights: Tensor, clamped: Vec<(bool, bool)>, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds another gradient set into this one (parameter part only).
    pub fn merge(&mut self, other: Gradients) -> Result<()> {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: usize,
}

fn gelu_inner(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Number of probabilities that hit the [`PROB_EPS`] clamp so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Gathers rows of a parameter table without copying the whole table.
    pub fn embedding_lookup(&mut self, store: &ParamStore, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = store.value(id);
        let (rows, cols) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::OutOfVocabulary { id: i, rows });
            }
            data.extend_from_slice(table.row(i));
        }
        let value = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::ParamRows {
                param: id,
                ids: ids.to_vec(),
                table_rows: rows,
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Sum of many same-shape terms.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `x + bias` with `bias` (one row) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let c = xv.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&values, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice(axis, start, end)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= xv.rows() {
                return Err(Error::OutOfVocabulary { id: i, rows: xv.rows() });
            }
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(&[ids.len(), cols], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherRows { x, ids: ids.to_vec() }, ng))
    }

    /// `out[p] = x.data[idx[p]]`, shaped `shape`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} into {n} elements")));
        }
        let value = Tensor::new(shape, idx.iter().map(|&i| xv.data()[i]).collect())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherElems { x, idx }, ng))
    }

    /// Row-wise softmax over the last axis. Columns with `key_mask[c] == false`
    /// get exactly zero weight; a row with no valid column is all zeros.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = key_mask {
            if m.len() != cols {
                return Err(Error::Shape(format!("mask of {} for {cols} columns", m.len())));
            }
        }
        let valid = |c: usize| key_mask.is_none_or(|m| m[c]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let max = (0..cols)
                .filter(|&c| valid(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in (0..cols).filter(|&c| valid(c)) {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
            for c in (0..cols).filter(|&c| valid(c)) {
                out[r * cols + c] /= total;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x }, ng))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != cols || b.numel() != cols {
            return Err(Error::Shape(format!("layer_norm affine for {cols} columns")));
        }
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_inner(v).0);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        let ng = self.ng(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// `−Σ target · log softmax(logits)` over rows; `Mean` divides by the
    /// number of rows.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor, reduction: Reduction) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs target {:?}",
                lv.shape(),
                target.shape()
            )));
        }
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut probs = Tensor::zeros(lv.shape());
        let mut loss = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                probs.set(r, c, (row[c] - lse).exp());
                let t = target.get(r, c);
                if t != 0.0 {
                    loss -= t * (row[c] - lse);
                }
            }
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / rows.max(1) as f64,
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy {
                logits,
                target: target.clone(),
                probs,
                scale,
            },
            ng,
        ))
    }

    /// Binary cross-entropy of probabilities against 0/1 labels. `weights`
    /// selects the included items (1) and excluded ones (0); `Mean` divides
    /// by the total weight and yields 0 when nothing is included.
    /// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` inside the
    /// logs; each clamp is counted in [`Tape::clamp_events`].
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        labels: &Tensor,
        weights: Option<&Tensor>,
        reduction: Reduction,
    ) -> Result<Var> {
        let pv = self.value(probs);
        let n = pv.numel();
        if labels.numel() != n || weights.is_some_and(|w| w.numel() != n) {
            return Err(Error::Shape(format!(
                "binary_cross_entropy of {n} probabilities with {} labels",
                labels.numel()
            )));
        }
        let weights = weights.cloned().unwrap_or_else(|| Tensor::full(pv.shape(), 1.0));
        let mut loss = 0.0;
        let mut clamped = Vec::with_capacity(n);
        let mut events = 0;
        for i in 0..n {
            let (p, y, w) = (pv.data()[i], labels.data()[i], weights.data()[i]);
            let cp = p < PROB_EPS;
            let cq = 1.0 - p < PROB_EPS;
            if w != 0.0 {
                if y != 0.0 {
                    loss -= w * y * p.max(PROB_EPS).ln();
                    events += usize::from(cp);
                }
                if y != 1.0 {
                    loss -= w * (1.0 - y) * (1.0 - p).max(PROB_EPS).ln();
                    events += usize::from(cq);
                }
            }
            clamped.push((cp, cq));
        }
        let total_w = weights.sum();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if total_w > 0.0 => 1.0 / total_w,
            Reduction::Mean => 0.0,
        };
        self.clamp_events += events;
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::Bce {
                probs,
                labels: labels.clone(),
                weights,
                clamped,
                scale,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    match params.get_mut(id) {
                        Some(p) => p.add_assign(&g)?,
                        None => {
                            params.insert(*id, g.clone());
                        }
                    }
                    grads[idx] = Some(g);
                }
                Op::ParamRows {
                    param,
                    ids,
                    table_rows,
                } => {
                    let cols = g.cols();
                    let entry = params
                        .entry(*param)
                        .or_insert_with(|| Tensor::zeros(&[*table_rows, cols]));
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, s) in entry.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.matmul_nt(self.value(*b))?)?;
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, self.value(*a).matmul_tn(&g)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.clone())?;
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.clone())?;
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::AddRow(x, b) => {
                    if ng(*b) {
                        let c = g.cols();
                        let mut gb = vec![0.0; c];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[i % c] += v;
                        }
                        let shape = self.value(*b).shape().to_vec();
                        acc(&mut grads, *b, Tensor::new(&shape, gb)?)?;
                    }
                    if ng(*x) {
                        acc(&mut grads, *x, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.mul(self.value(*b))?)?;
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, g.mul(self.value(*a))?)?;
                    }
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g.scale(*c))?,
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()?)?,
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).shape()[*axis];
                        if ng(p) {
                            acc(&mut grads, p, g.slice(*axis, start, start + len)?)?;
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    gx.add_into_slice(*axis, *start, &g);
                    acc(&mut grads, *x, gx)?;
                }
                Op::GatherRows { x, ids } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, s) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::GatherElems { x, idx } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let data = gx.data_mut();
                    for (p, &i) in idx.iter().enumerate() {
                        data[i] += g.data()[p];
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, out) in gx.row_mut(r).iter_mut().enumerate() {
                            *out = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = xhat.cols();
                    let gam = self.value(*gamma).data().to_vec();
                    if ng(*gamma) || ng(*beta) {
                        let mut gg = vec![0.0; cols];
                        let mut gbeta = vec![0.0; cols];
                        for r in 0..xhat.rows() {
                            for c in 0..cols {
                                gg[c] += g.get(r, c) * xhat.get(r, c);
                                gbeta[c] += g.get(r, c);
                            }
                        }
                        let gs = self.value(*gamma).shape().to_vec();
                        let bs = self.value(*beta).shape().to_vec();
                        if ng(*gamma) {
                            acc(&mut grads, *gamma, Tensor::new(&gs, gg)?)?;
                        }
                        if ng(*beta) {
                            acc(&mut grads, *beta, Tensor::new(&bs, gbeta)?)?;
                        }
                    }
                    if ng(*x) {
                        let mut gx = Tensor::zeros(xhat.shape());
                        let n = cols as f64;
                        for r in 0..xhat.rows() {
                            let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gam[c]).collect();
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = (0..cols).map(|c| dxhat[c] * xhat.get(r, c)).sum();
                            for c in 0..cols {
                                let v = inv_std[r] / n * (n * dxhat[c] - s1 - xhat.get(r, c) * s2);
                                gx.set(r, c, v);
                            }
                        }
                        acc(&mut grads, *x, gx)?;
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = Tensor::new(
                        xv.shape(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| gv * gelu_inner(v).1)
                            .collect(),
                    )?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = Tensor::new(
                        y.shape(),
                        y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect(),
                    )?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::full(&shape, g.item()))?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let shape = xv.shape().to_vec();
                    let n = xv.numel().max(1) as f64;
                    acc(&mut grads, *x, Tensor::full(&shape, g.item() / n))?;
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                    scale,
                } => {
                    let k = g.item() * scale;
                    let mut gx = Tensor::zeros(probs.shape());
                    for r in 0..probs.rows() {
                        let mass: f64 = target.row(r).iter().sum();
                        for c in 0..probs.cols() {
                            gx.set(r, c, k * (mass * probs.get(r, c) - target.get(r, c)));
                        }
                    }
                    acc(&mut grads, *logits, gx)?;
                }
                Op::Bce {
                    probs,
                    labels,
                    weights,
                    clamped,
                    scale,
                } => {
                    let k = g.item() * scale;
                    let pv = self.value(*probs);
                    let mut gx = Tensor::zeros(pv.shape());
                    for (i, out) in gx.data_mut().iter_mut().enumerate() {
                        let (p, y, w) = (pv.data()[i], labels.data()[i], weights.data()[i]);
                        let (cp, cq) = clamped[i];
                        let mut d = 0.0;
                        if y != 0.0 && !cp {
                            d -= y / p;
                        }
                        if y != 1.0 && !cq {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        *out = k * w * d;
                    }
                    acc(&mut grads, *probs, gx)?;
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    /// Backward pass that accumulates into the store's gradients (`+=`).
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
