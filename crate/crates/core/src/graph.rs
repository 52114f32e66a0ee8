//! Tape-based reverse-mode differentiation over [`Tensor`] matrices.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Parameters enter the tape through
//! [`Graph::param`], which consults the store's frozen flag and the graph's
//! [`TrainFilter`]: frozen or filtered-out tensors become constants, so no
//! gradient is ever computed for them.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which non-frozen parameters receive gradients in this graph.
#[derive(Clone, Debug, Default)]
pub enum TrainFilter {
    /// Nothing is trainable (pure inference).
    #[default]
    Nothing,
    /// Every non-frozen parameter.
    AllUnfrozen,
    /// Non-frozen parameters whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
}

impl TrainFilter {
    pub fn prefixes<S: AsRef<str>>(prefixes: &[S]) -> Self {
        TrainFilter::Prefixes(prefixes.iter().map(|s| s.as_ref().to_string()).collect())
    }

    fn admits(&self, name: &str) -> bool {
        match self {
            TrainFilter::Nothing => false,
            TrainFilter::AllUnfrozen => true,
            TrainFilter::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Gelu(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Option<Var>, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Gather { x: Var, index: Arc<Vec<Option<usize>>> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    MseConst { x: Var, target: Arc<Tensor> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Boolean attention mask, `[queries, keys]`, `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self { queries, keys, allowed: vec![true; queries * keys] }
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    filter: TrainFilter,
}

impl Graph {
    pub fn new(filter: TrainFilter) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), filter }
    }

    /// A graph in which no parameter is trainable.
    pub fn inference() -> Self {
        Self::new(TrainFilter::Nothing)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that always receives a gradient (inputs under test, etc).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter. Repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.param(name)?;
        let trainable = !p.frozen && self.filter.admits(name);
        let v = self.push_arc(p.value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[n, c] + row[1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(a, row, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a[n, c] * row[1, c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(a, row, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return shape_err(format!("row broadcast {:?} with {:?}", ta.shape(), tr.shape()));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(tr.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` with `b` a `[1, out]` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Row-wise RMS normalization with optional `[1, c]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if let Some(g) = gain {
            let tg = self.value(g);
            if tg.shape() != (1, c) {
                return shape_err(format!("rms gain {:?} for width {c}", tg.shape()));
            }
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        if let Some(g) = gain {
            let tg = self.value(g).data().to_vec();
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, gv) in chunk.iter_mut().zip(&tg) {
                    *v *= gv;
                }
            }
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g));
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `[nq, d]`, `k` and `v`
    /// are `[nk, d]`, `d` is split evenly over `heads`. Disallowed keys get
    /// probability exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.shape();
        let nk = tk.rows();
        if tk.cols() != d || tv.shape() != (nk, d) {
            return shape_err(format!(
                "attention q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible into {heads} heads"));
        }
        if let Some(m) = mask {
            if m.queries != nq || m.keys != nk {
                return shape_err(format!(
                    "mask {}x{} for {nq} queries and {nk} keys",
                    m.queries, m.keys
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = Tensor::zeros(nq, d);
        let mut scores = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &tq.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    if mask.is_some_and(|m| !m.get(i, j)) {
                        *s = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &tk.row(j)[off..off + dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*s);
                }
                if max == f64::NEG_INFINITY {
                    return shape_err(format!("attention row {i} has no allowed keys"));
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut z = 0.0;
                for (pj, &s) in p.iter_mut().zip(&scores) {
                    *pj = if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() };
                    z += *pj;
                }
                let o = &mut out.row_mut(i)[off..off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= z;
                    if *pj != 0.0 {
                        let vj = &tv.row(j)[off..off + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += *pj * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Softmax attention weights recorded by an attention node, laid out as
    /// `[head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Output row `r` is input row `index[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Tensor::zeros(index.len(), c);
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= tx.rows() {
                    return shape_err(format!("gather index {s} out of {} rows", tx.rows()));
                }
                out.row_mut(r).copy_from_slice(tx.row(s));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.gather_rows(x, Arc::new(rows.iter().map(|&r| Some(r)).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return shape_err(format!("concat rows width {} vs {c}", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_vec(rows, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return shape_err(format!("slice cols {start}+{len} of {}", tx.cols()));
        }
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(1, tx.cols());
        for r in 0..tx.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let n = tx.rows().max(1) as f64;
        let out = out.scale(1.0 / n);
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared error against a constant target, as a `[1, 1]` scalar.
    pub fn mse_const(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return shape_err(format!("mse {:?} vs target {:?}", tx.shape(), target.shape()));
        }
        if tx.is_empty() {
            return shape_err("mse over an empty tensor");
        }
        let n = tx.len() as f64;
        let s: f64 = tx.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s / n), Op::MseConst { x, target: Arc::new(target) }, rg))
    }

    /// Mean token cross-entropy of `[n, vocab]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = tl.shape();
        if targets.len() != n || n == 0 {
            return shape_err(format!("cross entropy over {n} rows with {} targets", targets.len()));
        }
        let mut probs = Tensor::zeros(n, vocab);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return shape_err(format!("target {t} outside vocab {vocab}"));
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            loss += z.ln() + max - row[t];
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - max).exp() / z;
            }
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss / n as f64), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return shape_err("backward from a non-scalar");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Ok(Grads { grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("slot initialized above"));
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accum(grads, *a, g.zip_map(tb, |x, y| x * y).expect("shapes checked"));
                }
                if self.rg(*b) {
                    self.accum(grads, *b, g.zip_map(ta, |x, y| x * y).expect("shapes checked"));
                }
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.rg(*row) {
                    let c = g.cols();
                    self.accum_with(grads, *row, |acc| {
                        for chunk in g.data().chunks(c) {
                            for (o, v) in acc.data_mut().iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let c = g.cols();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(c) {
                        for (x, y) in chunk.iter_mut().zip(tr.data()) {
                            *x *= y;
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                if self.rg(*row) {
                    self.accum_with(grads, *row, |acc| {
                        for (gc, ac) in g.data().chunks(c).zip(ta.data().chunks(c)) {
                            for ((o, gv), av) in acc.data_mut().iter_mut().zip(gc).zip(ac) {
                                *o += gv * av;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.shape();
                let n = tb.cols();
                if self.rg(*a) {
                    self.accum_with(grads, *a, |acc| {
                        matmul_nt_into(g.data(), tb.data(), acc.data_mut(), m, n, k)
                    });
                }
                if self.rg(*b) {
                    self.accum_with(grads, *b, |acc| {
                        matmul_tn_into(ta.data(), g.data(), acc.data_mut(), m, k, n)
                    });
                }
            }
            Op::Gelu(a) => {
                let ga = self.value(*a).zip_map(g, |x, gv| gv * gelu_grad(x)).expect("same shape");
                self.accum(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = self
                    .value(*a)
                    .zip_map(g, |x, gv| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("same shape");
                self.accum(grads, *a, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => self.rms_norm_backward(*x, *gain, inv_rms, g, grads),
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads)
            }
            Op::Gather { x, index } => {
                if self.rg(*x) {
                    self.accum_with(grads, *x, |acc| {
                        for (r, src) in index.iter().enumerate() {
                            if let Some(s) = *src {
                                for (o, v) in acc.row_mut(s).iter_mut().zip(g.row(r)) {
                                    *o += v;
                                }
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                        self.accum(grads, p, Tensor::from_vec(rows, c, slice).expect("sized"));
                    }
                    offset += rows;
                }
            }
            Op::SliceCols { x, start } => {
                let len = g.cols();
                self.accum_with(grads, *x, |acc| {
                    for r in 0..g.rows() {
                        for (o, v) in acc.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.accum(grads, *x, g.clone().reshape(r, c).expect("same size"));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).shape();
                let inv = 1.0 / r.max(1) as f64;
                let mut gx = Tensor::zeros(r, c);
                for row in 0..r {
                    for (o, v) in gx.row_mut(row).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accum(grads, *x, Tensor::full(r, c, g.data()[0]));
            }
            Op::MseConst { x, target } => {
                let tx = self.value(*x);
                let k = 2.0 * g.data()[0] / tx.len() as f64;
                let gx = tx.zip_map(target, |a, b| k * (a - b)).expect("same shape");
                self.accum(grads, *x, gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len() as f64;
                let k = g.data()[0] / n;
                let mut gl = probs.scale(k);
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - k);
                }
                self.accum(grads, *logits, gl);
            }
        }
    }

    fn rms_norm_backward(
        &self,
        x: Var,
        gain: Option<Var>,
        inv_rms: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let tx = self.value(x);
        let c = tx.cols();
        let gain_vals = gain.map(|gv| self.value(gv).data().to_vec());
        if let Some(gv) = gain {
            if self.rg(gv) {
                self.accum_with(grads, gv, |acc| {
                    for r in 0..tx.rows() {
                        for ((o, gr), xv) in acc.data_mut().iter_mut().zip(g.row(r)).zip(tx.row(r)) {
                            *o += gr * xv * inv_rms[r];
                        }
                    }
                });
            }
        }
        if self.rg(x) {
            let mut gx = Tensor::zeros(tx.rows(), c);
            for r in 0..tx.rows() {
                let inv = inv_rms[r];
                let dxhat: Vec<f64> = match &gain_vals {
                    Some(gs) => g.row(r).iter().zip(gs).map(|(a, b)| a * b).collect(),
                    None => g.row(r).to_vec(),
                };
                let dot: f64 =
                    dxhat.iter().zip(tx.row(r)).map(|(d, xv)| d * xv * inv).sum::<f64>() / c as f64;
                for ((o, d), xv) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(tx.row(r)) {
                    *o = inv * (d - xv * inv * dot);
                }
            }
            self.accum(grads, x, gx);
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
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.shape();
        let nk = tk.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(nq, d);
        let mut gk = Tensor::zeros(nk, d);
        let mut gv = Tensor::zeros(nk, d);
        let mut dp = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let go = &g.row(i)[off..off + dh];
                let mut dot = 0.0;
                for (j, dpj) in dp.iter_mut().enumerate() {
                    if p[j] == 0.0 {
                        *dpj = 0.0;
                        continue;
                    }
                    let vj = &tv.row(j)[off..off + dh];
                    *dpj = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    dot += p[j] * *dpj;
                    for (o, gc) in gv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                        *o += p[j] * gc;
                    }
                }
                let qi = tq.row(i)[off..off + dh].to_vec();
                for j in 0..nk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &tk.row(j)[off..off + dh];
                    for (o, kc) in gq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                        *o += ds * kc;
                    }
                    for (o, qc) in gk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *o += ds * qc;
                    }
                }
            }
        }
        self.accum(grads, q, gq);
        self.accum(grads, k, gk);
        self.accum(grads, v, gv);
    }
}

/// Gradients from one backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, Var>,
}

impl Grads {
    /// Gradient of `v`; zero-filled when nothing flowed into it.
    pub fn get(&self, v: Var, graph: &Graph) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = graph.value(v).shape();
            Tensor::zeros(r, c)
        })
    }

    /// Gradients for every trainable parameter loaded into the graph, sorted
    /// by name. Trainable parameters that did not influence the loss appear
    /// with zero gradients.
    pub fn params(&self, graph: &Graph) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self.params.iter().map(|(k, v)| (k.clone(), self.get(*v, graph))).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param(&self, name: &str, graph: &Graph) -> Option<Tensor> {
        self.params.get(name).map(|v| self.get(*v, graph))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences over every entry of `x` for `f`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    fn check_unary(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let f = |t: &Tensor| {
            let mut g = Graph::inference();
            let v = g.constant(t.clone());
            let out = build(&mut g, v);
            let out = g.sum(out);
            g.value(out).data()[0]
        };
        let mut g = Graph::inference();
        let v = g.variable(x.clone());
        let out = build(&mut g, v);
        let s = g.sum(out);
        let grads = g.backward(s).unwrap();
        assert_close(&grads.get(v, &g), &numeric_grad(&x, &f), 1e-6);
    }

    #[test]
    fn elementwise_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(3, 4, 1.0, &mut rng);
        let w = Tensor::randn(3, 4, 1.0, &mut rng);
        check_unary(x.clone(), |g, v| g.gelu(v));
        check_unary(x.clone(), |g, v| g.silu(v));
        check_unary(x.clone(), |g, v| {
            let c = g.constant(w.clone());
            let m = g.mul(v, c).unwrap();
            g.mul(m, v).unwrap()
        });
        check_unary(x.clone(), |g, v| {
            let r = g.slice_rows(v, 1, 1).unwrap();
            let m = g.mul_row(v, r).unwrap();
            g.add_row(m, r).unwrap()
        });
        check_unary(x.clone(), |g, v| {
            let n = g.rms_norm(v, None).unwrap();
            let c = g.constant(w.clone());
            g.mul(n, c).unwrap()
        });
        check_unary(x, |g, v| {
            let m = g.mean_rows(v);
            let s = g.slice_cols(v, 1, 2).unwrap();
            let r = g.reshape(s, 2, 3).unwrap();
            let sq = g.mul(r, r).unwrap();
            let a = g.scale(sq, 0.3);
            let b = g.add_scalar(a, 2.0);
            let mm = g.mul(m, m).unwrap();
            let sb = g.sum(b);
            let smm = g.sum(mm);
            g.add(sb, smm).unwrap()
        });
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(5, 4, 1.0, &mut rng);
        let w = Tensor::randn(5, 4, 1.0, &mut rng);
        let mut mask = AttnMask::full(5, 5);
        mask.allowed[1] = false;
        mask.allowed[7] = false;
        check_unary(x, |g, v| {
            let c = g.constant(w.clone());
            let k = g.mul(v, c).unwrap();
            let a = g.attention(v, k, v, 2, Some(&mask)).unwrap();
            g.mul(a, c).unwrap()
        });
    }

    #[test]
    fn losses_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(3, 5, 1.0, &mut rng);
        let t = Tensor::randn(3, 5, 1.0, &mut rng);
        check_unary(x.clone(), |g, v| g.mse_const(v, t.clone()).unwrap());
        check_unary(x, |g, v| g.cross_entropy(v, &[0, 4, 2]).unwrap());
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new();
        store.insert("a/w", Tensor::full(2, 2, 1.0), true);
        store.insert("b/w", Tensor::full(2, 2, 1.0), false);
        let mut g = Graph::new(TrainFilter::AllUnfrozen);
        let a = g.param(&store, "a/w").unwrap();
        let b = g.param(&store, "b/w").unwrap();
        assert_eq!(g.param(&store, "a/w").unwrap(), a);
        let m = g.matmul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        let names: Vec<_> = grads.params(&g).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b/w"]);
        assert!(grads.param("a/w", &g).is_none());
    }

    #[test]
    fn gather_with_padding_and_concat() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut g = Graph::inference();
        let v = g.variable(x);
        let idx = Arc::new(vec![Some(1), None, Some(1), Some(0)]);
        let y = g.gather_rows(v, idx).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);
        let c = g.concat_rows(&[v, y]).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v, &g).data(), &[2.0, 2.0, 3.0, 3.0]);
    }
}
