//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes that do not
//! depend on a gradient-requiring parameter are never visited by
//! [`Tape::backward`], so frozen weights cost nothing beyond their forward use
//! and their gradients are identically zero.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{LynxError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameters become gradient-requiring leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Pure inference; nothing is differentiated.
    None,
    /// Parameters flagged trainable in the store.
    Trainable,
    /// Every parameter (used by gradient checks).
    All,
}

/// Sparse attention pattern in CSR layout: for query row `i`, the allowed key
/// rows are `cols[offsets[i]..offsets[i + 1]]`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnPattern {
    n_q: usize,
    n_kv: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
}

impl AttnPattern {
    pub fn full(n_q: usize, n_kv: usize) -> Self {
        Self::from_fn(n_q, n_kv, |_, _| true)
    }

    pub fn from_fn(n_q: usize, n_kv: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut offsets = Vec::with_capacity(n_q + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for i in 0..n_q {
            for j in 0..n_kv {
                if allowed(i, j) {
                    cols.push(j as u32);
                }
            }
            offsets.push(cols.len());
        }
        Self {
            n_q,
            n_kv,
            offsets,
            cols,
        }
    }

    /// Queries in segment `q_seg[i]` see exactly the keys with the same id.
    /// `None` marks rows (padding) that neither attend nor are attended.
    pub fn from_segments(q_seg: &[Option<usize>], kv_seg: &[Option<usize>]) -> Self {
        let mut by_seg: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (j, s) in kv_seg.iter().enumerate() {
            if let Some(s) = s {
                by_seg.entry(*s).or_default().push(j as u32);
            }
        }
        let mut offsets = Vec::with_capacity(q_seg.len() + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for s in q_seg {
            if let Some(list) = s.and_then(|s| by_seg.get(&s)) {
                cols.extend_from_slice(list);
            }
            offsets.push(cols.len());
        }
        Self {
            n_q: q_seg.len(),
            n_kv: kv_seg.len(),
            offsets,
            cols,
        }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_kv(&self) -> usize {
        self.n_kv
    }

    pub fn allowed(&self, i: usize) -> &[u32] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed(i).binary_search(&(j as u32)).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

/// Per-row rotation factors for rotary embeddings: `cos`/`sin` are
/// `rows × (head_dim / 2)`, pair `p` rotating channels `(2p, 2p + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryFactors {
    pub cos: Matrix,
    pub sin: Matrix,
}

impl RotaryFactors {
    pub fn head_dim(&self) -> usize {
        self.cos.cols() * 2
    }

    pub fn rows(&self) -> usize {
        self.cos.rows()
    }
}

/// Applies the rotation to `x` (`rows × heads·head_dim`), in place.
/// `inverse` rotates by the negated angle.
pub(crate) fn rotate_rows(x: &mut Matrix, f: &RotaryFactors, inverse: bool) {
    let half = f.cos.cols();
    let hd = half * 2;
    let heads = x.cols() / hd;
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.rows() {
        let cr = f.cos.row(r).to_vec();
        let sr = f.sin.row(r).to_vec();
        let row = x.row_mut(r);
        for h in 0..heads {
            let base = h * hd;
            for p in 0..half {
                let (c, s) = (cr[p], sign * sr[p]);
                let a = row[base + 2 * p];
                let b = row[base + 2 * p + 1];
                row[base + 2 * p] = a * c - b * s;
                row[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Silu(Var),
    Gelu(Var),
    Rope(Var, Arc<RotaryFactors>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: Arc<AttnPattern>,
        probs: Vec<f64>,
    },
    WeightedSum(Var, Matrix),
    MaskedMse {
        pred: Var,
        target: Matrix,
        row_mask: Vec<bool>,
        count: usize,
    },
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Matrix>,
    vars: HashMap<usize, Matrix>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.vars.get(&v.0)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Matrix> {
        self.params
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    mode: GradMode,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, mode: GradMode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op, requires_grad: bool) -> Var {
        let rg = requires_grad && self.mode != GradMode::None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// An input leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let rg = match self.mode {
            GradMode::None => false,
            GradMode::Trainable => self.store.is_trainable(id),
            GradMode::All => true,
        };
        let v = self.push_arc(self.store.shared(id), Op::Param(id), rg);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `w` stored `in × out` and `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(LynxError::dims(format!(
                "linear input width {} vs weight {}x{}",
                xv.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        matmul_into(xv.data(), wv.data(), out.data_mut(), xv.rows(), xv.cols(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.cols()) {
                return Err(LynxError::dims(format!("bias shape {:?}", bv.shape())));
            }
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x ⊙ row`, broadcasting a `1 × cols` row over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.shape() != (1, xv.cols()) {
            return Err(LynxError::dims(format!(
                "row broadcast {:?} over {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.shape() != (1, xv.cols()) {
            return Err(LynxError::dims(format!(
                "row broadcast {:?} over {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += s;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Row `i` of the result is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), xv.cols());
        for (i, &r) in idx.iter().enumerate() {
            if r >= xv.rows() {
                return Err(LynxError::dims(format!("gather row {r} of {}", xv.rows())));
            }
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_rows(&mats)?;
        let rg = parts.iter().any(|v| self.rg(*v));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(LynxError::dims(format!("row slice {start}..{end} of {}", xv.rows())));
        }
        let out = xv.slice_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(LynxError::dims(format!("column slice {start}..{end} of {}", xv.cols())));
        }
        let out = xv.slice_cols(start, end);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Per-row normalization to zero mean and unit variance, no affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, rstd }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Rotates every head of `x` by the per-row factors.
    pub fn rope(&mut self, x: Var, factors: Arc<RotaryFactors>) -> Result<Var> {
        let xv = self.value(x);
        let hd = factors.head_dim();
        if factors.rows() != xv.rows() || hd == 0 || !xv.cols().is_multiple_of(hd) {
            return Err(LynxError::dims(format!(
                "rotary table {}x{} for activations {:?}",
                factors.rows(),
                hd,
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        rotate_rows(&mut out, &factors, false);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rope(x, factors), rg))
    }

    /// Multi-head scaled dot-product attention with a max-subtracted softmax.
    /// Query rows with an empty allowed set produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, pattern: Arc<AttnPattern>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(LynxError::dims(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if pattern.n_q() != qv.rows() || pattern.n_kv() != kv.rows() {
            return Err(LynxError::dims(format!(
                "mask {}x{} for {} queries and {} keys",
                pattern.n_q(),
                pattern.n_kv(),
                qv.rows(),
                kv.rows()
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let nnz = pattern.nnz();
        let mut probs = vec![0.0; heads * nnz];
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut scores = Vec::new();
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..qv.rows() {
                let allowed = pattern.allowed(i);
                if allowed.is_empty() {
                    continue;
                }
                let qi = &qv.row(i)[c0..c0 + hd];
                scores.clear();
                let mut m = f64::NEG_INFINITY;
                for &j in allowed {
                    let kj = &kv.row(j as usize)[c0..c0 + hd];
                    let s = crate::tensor::dot(qi, kj) * scale;
                    m = m.max(s);
                    scores.push(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let base = h * nnz + pattern.offsets[i];
                let orow = &mut out.row_mut(i)[c0..c0 + hd];
                for (slot, (&j, &e)) in allowed.iter().zip(scores.iter()).enumerate() {
                    let p = e / z;
                    probs[base + slot] = p;
                    let vj = &vv.row(j as usize)[c0..c0 + hd];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            },
            rg,
        ))
    }

    /// `Σ x ⊙ w` as a `1 × 1` value.
    pub fn weighted_sum(&mut self, x: Var, w: Matrix) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != w.shape() {
            return Err(LynxError::dims("weighted sum shape"));
        }
        let s = crate::tensor::dot(xv.data(), w.data());
        let rg = self.rg(x);
        Ok(self.push(Matrix::filled(1, 1, s), Op::WeightedSum(x, w), rg))
    }

    /// Mean squared error over the rows with `row_mask[r] == true`.
    pub fn masked_mse(&mut self, pred: Var, target: Matrix, row_mask: Vec<bool>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || row_mask.len() != pv.rows() {
            return Err(LynxError::dims(format!(
                "loss prediction {:?} target {:?} mask {}",
                pv.shape(),
                target.shape(),
                row_mask.len()
            )));
        }
        let live = row_mask.iter().filter(|m| **m).count();
        if live == 0 || pv.cols() == 0 {
            return Err(LynxError::invalid("loss mask selects no entries"));
        }
        let mut s = 0.0;
        for (r, _) in row_mask.iter().enumerate().filter(|(_, m)| **m) {
            for (a, b) in pv.row(r).iter().zip(target.row(r)) {
                s += (a - b) * (a - b);
            }
        }
        let count = live * pv.cols();
        let rg = self.rg(pred);
        Ok(self.push(
            Matrix::filled(1, 1, s / count as f64),
            Op::MaskedMse {
                pred,
                target,
                row_mask,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(LynxError::dims("backward requires a scalar output"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut result = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    result.vars.insert(idx, g);
                }
                Op::Param(id) => {
                    result.params.insert(*id, g);
                }
                op => self.backprop(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut ga = Matrix::zeros(m, k);
                    matmul_nt_into(g.data(), bv.data(), ga.data_mut(), m, k, n);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Matrix::zeros(k, n);
                    matmul_tn_into(av.data(), g.data(), gb.data_mut(), m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.rg(*x) {
                    let mut gx = Matrix::zeros(m, k);
                    matmul_nt_into(g.data(), wv.data(), gx.data_mut(), m, k, n);
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = Matrix::zeros(k, n);
                    matmul_tn_into(xv.data(), g.data(), gw.data_mut(), m, k, n);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, col_sums(g));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        for (o, s) in gx.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*row) {
                    let mut gr = Matrix::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for ((o, gg), xx) in gr.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += gg * xx;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, col_sums(g));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for (o, gg) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += gg;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, start + rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, g.clone().reshape(r, c)?);
            }
            Op::LayerNorm { x, rstd } => {
                let n = out.cols() as f64;
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, a), b) in gx.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o = rstd[r] * (a - mean_g - b * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = self.value(*x).zip_with(g, |v, gg| {
                    let s = sigmoid(v);
                    gg * s * (1.0 + v * (1.0 - s))
                })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = self.value(*x).zip_with(g, |v, gg| gg * gelu_grad(v))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Rope(x, f) => {
                let mut gx = g.clone();
                rotate_rows(&mut gx, f, true);
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, pattern, probs, g, grads),
            Op::WeightedSum(x, w) => {
                let s = g.get(0, 0);
                self.accumulate(grads, *x, w.scale(s));
            }
            Op::MaskedMse {
                pred,
                target,
                row_mask,
                count,
            } => {
                let pv = self.value(*pred);
                let c = 2.0 * g.get(0, 0) / *count as f64;
                let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                for (r, _) in row_mask.iter().enumerate().filter(|(_, m)| **m) {
                    for ((o, a), b) in gp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                        *o = c * (a - b);
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: &AttnPattern,
        probs: &[f64],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let nnz = pattern.nnz();
        let mut gq = Matrix::zeros(qv.rows(), d);
        let mut gk = Matrix::zeros(kv.rows(), d);
        let mut gv = Matrix::zeros(vv.rows(), d);
        let mut dp = Vec::new();
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..qv.rows() {
                let allowed = pattern.allowed(i);
                if allowed.is_empty() {
                    continue;
                }
                let base = h * nnz + pattern.offsets[i];
                let p = &probs[base..base + allowed.len()];
                let go = &g.row(i)[c0..c0 + hd];
                dp.clear();
                let mut pdp = 0.0;
                for (slot, &j) in allowed.iter().enumerate() {
                    let j = j as usize;
                    let vj = &vv.row(j)[c0..c0 + hd];
                    let dpj = crate::tensor::dot(go, vj);
                    pdp += p[slot] * dpj;
                    dp.push(dpj);
                    for (o, x) in gv.row_mut(j)[c0..c0 + hd].iter_mut().zip(go) {
                        *o += p[slot] * x;
                    }
                }
                let qi = qv.row(i)[c0..c0 + hd].to_vec();
                for (slot, &j) in allowed.iter().enumerate() {
                    let j = j as usize;
                    let ds = p[slot] * (dp[slot] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv.row(j)[c0..c0 + hd];
                    for (o, x) in gq.row_mut(i)[c0..c0 + hd].iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    for (o, x) in gk.row_mut(j)[c0..c0 + hd].iter_mut().zip(&qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
