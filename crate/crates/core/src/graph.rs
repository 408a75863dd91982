//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape built by one forward pass. Parameters are bound from a
//! [`ParamStore`]; only parameters of trainable experts (and everything that
//! depends on them) carry gradients, so frozen sub-networks cost a forward
//! pass only.

use std::collections::HashMap;
use std::sync::Arc;

use crate::mot::AttentionMask;
use crate::params::{ExpertSet, ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, xhat: Matrix, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    Mse { pred: Var, target: Matrix },
    Modulate { x: Var, shift: Var, scale: Var },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for m in self.grads.iter_mut().flatten() {
            for v in m.data_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: &'p ParamStore,
    trainable: ExpertSet,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, trainable: ExpertSet) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let needs = self.trainable.contains(self.store.expert(id));
        let var = self.push(self.store.value(id).clone(), Op::Param(id), needs);
        self.bound.insert(id, var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "mul_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "mul_row width");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.value(a).scale(alpha);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, alpha), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(x);
        self.push(xhat.clone(), Op::LayerNorm { x, xhat, rstd }, ng)
    }

    /// Layer norm followed by a learned gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let n = self.layer_norm(x);
        let s = self.mul_row(n, gain);
        self.add_row(s, bias)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// `x ⊙ (1 + scale) + shift`, with `shift` and `scale` broadcast rows.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let (xm, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        assert_eq!(sh.shape(), (1, xm.cols()));
        assert_eq!(sc.shape(), (1, xm.cols()));
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(sc.data()).zip(sh.data()) {
                *o = *o * (1.0 + a) + b;
            }
        }
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        self.push(out, Op::Modulate { x, shift, scale }, ng)
    }

    /// Scaled dot-product multi-head attention. `q` is `nq × D`, `k` and `v`
    /// are `nk × D`; `mask`, when given, is `nq × nk` with `true` = attend.
    /// Query rows with no admissible key produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Arc<AttentionMask>>,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (nq, dm) = qm.shape();
        let nk = km.rows();
        assert_eq!(km.cols(), dm, "attention key width");
        assert_eq!(vm.shape(), (nk, dm), "attention value shape");
        assert!(heads > 0 && dm % heads == 0, "heads must divide width");
        if let Some(m) = mask {
            assert_eq!((m.n_query(), m.n_key()), (nq, nk), "mask shape");
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(nq, dm);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qm.slice_cols(h * dh, dh);
            let kh = km.slice_cols(h * dh, dh);
            let vh = vm.slice_cols(h * dh, dh);
            let mut s = Matrix::zeros(nq, nk);
            gemm(&qh, false, &kh, true, &mut s, 0.0);
            for i in 0..nq {
                let row = s.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, x) in row.iter_mut().enumerate() {
                    if mask.is_some_and(|m| !m.allows(i, j)) {
                        *x = f64::NEG_INFINITY;
                    } else {
                        *x *= scale;
                        max = max.max(*x);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            let mut oh = Matrix::zeros(nq, dh);
            gemm(&s, false, &vh, false, &mut oh, 0.0);
            for i in 0..nq {
                out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
            }
            probs.push(s);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Matrix::concat_rows(&mats).expect("concat_rows widths");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean negative log-softmax probability of `targets` (one per row).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "one target per logits row");
        let mut probs = Matrix::zeros(lm.rows(), lm.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lm.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let n = targets.len().max(1) as f64;
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean over all elements of `(pred − target)²`.
    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Var {
        let pm = self.value(pred);
        assert_eq!(pm.shape(), target.shape(), "mse shapes");
        let n = pm.len().max(1) as f64;
        let loss = pm
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.ng(pred);
        self.push(
            Matrix::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            ng,
        )
    }

    /// Gradients of the scalar `loss` with respect to every bound trainable
    /// parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::empty(self.store.len());
        if !self.ng(loss) {
            return out;
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads[id.index()] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bm = self.value(*b);
                        let mut da = Matrix::zeros(g.rows(), bm.rows());
                        gemm(&g, false, bm, true, &mut da, 0.0);
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let am = self.value(*a);
                        let mut db = Matrix::zeros(am.cols(), g.cols());
                        gemm(am, true, &g, false, &mut db, 0.0);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_rows());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let rm = self.value(*row);
                    if self.ng(*row) {
                        let am = self.value(*a);
                        let mut dr = Matrix::zeros(1, rm.cols());
                        for r in 0..g.rows() {
                            for ((d, x), y) in dr.data_mut().iter_mut().zip(g.row(r)).zip(am.row(r))
                            {
                                *d += x * y;
                            }
                        }
                        acc(&mut grads, *row, dr);
                    }
                    if self.ng(*a) {
                        let mut da = g;
                        for r in 0..da.rows() {
                            for (d, s) in da.row_mut(r).iter_mut().zip(rm.data()) {
                                *d *= s;
                            }
                        }
                        acc(&mut grads, *a, da);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, alpha) => {
                    acc(&mut grads, *a, g.scale(*alpha));
                }
                Op::LayerNorm { x, xhat, rstd } => {
                    let (n, d) = g.shape();
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, gi), xi) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                            *o = rstd[r] * (gi - mg - xi * mgx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, gi| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, gi| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gi * s * (1.0 + v * (1.0 - s))
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Modulate { x, shift, scale } => {
                    let sc = self.value(*scale);
                    if self.ng(*shift) {
                        acc(&mut grads, *shift, g.sum_rows());
                    }
                    if self.ng(*scale) {
                        let xm = self.value(*x);
                        let mut ds = Matrix::zeros(1, sc.cols());
                        for r in 0..g.rows() {
                            for ((d, a), b) in ds.data_mut().iter_mut().zip(g.row(r)).zip(xm.row(r))
                            {
                                *d += a * b;
                            }
                        }
                        acc(&mut grads, *scale, ds);
                    }
                    if self.ng(*x) {
                        let mut dx = g;
                        for r in 0..dx.rows() {
                            for (d, s) in dx.row_mut(r).iter_mut().zip(sc.data()) {
                                *d *= 1.0 + s;
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (nq, dm) = qm.shape();
                    let nk = km.rows();
                    let dh = dm / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(nq, dm);
                    let mut dk = Matrix::zeros(nk, dm);
                    let mut dv = Matrix::zeros(nk, dm);
                    for (h, p) in probs.iter().enumerate() {
                        let go = g.slice_cols(h * dh, dh);
                        let vh = vm.slice_cols(h * dh, dh);
                        let mut dp = Matrix::zeros(nq, nk);
                        gemm(&go, false, &vh, true, &mut dp, 0.0);
                        if self.ng(*v) {
                            let mut dvh = Matrix::zeros(nk, dh);
                            gemm(p, true, &go, false, &mut dvh, 0.0);
                            for j in 0..nk {
                                dv.row_mut(j)[h * dh..(h + 1) * dh].copy_from_slice(dvh.row(j));
                            }
                        }
                        // softmax backward, folded with the 1/sqrt(dh) scale
                        for i in 0..nq {
                            let pr = p.row(i);
                            let dr = dp.row_mut(i);
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, pi) in dr.iter_mut().zip(pr) {
                                *x = pi * (*x - dot) * scale;
                            }
                        }
                        if self.ng(*q) {
                            let kh = km.slice_cols(h * dh, dh);
                            let mut dqh = Matrix::zeros(nq, dh);
                            gemm(&dp, false, &kh, false, &mut dqh, 0.0);
                            for i in 0..nq {
                                dq.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(dqh.row(i));
                            }
                        }
                        if self.ng(*k) {
                            let qh = qm.slice_cols(h * dh, dh);
                            let mut dkh = Matrix::zeros(nk, dh);
                            gemm(&dp, true, &qh, false, &mut dkh, 0.0);
                            for j in 0..nk {
                                dk.row_mut(j)[h * dh..(h + 1) * dh].copy_from_slice(dkh.row(j));
                            }
                        }
                    }
                    if self.ng(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice_rows(start, rows));
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let am = self.value(*a);
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    let w = am.cols();
                    da.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let am = self.value(*a);
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Gather { table, ids } => {
                    let tm = self.value(*table);
                    let mut dt = Matrix::zeros(tm.rows(), tm.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let gs = g.item() / targets.len().max(1) as f64;
                    let mut dl = probs.scale(gs);
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dl.get(r, t);
                        dl.set(r, t, v - gs);
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::Mse { pred, target } => {
                    let pm = self.value(*pred);
                    let c = 2.0 * g.item() / pm.len().max(1) as f64;
                    let dp = pm.zip_map(target, |p, t| c * (p - t));
                    acc(&mut grads, *pred, dp);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Expert, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter entry against `backward`.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store, ExpertSet::ALL);
        let loss = f(&mut g);
        let grads = g.backward(loss);
        let h = 1e-5;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            });
            for i in 0..store.value(id).len() {
                let mut plus = store.clone();
                plus.value_mut(id).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.value_mut(id).data_mut()[i] -= h;
                let lp = {
                    let mut g = Graph::new(&plus, ExpertSet::ALL);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                let lm = {
                    let mut g = Graph::new(&minus, ExpertSet::ALL);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                    "{}[{i}]: analytic {a} vs fd {fd}",
                    store.entry(id).name
                );
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        for (name, r, c) in shapes {
            s.add(*name, Expert::Planning, *r, *c, Init::Normal(0.7), &mut rng);
        }
        s
    }

    #[test]
    fn gradients_of_dense_ops() {
        let store = store_with(&[("x", 3, 4), ("w", 4, 5), ("b", 1, 5), ("g", 1, 5)]);
        let [x, w, b, gain] = ["x", "w", "b", "g"].map(|n| store.id(n).unwrap());
        let target = Matrix::from_vec(2, 5, (0..10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        check(&store, |g| {
            let (x, w, b, gain) = (g.param(x), g.param(w), g.param(b), g.param(gain));
            let y = g.linear(x, w, b);
            let y = g.gelu(y);
            let n = g.layer_norm(y);
            let n = g.mul_row(n, gain);
            let s = g.silu(n);
            let sh = g.slice_rows(s, 1, 2);
            let sc = g.slice_cols(s, 0, 5);
            let sc = g.slice_rows(sc, 0, 2);
            let m = g.modulate(sh, b, gain);
            let z = g.add(m, sc);
            let z = g.sub(z, sh);
            let z = g.scale(z, 0.7);
            g.mse(z, &target)
        });
    }

    #[test]
    fn gradients_of_attention_gather_and_cross_entropy() {
        let store = store_with(&[("table", 6, 4), ("q", 3, 4), ("kv", 5, 4), ("w", 4, 6)]);
        let ids = [store.id("table").unwrap(), store.id("q").unwrap(), store.id("kv").unwrap(), store.id("w").unwrap()];
        let mask = Arc::new(AttentionMask::from_fn(3, 5, |i, j| j <= i + 1));
        check(&store, |g| {
            let table = g.param(ids[0]);
            let e = g.gather(table, &[1, 4, 1]);
            let q = g.param(ids[1]);
            let q = g.add(q, e);
            let kv = g.param(ids[2]);
            let extra = g.gather(table, &[0, 5]);
            let kv = g.concat_rows(&[kv, extra]);
            let kv = g.slice_rows(kv, 1, 5);
            let a = g.attention(q, kv, kv, 2, Some(&mask));
            let w = g.param(ids[3]);
            let logits = g.matmul(a, w);
            g.cross_entropy(logits, &[2, 0, 5])
        });
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", Expert::Understanding, 2, 2, Init::Normal(1.0), &mut rng);
        let b = store.add("b", Expert::Planning, 2, 2, Init::Normal(1.0), &mut rng);
        let mut g = Graph::new(&store, ExpertSet::of(&[Expert::Planning]));
        let (va, vb) = (g.param(a), g.param(b));
        let y = g.matmul(va, vb);
        let loss = g.mse(y, &Matrix::zeros(2, 2));
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let store = store_with(&[("q", 2, 2)]);
        let id = store.id("q").unwrap();
        let mask = Arc::new(AttentionMask::from_fn(2, 2, |i, _| i == 1));
        let mut g = Graph::new(&store, ExpertSet::ALL);
        let q = g.param(id);
        let a = g.attention(q, q, q, 1, Some(&mask));
        assert_eq!(g.value(a).row(0), &[0.0, 0.0]);
    }
}
