//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every primitive as a node holding its forward value and
//! whatever it needs for the vector-Jacobian product. Parameters enter the
//! tape once per forward pass through [`Tape::param`]; [`Tape::backward`]
//! returns one gradient per store entry, zero for parameters that did not
//! participate.
//!
//! Row-wise ops never mix rows, and attention only reads keys at or before the
//! query position, so outputs at position `i` are bit-for-bit independent of
//! anything after `i`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gelu, gelu_grad, matmul_into, norm_stats, softmax_in_place, transpose_data, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the hard two-way selector mixes its inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectorMode<S> {
    /// Forward uses the hard indicator `s1 >= s2`; backward routes the
    /// selector gradient through `sigmoid(s1 - s2)` (straight-through).
    Hard,
    /// Forward and backward both use `sigmoid(s1 - s2)`.
    Soft,
    /// Forward uses `hard + sigmoid(s1 - s2) - anchor[row]`. With anchors
    /// taken from a base point this equals the hard forward there and is
    /// exactly differentiable, which lets finite differences check the
    /// straight-through gradient.
    Anchored(Vec<S>),
}

/// Shape bookkeeping for the fused attention primitive.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    /// `batch * len` flags; false marks a padded key.
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<S>,
    },
    Gather {
        table: Var,
        idx: Vec<Option<usize>>,
    },
    ConcatCols(Vec<Var>),
    SliceCol(Var, usize),
    MaskRows(Var, Vec<bool>),
    Select {
        w_a: Var,
        w_b: Var,
        scores: Var,
        g: Vec<S>,
        soft: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[r, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.numel() != n {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x[r, n] * s[r, 1]`, scaling each row by its own scalar.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let n = xv.cols();
        if sv.numel() != xv.rows() {
            return Err(Error::shape("mul_col", xv.shape(), sv.shape()));
        }
        let mut data = xv.data().to_vec();
        for (row, &sc) in data.chunks_mut(n.max(1)).zip(sv.data()) {
            for o in row.iter_mut() {
                *o *= sc;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulCol(x, s)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 {
            return Err(Error::Empty("layer_norm last dimension".into()));
        }
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, istd) = norm_stats(row);
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 {
            return Err(Error::Empty("softmax axis".into()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Multi-head scaled dot-product attention with a causal mask and a key
    /// padding mask. `q`, `k`, `v` are `[batch*len, d]`. A query with no
    /// admissible key yields a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (b, t, h) = (spec.batch, spec.len, spec.heads);
        if h == 0 || d % h != 0 {
            return Err(Error::config(format!("head count {h} does not divide model dimension {d}")));
        }
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != b * t || spec.key_valid.len() != b * t {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let dh = d / h;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![S::zero(); b * h * t * t];
        let mut out = vec![S::zero(); b * t * d];
        let mut row = vec![S::zero(); t];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..t {
                    let qi = &qd[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                    let mut max = S::neg_infinity();
                    let mut any = false;
                    for j in 0..=i {
                        if !spec.key_valid[bi * t + j] {
                            continue;
                        }
                        let kj = &kd[(bi * t + j) * d + off..(bi * t + j) * d + off + dh];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        max = max.max(s);
                        any = true;
                    }
                    if !any {
                        continue;
                    }
                    let mut total = S::zero();
                    for j in 0..=i {
                        if spec.key_valid[bi * t + j] {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        }
                    }
                    let pbase = ((bi * h + hi) * t + i) * t;
                    let obase = (bi * t + i) * d + off;
                    for j in 0..=i {
                        if !spec.key_valid[bi * t + j] {
                            continue;
                        }
                        let p = row[j] / total;
                        probs[pbase + j] = p;
                        let vj = &vd[(bi * t + j) * d + off..(bi * t + j) * d + off + dh];
                        for (o, &vv) in out[obase..obase + dh].iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }))
    }

    /// Row lookup; `None` entries produce zero rows.
    pub fn gather(&mut self, table: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut data = vec![S::zero(); idx.len() * d];
        for (r, ix) in idx.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= rows {
                    return Err(Error::invalid(format!("lookup index {i} out of range for table of {rows} rows")));
                }
                data[r * d..(r + 1) * d].copy_from_slice(tv.row(i));
            }
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(out, Op::Gather { table, idx }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), pv.shape()));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Column `j` of a 2-D value as `[rows, 1]`.
    pub fn slice_col(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        if j >= xv.cols() {
            return Err(Error::shape("slice_col", xv.shape(), &[j]));
        }
        let data = (0..xv.rows()).map(|r| xv.row(r)[j]).collect();
        let out = Tensor::new(vec![xv.rows(), 1], data)?;
        Ok(self.push(out, Op::SliceCol(x, j)))
    }

    /// Zeroes rows whose flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.rows() {
            return Err(Error::shape("mask_rows", xv.shape(), &[keep.len()]));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, &k) in data.chunks_mut(n.max(1)).zip(&keep) {
            if !k {
                row.iter_mut().for_each(|v| *v = S::zero());
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskRows(x, keep)))
    }

    /// Row-wise `g * w_a + (1 - g) * w_b` where `g` comes from the two
    /// scores in `scores[r, 0..2]` according to `mode`.
    pub fn select(&mut self, w_a: Var, w_b: Var, scores: Var, mode: &SelectorMode<S>) -> Result<Var> {
        let (av, bv, sv) = (self.value(w_a), self.value(w_b), self.value(scores));
        if av.shape() != bv.shape() || sv.cols() != 2 || sv.rows() != av.rows() {
            return Err(Error::shape("select", av.shape(), sv.shape()));
        }
        let rows = av.rows();
        if let SelectorMode::Anchored(a) = mode {
            if a.len() != rows {
                return Err(Error::shape("select anchors", &[rows], &[a.len()]));
            }
        }
        let n = av.cols();
        let mut g = Vec::with_capacity(rows);
        let mut soft = Vec::with_capacity(rows);
        for r in 0..rows {
            let s = sv.row(r);
            let hard = if s[0] >= s[1] { S::one() } else { S::zero() };
            let sg = sigmoid(s[0] - s[1]);
            soft.push(sg);
            g.push(match mode {
                SelectorMode::Hard => hard,
                SelectorMode::Soft => sg,
                SelectorMode::Anchored(a) => hard + sg - a[r],
            });
        }
        let mut data = vec![S::zero(); rows * n];
        for r in 0..rows {
            let (ra, rb) = (av.row(r), bv.row(r));
            for j in 0..n {
                data[r * n + j] = if g[r] == S::one() {
                    ra[j]
                } else if g[r] == S::zero() {
                    rb[j]
                } else {
                    g[r] * ra[j] + (S::one() - g[r]) * rb[j]
                };
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Select {
                w_a,
                w_b,
                scores,
                g,
                soft,
            },
        ))
    }

    /// Mean negative log-softmax of the target column over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.cols();
        if targets.len() != lv.rows() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("no valid target positions".into()));
        }
        let mut probs = vec![S::zero(); lv.numel()];
        let mut total = S::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(Error::invalid(format!("target {t} out of range for {n} candidates")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[t];
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / S::lit(count as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per entry of
    /// `store`, zero-filled for parameters not on the tape.
    pub fn backward(&self, loss: Var, store: &ParamStore<S>) -> Result<Vec<Tensor<S>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = dOut · Bᵀ, dB = Aᵀ · dOut
                    let bt = transpose_data(bv.data(), k, n);
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(&gout, &bt, &mut da, m, n, k);
                    let at = transpose_data(av.data(), m, k);
                    let mut db = vec![S::zero(); k * n];
                    matmul_into(&at, &gout, &mut db, k, m, n);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    accumulate(&mut grads, *a, transpose_data(&gout, s[0], s[1]));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gout.clone());
                    accumulate(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = gout.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    let db = gout.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let n = self.value(*b).numel();
                    let mut db = vec![S::zero(); n];
                    for row in gout.chunks(n.max(1)) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, gout);
                }
                Op::MulCol(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let n = xv.cols().max(1);
                    let mut dx = gout.clone();
                    let mut ds = vec![S::zero(); sv.numel()];
                    for (r, (grow, xrow)) in gout.chunks(n).zip(xv.data().chunks(n)).enumerate() {
                        ds[r] = dot(grow, xrow);
                        for v in dx[r * n..(r + 1) * n].iter_mut() {
                            *v *= sv.data()[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, ds);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, gout.iter().map(|&g| g * *c).collect());
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = gout.iter().zip(xv.data()).map(|(&g, &v)| g * gelu_grad(v)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = gv.numel();
                    let rows = inv_std.len();
                    let mut dgain = vec![S::zero(); d];
                    let mut dbias = vec![S::zero(); d];
                    let mut dx = vec![S::zero(); rows * d];
                    let nd = S::lit(d as f64);
                    for r in 0..rows {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for j in 0..d {
                            dgain[j] += go[j] * xh[j];
                            dbias[j] += go[j];
                            let dxh = go[j] * gv.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = go[j] * gv.data()[j];
                            dx[r * d + j] = inv_std[r] * (dxh - sum_dxh / nd - xh[j] * sum_dxh_xh / nd);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut dx = vec![S::zero(); y.len()];
                    for r in 0..node.value.rows() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let inner = dot(yr, gr);
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        &gout,
                        probs,
                        spec,
                        self.value(*q).cols(),
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Gather { table, idx } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![S::zero(); tv.numel()];
                    for (r, ix) in idx.iter().enumerate() {
                        if let Some(i) = *ix {
                            for j in 0..d {
                                dt[i * d + j] += gout[r * d + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = vec![S::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(&gout[r * total + off..r * total + off + w]);
                        }
                        accumulate(&mut grads, p, dp);
                        off += w;
                    }
                }
                Op::SliceCol(x, j) => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut dx = vec![S::zero(); xv.numel()];
                    for (r, &g) in gout.iter().enumerate() {
                        dx[r * n + j] = g;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskRows(x, keep) => {
                    let n = node.value.cols().max(1);
                    let mut dx = gout;
                    for (row, &k) in dx.chunks_mut(n).zip(keep) {
                        if !k {
                            row.iter_mut().for_each(|v| *v = S::zero());
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Select {
                    w_a,
                    w_b,
                    scores,
                    g,
                    soft,
                } => {
                    let (av, bv) = (self.value(*w_a), self.value(*w_b));
                    let n = av.cols();
                    let rows = av.rows();
                    let mut da = vec![S::zero(); rows * n];
                    let mut db = vec![S::zero(); rows * n];
                    let mut ds = vec![S::zero(); rows * 2];
                    for r in 0..rows {
                        let mut dg = S::zero();
                        for j in 0..n {
                            let go = gout[r * n + j];
                            da[r * n + j] = g[r] * go;
                            db[r * n + j] = (S::one() - g[r]) * go;
                            dg += go * (av.row(r)[j] - bv.row(r)[j]);
                        }
                        let dsoft = dg * soft[r] * (S::one() - soft[r]);
                        ds[r * 2] = dsoft;
                        ds[r * 2 + 1] = -dsoft;
                    }
                    accumulate(&mut grads, *w_a, da);
                    accumulate(&mut grads, *w_b, db);
                    accumulate(&mut grads, *scores, ds);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let n = self.value(*logits).cols();
                    let scale = gout[0] / S::lit(*count as f64);
                    let mut dl = vec![S::zero(); probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..n {
                            dl[r * n + j] = probs[r * n + j] * scale;
                        }
                        dl[r * n + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![gout[0]; n]);
                }
            }
        }

        let mut out: Vec<Tensor<S>> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (id, var) in &self.bound {
            if let Some(g) = grads[var.0].take() {
                let shape = store.get(*id).shape().to_vec();
                out[id.index()] = Tensor::new(shape, g)?;
            }
        }
        Ok(out)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    gout: &[S],
    probs: &[S],
    spec: &AttentionSpec,
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (b, t, h) = (spec.batch, spec.len, spec.heads);
    let dh = d / h;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); t];
    for bi in 0..b {
        for hi in 0..h {
            let off = hi * dh;
            for i in 0..t {
                let pbase = ((bi * h + hi) * t + i) * t;
                let go = &gout[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                let mut inner = S::zero();
                for j in 0..=i {
                    let p = probs[pbase + j];
                    if p == S::zero() {
                        dp[j] = S::zero();
                        continue;
                    }
                    let vrow = (bi * t + j) * d + off;
                    dp[j] = dot(go, &v[vrow..vrow + dh]);
                    inner += p * dp[j];
                    for (x, &g) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                        *x += p * g;
                    }
                }
                let qrow = (bi * t + i) * d + off;
                for j in 0..=i {
                    let p = probs[pbase + j];
                    if p == S::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - inner) * scale;
                    let krow = (bi * t + j) * d + off;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
