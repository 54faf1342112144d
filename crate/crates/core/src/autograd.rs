//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Each forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] returns gradients for every leaf registered as a
//! trainable parameter. Frozen leaves and constants never receive gradients,
//! and operations whose inputs are all frozen skip their backward work.

use std::collections::BTreeMap;

use crate::error::{DpatError, Result};
use crate::model::params::ParamKey;
use crate::prompt::matching::{match_loss_with_grads, MatchLossKind};
use crate::tensor::{dot, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type Gradients = BTreeMap<ParamKey, Tensor>;

enum Op {
    Leaf(Option<ParamKey>),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, xhat: Vec<f64>, rstd: Vec<f64>, beta: Var },
    Gelu(Var),
    GatherRows { x: Var, index: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Var, Var),
    Attention(Box<AttentionCache>),
    MeanRows(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    MatchLoss { keys: Vec<Var>, key_grads: Vec<Vec<f64>> },
    WeightedSum(Vec<(Var, f64)>),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    seq_len: usize,
    heads: usize,
    /// Softmax weights laid out as `[seq][head][query][position]`.
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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
        self.push(t, Op::Leaf(None), false)
    }

    /// Registers a parameter leaf. Only trainable leaves get gradients.
    pub fn param(&mut self, key: ParamKey, t: &Tensor, trainable: bool) -> Var {
        self.push(t.clone(), Op::Leaf(Some(key)), trainable)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(k, bk, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, out.data_mut(), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, trans_b }, ng)
    }

    /// `a · b` with `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        assert_eq!(out.cols(), b.len(), "bias length mismatch");
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias { x, bias }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.len(), self.value(b).len(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[rows, d]);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                o[j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
                beta,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(&[index.len(), d], data).expect("gather shape");
        let ng = self.ng(x);
        self.push(out, Op::GatherRows { x, index }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::from_vec(&[len, d], data).expect("slice shape");
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    /// Rows of `a` followed by rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concatenated rows differ in width");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&[av.rows() + bv.rows(), av.cols()], data).expect("concat shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatRows(a, b), ng)
    }

    /// Multi-head scaled dot-product attention over consecutive sequences
    /// of `seq_len` rows. Queries come only from `q`; when `prefix` is given,
    /// its key and value rows are prepended to every sequence's keys and
    /// values.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qv.rows(), qv.cols());
        if kv.rows() != rows || vv.rows() != rows || kv.cols() != d || vv.cols() != d {
            return Err(DpatError::DimensionMismatch(
                "query, key and value must share a shape".into(),
            ));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(DpatError::DimensionMismatch(format!(
                "{rows} rows do not split into sequences of length {seq_len}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(DpatError::DimensionMismatch(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (pk, pv, plen) = match prefix {
            Some((a, b)) => {
                let (av, bv) = (self.value(a), self.value(b));
                if av.cols() != d || bv.cols() != d || av.rows() != bv.rows() {
                    return Err(DpatError::InvalidPrompt(format!(
                        "prefix halves must both be (P, {d})"
                    )));
                }
                (Some(av.data()), Some(bv.data()), av.rows())
            }
            None => (None, None, 0),
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seqs = rows / seq_len;
        let width = plen + seq_len;
        let mut probs = vec![0.0; seqs * heads * seq_len * width];
        let mut out = Tensor::zeros(&[rows, d]);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let od = out.data_mut();
        let mut scores = vec![0.0; width];
        for s in 0..seqs {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qrow = &qd[(s * seq_len + i) * d + off..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let krow = if j < plen {
                            &pk.unwrap()[j * d + off..][..dh]
                        } else {
                            &kd[(s * seq_len + j - plen) * d + off..][..dh]
                        };
                        *sc = dot(qrow, krow) * scale;
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let base = ((s * heads + h) * seq_len + i) * width;
                    let orow = &mut od[(s * seq_len + i) * d + off..][..dh];
                    for (j, sc) in scores.iter().enumerate() {
                        let p = sc / z;
                        probs[base + j] = p;
                        let vrow = if j < plen {
                            &pv.unwrap()[j * d + off..][..dh]
                        } else {
                            &vd[(s * seq_len + j - plen) * d + off..][..dh]
                        };
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q)
            || self.ng(k)
            || self.ng(v)
            || prefix.is_some_and(|(a, b)| self.ng(a) || self.ng(b));
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                prefix,
                seq_len,
                heads,
                probs,
            })),
            ng,
        ))
    }

    /// Column means, producing a single row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[1, d]);
        for r in 0..rows {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / rows as f64);
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    /// Cross-entropy of a single logit row restricted to the `active` slots.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, active: &[bool]) -> Result<Var> {
        let lv = self.value(logits).data();
        if active.len() != lv.len() {
            return Err(DpatError::DimensionMismatch(format!(
                "mask has {} entries for {} logits",
                active.len(),
                lv.len()
            )));
        }
        if target >= lv.len() || !active[target] {
            return Err(DpatError::Data(format!(
                "target slot {target} is not an active class"
            )));
        }
        let max = lv
            .iter()
            .zip(active)
            .filter(|(_, &a)| a)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; lv.len()];
        let mut z = 0.0;
        for (i, (&v, &a)) in lv.iter().zip(active).enumerate() {
            if a {
                probs[i] = (v - max).exp();
                z += probs[i];
            }
        }
        probs.iter_mut().for_each(|p| *p /= z);
        let loss = max + z.ln() - lv[target];
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// Key-matching loss against a fixed query; `keys[i]` holds task `i+1`'s
    /// key and `current` is 1-based.
    pub fn match_loss(
        &mut self,
        query: &[f64],
        keys: &[Var],
        current: usize,
        tau: f64,
        kind: MatchLossKind,
    ) -> Result<Var> {
        let key_vals: Vec<&[f64]> = keys.iter().map(|k| self.value(*k).data()).collect();
        let (loss, key_grads) = match_loss_with_grads(query, &key_vals, current, tau, kind)?;
        let ng = keys.iter().any(|k| self.ng(*k));
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MatchLoss {
                keys: keys.to_vec(),
                key_grads,
            },
            ng,
        ))
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms
            .iter()
            .map(|(v, c)| self.value(*v).data()[0] * c)
            .sum();
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse pass from a scalar output. Returns gradients of every
    /// trainable parameter leaf reachable from `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::new();
        if !self.ng(out) {
            return result;
        }
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut result);
        }
        result
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.ng(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        result: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf(Some(key)) => {
                result
                    .entry(*key)
                    .and_modify(|acc| acc.add_assign(&g))
                    .or_insert(g);
            }
            Op::Leaf(None) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = G · op(B)ᵀ
                    gemm(m, n, k, g.data(), false, bv.data(), !trans_b, ga.data_mut(), true);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, m, k, g.data(), true, av.data(), false, gb.data_mut(), true);
                    } else {
                        // B is k×n: dB = Aᵀ · G
                        gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), true);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for (o, v) in gbd.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.add_assign(&g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(&g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.add_assign(&g);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += c * v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
                beta,
            } => {
                let d = g.cols();
                let rows = g.rows();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    let ggd = gg.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            ggd[j] += g.row(r)[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    let gbd = gb.data_mut();
                    for r in 0..rows {
                        for (o, v) in gbd.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                let gamma_v = self.value(*gamma).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let grow = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * gamma_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        let out = gx.row_mut(r);
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gi), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let d = g.cols();
                    for (o, v) in gx.data_mut()[start * d..].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, v) in ga.data_mut().iter_mut().zip(&g.data()[..split]) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (o, v) in gb.data_mut().iter_mut().zip(&g.data()[split..]) {
                        *o += v;
                    }
                }
            }
            Op::Attention(cache) => self.backprop_attention(cache, &g, grads),
            Op::MeanRows(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let rows = gx.rows();
                    let c = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o += c * v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let up = g.data()[0];
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (i, (o, p)) in gl.data_mut().iter_mut().zip(probs).enumerate() {
                        let y = if i == *target { 1.0 } else { 0.0 };
                        *o += up * (p - y);
                    }
                }
            }
            Op::MatchLoss { keys, key_grads } => {
                let up = g.data()[0];
                for (k, kg) in keys.iter().zip(key_grads) {
                    if let Some(gk) = self.grad_slot(grads, *k) {
                        for (o, v) in gk.data_mut().iter_mut().zip(kg) {
                            *o += up * v;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let up = g.data()[0];
                for (v, c) in terms {
                    if let Some(gv) = self.grad_slot(grads, *v) {
                        gv.data_mut()[0] += up * c;
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let qv = self.value(c.q);
        let kv = self.value(c.k);
        let vv = self.value(c.v);
        let (rows, d) = (qv.rows(), qv.cols());
        let (pk, pv, plen) = match c.prefix {
            Some((a, b)) => (Some(self.value(a)), Some(self.value(b)), self.value(a).rows()),
            None => (None, None, 0),
        };
        let heads = c.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seq_len = c.seq_len;
        let seqs = rows / seq_len;
        let width = plen + seq_len;

        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dpk = vec![0.0; plen * d];
        let mut dpv = vec![0.0; plen * d];
        let mut ds = vec![0.0; width];

        let key_row = |s: usize, j: usize, off: usize| -> &[f64] {
            if j < plen {
                &pk.unwrap().data()[j * d + off..][..dh]
            } else {
                &kv.data()[(s * seq_len + j - plen) * d + off..][..dh]
            }
        };
        let val_row = |s: usize, j: usize, off: usize| -> &[f64] {
            if j < plen {
                &pv.unwrap().data()[j * d + off..][..dh]
            } else {
                &vv.data()[(s * seq_len + j - plen) * d + off..][..dh]
            }
        };

        for s in 0..seqs {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = s * seq_len + i;
                    let gout = &g.data()[qi * d + off..][..dh];
                    let base = ((s * heads + h) * seq_len + i) * width;
                    let p = &c.probs[base..base + width];
                    let mut weighted = 0.0;
                    for j in 0..width {
                        let dpj = dot(gout, val_row(s, j, off));
                        ds[j] = dpj;
                        weighted += p[j] * dpj;
                        // dV_j += p_ij · dO_i
                        let dvrow = if j < plen {
                            &mut dpv[j * d + off..][..dh]
                        } else {
                            &mut dv[(s * seq_len + j - plen) * d + off..][..dh]
                        };
                        for (o, x) in dvrow.iter_mut().zip(gout) {
                            *o += p[j] * x;
                        }
                    }
                    let qrow = &qv.data()[qi * d + off..][..dh];
                    for j in 0..width {
                        let dsj = p[j] * (ds[j] - weighted) * scale;
                        if dsj == 0.0 {
                            continue;
                        }
                        let krow = key_row(s, j, off);
                        for (o, x) in dq[qi * d + off..][..dh].iter_mut().zip(krow) {
                            *o += dsj * x;
                        }
                        let dkrow = if j < plen {
                            &mut dpk[j * d + off..][..dh]
                        } else {
                            &mut dk[(s * seq_len + j - plen) * d + off..][..dh]
                        };
                        for (o, x) in dkrow.iter_mut().zip(qrow) {
                            *o += dsj * x;
                        }
                    }
                }
            }
        }

        let add = |v: Var, buf: &[f64], grads: &mut [Option<Tensor>]| {
            if let Some(slot) = self.grad_slot(grads, v) {
                for (o, x) in slot.data_mut().iter_mut().zip(buf) {
                    *o += x;
                }
            }
        };
        add(c.q, &dq, grads);
        add(c.k, &dk, grads);
        add(c.v, &dv, grads);
        if let Some((a, b)) = c.prefix {
            add(a, &dpk, grads);
            add(b, &dpv, grads);
        }
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
