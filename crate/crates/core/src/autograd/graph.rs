//! Tape of executed operations with a reverse pass.
//!
//! Every op evaluates eagerly and appends a node. Nodes are only ever
//! appended, so creation order is a valid topological order and the
//! reverse pass walks the tape backwards.

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    /// Batched product over a leading group axis; `trans_b` multiplies by `bᵀ`.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    /// `b` repeated over the leading axes of `a`.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    MaskedSoftmax { a: Var, w: Var, max: Vec<f64>, sum: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SplitHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    Concat(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    SelectLast { x: Var, index: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Not shareable across threads while being built.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain {
            op,
            detail: format!("non-finite input value {v}"),
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; its `requires_grad` flag decides whether gradients reach it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.zero_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Trainable leaf holding a copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("shape already valid");
        t.set_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Non-trainable leaf holding a copy of `tensor`.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("shape already valid");
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn derived(&self, data: Vec<f64>, shape: &[usize], inputs: &[Var]) -> Tensor {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.set_requires_grad(inputs.iter().any(|&v| self.requires_grad(v)));
        t
    }

    fn record(&mut self, data: Vec<f64>, shape: &[usize], inputs: &[Var], op: Op) -> Var {
        let t = self.derived(data, shape, inputs);
        self.push(t, op)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.record(out, &[m, n], &[a, b], Op::MatMul(a, b)))
    }

    /// `a[G,m,k] · b[G,k,n]`, or `a[G,m,k] · b[G,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for gi in 0..g {
            let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
            let b_blk = &bd[gi * k * n..(gi + 1) * k * n];
            let c_blk = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(a_blk, b_blk, c_blk, m, k, n);
            } else {
                gemm_nn(a_blk, b_blk, c_blk, m, k, n);
            }
        }
        Ok(self.record(out, &[g, m, n], &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(out, &shape, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(out, &shape, &[a, b], Op::Sub(a, b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bd = self.data(b);
        let out = self
            .data(a)
            .chunks_exact(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.record(out, &shape, &[a, b], Op::AddBroadcast(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(out, &shape, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.record(out, &shape, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        self.record(out, &shape, &[a], Op::AddScalar(a))
    }

    /// Elementwise clamp into `[lo, hi]`; clipped entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        self.record(out, &shape, &[a], Op::Clamp { x: a, lo, hi })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(out, &shape, &[a], Op::Gelu(a))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.record(out, &shape, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    // ── softmax family ──────────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        let k = self.value(a).last_dim();
        if k == 0 {
            return Err(Error::shape("softmax_row", self.shape(a), &[1]));
        }
        check_finite("softmax_row", self.data(a))?;
        let mut out = vec![0.0; self.value(a).numel()];
        for (row, o) in self.data(a).chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            kernels::weighted_softmax_row(row, None, o);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(out, &shape, &[a], Op::Softmax(a)))
    }

    /// Softmax over the last axis where entry `j` is scaled by `weights[j]`
    /// before normalization. Zero-weight entries come out as exactly `0.0`.
    pub fn masked_softmax_row(&mut self, a: Var, weights: Var) -> Result<Var> {
        let k = self.value(a).last_dim();
        if k == 0 || self.shape(weights) != [k] {
            return Err(Error::shape("masked_softmax_row", self.shape(a), self.shape(weights)));
        }
        check_finite("masked_softmax_row", self.data(a))?;
        let w = self.data(weights);
        if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::NumericDomain {
                op: "masked_softmax_row",
                detail: format!("mask weight {bad} outside [0, 1]"),
            });
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateMask);
        }
        let n = self.value(a).numel();
        let mut out = vec![0.0; n];
        let rows = n / k;
        let mut max = Vec::with_capacity(rows);
        let mut sum = Vec::with_capacity(rows);
        for (row, o) in self.data(a).chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            let (c, s) = kernels::weighted_softmax_row(row, Some(w), o);
            max.push(c);
            sum.push(s);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(out, &shape, &[a, weights], Op::MaskedSoftmax { a, w: weights, max, sum }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        check_finite("cross_entropy", self.data(logits))?;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, (row, p)) in self.data(logits).chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let (max, sum) = kernels::weighted_softmax_row(row, None, p);
            loss += max + sum.ln() - row[labels[i]];
        }
        loss /= b as f64;
        Ok(self.record(
            vec![loss],
            &[],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.record(vec![s], &[], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.record(vec![s], &[], &[a], Op::Mean(a))
    }

    // ── layout ──────────────────────────────────────────────────────────

    /// `[B·T, H·dk]` → `[B·H, T, dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * tokens || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", s, &[batch * tokens, heads]));
        }
        let d = s[1];
        let dk = d / heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..tokens {
                let src = &xd[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * tokens + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&src[h * dk..(h + 1) * dk]);
                }
            }
        }
        Ok(self.record(out, &[batch * heads, tokens, dk], &[x], Op::SplitHeads { x, batch, tokens, heads }))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads || s[1] != tokens {
            return Err(Error::shape("merge_heads", s, &[batch * heads, tokens]));
        }
        let dk = s[2];
        let d = dk * heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let src = ((b * heads + h) * tokens + t) * dk;
                    let dst = (b * tokens + t) * d + h * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        Ok(self.record(out, &[batch * tokens, d], &[x], Op::MergeHeads { x, batch, tokens, heads }))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail: Vec<usize> = self.shape(*first).iter().skip(1).copied().collect();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.record(out, &shape, parts, Op::Concat(parts.to_vec())))
    }

    /// Selects (possibly repeated) slices along the first axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", &s, &[rows.len()]));
        }
        let width = numel(&s[1..]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: s[0],
                });
            }
            out.extend_from_slice(&xd[r * width..(r + 1) * width]);
        }
        let mut shape = s.clone();
        shape[0] = rows.len();
        Ok(self.record(out, &shape, &[x], Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Picks entry `index` of every last-axis slice, dropping that axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::shape("select_last", &s, &[index]))?;
        if index >= k {
            return Err(Error::Index {
                what: "last axis",
                index,
                bound: k,
            });
        }
        let out = self.data(x).chunks_exact(k).map(|row| row[index]).collect();
        Ok(self.record(out, &s[..s.len() - 1], &[x], Op::SelectLast { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.record(out, shape, &[x], Op::Reshape(x)))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every node that requires a
    /// gradient. Calling twice without [`Graph::zero_grad`] adds the second
    /// pass on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.requires_grad(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| gemm_nt(g, bd, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(ad, g, gb, k, m, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let trans_b = *trans_b;
                acc(*a, &mut |ga| {
                    for gi in 0..groups {
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            // c = a·bᵀ, b is [n,k]: da = dc·b
                            gemm_nn(gc, bb, out, m, n, k);
                        } else {
                            // c = a·b, b is [k,n]: da = dc·bᵀ
                            gemm_nt(gc, bb, out, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..groups {
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let aa = &ad[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // db[n,k] = dcᵀ·a
                            gemm_tn(gc, aa, out, n, m, k);
                        } else {
                            // db[k,n] = aᵀ·dc
                            gemm_tn(aa, gc, out, k, m, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let w = gb.len();
                    for chunk in g.chunks_exact(w) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((x, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > *lo && v < *hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((x, gv), &av) in ga.iter_mut().zip(g).zip(ad) {
                        *x += gv * kernels::gelu_grad(av);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).numel();
                let gd = self.data(*gain);
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dx = 0.0;
                        let mut mean_dxh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                            mean_dx += dxhat[j];
                            mean_dxh += dxhat[j] * hr[j];
                        }
                        mean_dx /= d as f64;
                        mean_dxh /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - mean_dx - hr[j] * mean_dxh);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Softmax(a) => {
                let k = node.value.last_dim();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((gr, yr), out) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(ga.chunks_exact_mut(k)) {
                        let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            out[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { a, w, max, sum } => {
                let k = node.value.last_dim();
                let y = node.value.data();
                let inners: Vec<f64> = g
                    .chunks_exact(k)
                    .zip(y.chunks_exact(k))
                    .map(|(gr, yr)| gr.iter().zip(yr).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*a, &mut |ga| {
                    for (r, out) in ga.chunks_exact_mut(k).enumerate() {
                        let gr = &g[r * k..(r + 1) * k];
                        let yr = &y[r * k..(r + 1) * k];
                        for j in 0..k {
                            out[j] += yr[j] * (gr[j] - inners[r]);
                        }
                    }
                });
                let ad = self.data(*a);
                acc(*w, &mut |gw| {
                    // d y_j / d w_k = exp(a_k - c) / S · (δ_jk - y_j)
                    for (r, inner) in inners.iter().enumerate() {
                        let gr = &g[r * k..(r + 1) * k];
                        let ar = &ad[r * k..(r + 1) * k];
                        for j in 0..k {
                            let e = (ar[j] - max[r]).exp() / sum[r];
                            gw[j] += e * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s)
            }),
            Op::SplitHeads { x, batch, tokens, heads } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let dk = node.value.shape()[2];
                let d = dk * heads;
                acc(*x, &mut |gx| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let src = ((b * heads + h) * tokens + t) * dk;
                                let dst = (b * tokens + t) * d + h * dk;
                                add_into(&mut gx[dst..dst + dk], &g[src..src + dk]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, tokens, heads } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let d = node.value.shape()[1];
                let dk = d / heads;
                acc(*x, &mut |gx| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let dst = ((b * heads + h) * tokens + t) * dk;
                                let src = (b * tokens + t) * d + h * dk;
                                add_into(&mut gx[dst..dst + dk], &g[src..src + dk]);
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let width = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                acc(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * width..(r + 1) * width], &g[i * width..(i + 1) * width]);
                    }
                });
            }
            Op::SelectLast { x, index } => {
                let k = self.value(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (row, gv) in gx.chunks_exact_mut(k).zip(g) {
                        row[*index] += gv;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
