//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse. Gradient-scaling hooks multiply the gradient that
//! reaches a node before it is pushed to that node's inputs; forward values
//! never see them.

use std::collections::HashMap;

use super::kernels::{add_assign, axpy, matmul_acc, matmul_nt_acc, matmul_tn_acc, transpose};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

/// Backward-only multiplier on the gradient arriving at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScaleHook {
    pub node: NodeId,
    pub factor: f32,
}

/// Index of an installed hook, returned by [`Graph::attach_grad_scale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookHandle(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { x: NodeId, w: NodeId, trans_w: bool },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
    ScaleByEntry { x: NodeId, g: NodeId, index: usize },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    KeyMask { x: NodeId },
    Softmax { x: NodeId, outer: usize, len: usize, inner: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f32>, inv_std: Vec<f32> },
    Gelu { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f32> },
    Embedding { table: NodeId, ids: Vec<usize> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    MeanPool { x: NodeId, mask: Vec<bool>, counts: Vec<usize> },
    NormalizeRows { x: NodeId, norms: Vec<f32> },
    ConcatCols { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
    SymmetricKl { a: NodeId, b: NodeId, rows: Vec<bool>, pa: Vec<f32>, pb: Vec<f32>, count: usize },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    hooks: Vec<GradScaleHook>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn hooks(&self) -> &[GradScaleHook] {
        &self.hooks
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Installs a backward-only multiplier on `node`'s incoming gradient.
    pub fn attach_grad_scale(&mut self, node: Var, factor: f32) -> Result<HookHandle> {
        if node.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(node.0));
        }
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(Error::Contract(format!(
                "gradient scale factor must be finite and >= 0, got {factor}"
            )));
        }
        self.hooks.push(GradScaleHook {
            node: node.0,
            factor,
        });
        Ok(HookHandle(self.hooks.len() - 1))
    }

    /// `x[.., k] · w[k, n]`, or `x · wᵀ` with `w[n, k]` when `trans_w`.
    pub fn matmul(&mut self, x: Var, w: Var, trans_w: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() {
            return Err(shape_err("matmul", &xs, &ws));
        }
        let (k, n) = if trans_w { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if *xs.last().unwrap() != k {
            return Err(shape_err("matmul", &xs, &ws));
        }
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            if trans_w {
                matmul_nt_acc(xd, wd, &mut out, m, k, n);
            } else {
                matmul_acc(xd, wd, &mut out, m, k, n);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { x: x.0, w: w.0, trans_w }, rg))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            add_assign(row, &bd);
        }
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(value, Op::AddBias { x: x.0, b: b.0 }, rg))
    }

    /// `x · w + b` for `x[*, d_in]`, `w[d_in, d_out]`, `b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.shape(b) != [ws[1]] {
            return Err(shape_err("linear", &ws, self.shape(b)));
        }
        let y = self.matmul(x, w, false)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        add_assign(value.data_mut(), self.value(b).data());
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        for (y, &bv) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *y *= bv;
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let mut value = self.value(x).clone();
        for y in value.data_mut() {
            *y *= c;
        }
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Scale { x: x.0, c }, rg)
    }

    /// Multiplies every element of `x` by the scalar `g[index]`.
    pub fn scale_by_entry(&mut self, x: Var, g: Var, index: usize) -> Result<Var> {
        let gate = *self
            .value(g)
            .data()
            .get(index)
            .ok_or_else(|| Error::Gating(format!("gate index {index} out of range")))?;
        let mut value = self.value(x).clone();
        for y in value.data_mut() {
            *y *= gate;
        }
        let rg = self.rg(&[x.0, g.0]);
        Ok(self.push(value, Op::ScaleByEntry { x: x.0, g: g.0, index }, rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("batch_matmul", &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let n = if trans_b { bs[1] } else { bs[2] };
        let kb = if trans_b { bs[2] } else { bs[1] };
        if kb != k {
            return Err(shape_err("batch_matmul", &as_, &bs));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let ci = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    matmul_nt_acc(ai, bi, ci, m, k, n);
                } else {
                    matmul_acc(ai, bi, ci, m, k, n);
                }
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a: a.0, b: b.0, trans_b },
            rg,
        ))
    }

    /// Adds `-inf` to attention scores `[B, Tq, Tk]` at keys where
    /// `key_mask[b * Tk + t]` is false.
    pub fn key_mask(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || key_mask.len() != s[0] * s[2] {
            return Err(shape_err("key_mask", &s, &[key_mask.len()]));
        }
        let (tq, tk) = (s[1], s[2]);
        let mut value = self.value(x).clone();
        for (r, row) in value.data_mut().chunks_mut(tk).enumerate() {
            let b = r / tq;
            for (t, v) in row.iter_mut().enumerate() {
                if !key_mask[b * tk + t] {
                    *v = f32::NEG_INFINITY;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::KeyMask { x: x.0 }, rg))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!("softmax axis {axis} invalid for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        let mut buf = vec![0.0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(data[idx(j)]);
                }
                let mut sum = 0.0f32;
                for j in 0..len {
                    let e = (data[idx(j)] - mx).exp();
                    buf[j] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[idx(j)] = buf[j] / sum;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Softmax { x: x.0, outer, len, inner }, rg))
    }

    /// Normalizes each row of `x[*, d]` then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let is = (1.0 / (var + eps as f64).sqrt()) as f32;
            inv_std[r] = is;
            let mean = mean as f32;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = gelu(*v);
        }
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Gelu { x: x.0 }, rg)
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without touching `rng`.
    pub fn dropout(&mut self, x: Var, p: f32, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mut value = self.value(x).clone();
        let mut mask = Vec::with_capacity(value.numel());
        for v in value.data_mut() {
            let m = if rng.next_f32() < p { 0.0 } else { keep };
            mask.push(m);
            *v *= m;
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Gathers rows of `table[V, d]`; the result has shape `shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &ts, shape));
        }
        let (v, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, vocab_size: v });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Selects rows of `x` viewed as `[*, d]`; the result is `[rows.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let n = self.value(x).rows();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(shape_err("gather_rows", &[n, d], &[r]));
            }
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows { x: x.0, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Mean of `x[B, T, d]` over positions where `mask[b * T + t]` is true.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(shape_err("mean_pool", &s, &[mask.len()]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * d];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            let orow = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                if mask[bi * t + ti] {
                    counts[bi] += 1;
                    add_assign(orow, &xd[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
                }
            }
            if counts[bi] == 0 {
                return Err(Error::EmptySequence(bi));
            }
            let c = counts[bi] as f32;
            for v in orow.iter_mut() {
                *v /= c;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::MeanPool { x: x.0, mask: mask.to_vec(), counts },
            rg,
        ))
    }

    /// L2-normalizes each row of `x[*, d]`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for (r, row) in value.data_mut().chunks_mut(d).enumerate() {
            let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::SimilarityUndefined(r));
            }
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::NormalizeRows { x: x.0, norms }, rg))
    }

    /// `[N, m] ++ [N, n] -> [N, m + n]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(shape_err("concat_cols", &as_, &bs));
        }
        let (rows, m, n) = (as_[0], as_[1], bs[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(rows * (m + n));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * m..(r + 1) * m]);
            out.extend_from_slice(&bd[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![rows, m + n], out)?, Op::ConcatCols { a: a.0, b: b.0 }, rg))
    }

    /// Mean negative log-softmax of `logits[*, V]` at non-ignored targets.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; rows * v];
        let mut total = 0.0f64;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(Error::Vocabulary { id: t, vocab_size: v });
            }
            let row = &ld[r * v..(r + 1) * v];
            let (lse, mx) = log_sum_exp(row);
            let prow = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = ((x as f64 - mx) - (lse - mx)).exp() as f32;
            }
            total += lse - row[t] as f64;
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count },
            rg,
        ))
    }

    /// Mean over selected rows of ½[KL(p‖q) + KL(q‖p)], with `p`, `q` the
    /// row-wise softmax of `a` and `b`.
    pub fn symmetric_kl(&mut self, a: Var, b: Var, rows_mask: &[bool]) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("symmetric_kl", self.shape(a), self.shape(b)));
        }
        let v = self.value(a).last_dim();
        let rows = self.value(a).rows();
        if rows_mask.len() != rows {
            return Err(shape_err("symmetric_kl", self.shape(a), &[rows_mask.len()]));
        }
        let count = rows_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut pa = vec![0.0f32; rows * v];
        let mut pb = vec![0.0f32; rows * v];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !rows_mask[r] {
                continue;
            }
            let (la, lb) = (&ad[r * v..(r + 1) * v], &bd[r * v..(r + 1) * v]);
            let (lsa, _) = log_sum_exp(la);
            let (lsb, _) = log_sum_exp(lb);
            let mut kl = 0.0f64;
            for j in 0..v {
                let lp = la[j] as f64 - lsa;
                let lq = lb[j] as f64 - lsb;
                let (p, q) = (lp.exp(), lq.exp());
                pa[r * v + j] = p as f32;
                pb[r * v + j] = q as f32;
                kl += (p - q) * (lp - lq);
            }
            total += 0.5 * kl;
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SymmetricKl { a: a.0, b: b.0, rows: rows_mask.to_vec(), pa, pb, count },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    /// Reverse-mode pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut factors: HashMap<NodeId, f32> = HashMap::new();
        for h in &self.hooks {
            *factors.entry(h.node).or_insert(1.0) *= h.factor;
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(mut gy) = grads[id].take() else { continue };
            if let Some(&f) = factors.get(&id) {
                for g in gy.iter_mut() {
                    *g *= f;
                }
            }
            if self.nodes[id].requires_grad {
                self.propagate(id, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: NodeId, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { x, w, trans_w } => {
                let ws = self.nodes[w].value.shape();
                let (k, n) = if trans_w { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
                let m = gy.len() / n.max(1);
                let xd = self.nodes[x].value.data();
                let wd = self.nodes[w].value.data();
                if self.wants(x) {
                    let gx = slot(grads, x, m * k);
                    if trans_w {
                        matmul_acc(gy, wd, gx, m, n, k);
                    } else {
                        let wt = transpose(wd, k, n);
                        matmul_acc(gy, &wt, gx, m, n, k);
                    }
                }
                if self.wants(w) {
                    let gw = slot(grads, w, k * n);
                    if trans_w {
                        matmul_tn_acc(gy, xd, gw, m, n, k);
                    } else {
                        matmul_tn_acc(xd, gy, gw, m, k, n);
                    }
                }
            }
            &Op::AddBias { x, b } => {
                if self.wants(x) {
                    add_assign(slot(grads, x, gy.len()), gy);
                }
                if self.wants(b) {
                    let n = self.nodes[b].value.numel();
                    let gb = slot(grads, b, n);
                    for row in gy.chunks(n) {
                        add_assign(gb, row);
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    add_assign(slot(grads, a, gy.len()), gy);
                }
                if self.wants(b) {
                    add_assign(slot(grads, b, gy.len()), gy);
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if self.wants(a) {
                    let ga = slot(grads, a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * bd[i];
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, gy.len());
                    for i in 0..gy.len() {
                        gb[i] += gy[i] * ad[i];
                    }
                }
            }
            &Op::Scale { x, c } => {
                if self.wants(x) {
                    axpy(c, gy, slot(grads, x, gy.len()));
                }
            }
            &Op::ScaleByEntry { x, g, index } => {
                let gd = self.nodes[g].value.data();
                if self.wants(x) {
                    axpy(gd[index], gy, slot(grads, x, gy.len()));
                }
                if self.wants(g) {
                    let xd = self.nodes[x].value.data();
                    let s: f64 = xd.iter().zip(gy).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let len = gd.len();
                    slot(grads, g, len)[index] += s as f32;
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let as_ = self.nodes[a].value.shape();
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = gy.len() / (batch * m).max(1);
                let ad = self.nodes[a].value.data();
                let bd = self.nodes[b].value.data();
                if self.wants(a) {
                    let ga = slot(grads, a, batch * m * k);
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            matmul_acc(gyi, bi, gai, m, n, k);
                        } else {
                            let bt = transpose(bi, k, n);
                            matmul_acc(gyi, &bt, gai, m, n, k);
                        }
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, batch * k * n);
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            matmul_tn_acc(gyi, ai, gbi, m, n, k);
                        } else {
                            matmul_tn_acc(ai, gyi, gbi, m, k, n);
                        }
                    }
                }
            }
            &Op::KeyMask { x } => {
                if self.wants(x) {
                    let y = node.value.data();
                    let gx = slot(grads, x, gy.len());
                    for i in 0..gy.len() {
                        if y[i] != f32::NEG_INFINITY {
                            gx[i] += gy[i];
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if self.wants(x) {
                    let y = node.value.data();
                    let gx = slot(grads, x, gy.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0f32;
                            for j in 0..len {
                                dot += gy[idx(j)] * y[idx(j)];
                            }
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (gy[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.nodes[gamma].value.numel();
                let gd = self.nodes[gamma].value.data();
                let rows = gy.len() / d;
                if self.wants(gamma) {
                    let gg = slot(grads, gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(beta) {
                    let gb = slot(grads, beta, d);
                    for row in gy.chunks(d) {
                        add_assign(gb, row);
                    }
                }
                if self.wants(x) {
                    let gx = slot(grads, x, gy.len());
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0f32;
                        let mut mean_dx = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = gy[r * d + j] * gd[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[r * d + j];
                        }
                        mean_d /= d as f32;
                        mean_dx /= d as f32;
                        for j in 0..d {
                            gx[r * d + j] +=
                                inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                if self.wants(x) {
                    let xd = self.nodes[x].value.data();
                    let gx = slot(grads, x, gy.len());
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * gelu_grad(xd[i]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, gy.len());
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * mask[i];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let n = self.nodes[*table].value.numel();
                    let d = self.nodes[*table].value.last_dim();
                    let gt = slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut gt[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    let d = self.nodes[*x].value.last_dim();
                    let gx = slot(grads, *x, n);
                    for (i, &r) in rows.iter().enumerate() {
                        add_assign(&mut gx[r * d..(r + 1) * d], &gy[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::MeanPool { x, mask, counts } => {
                if self.wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let gx = slot(grads, *x, b * t * d);
                    for bi in 0..b {
                        let inv = 1.0 / counts[bi] as f32;
                        for ti in 0..t {
                            if mask[bi * t + ti] {
                                let off = (bi * t + ti) * d;
                                axpy(inv, &gy[bi * d..(bi + 1) * d], &mut gx[off..off + d]);
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = slot(grads, *x, gy.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            &Op::ConcatCols { a, b } => {
                let m = self.nodes[a].value.last_dim();
                let n = self.nodes[b].value.last_dim();
                let rows = self.nodes[a].value.rows();
                if self.wants(a) {
                    let ga = slot(grads, a, rows * m);
                    for r in 0..rows {
                        add_assign(&mut ga[r * m..(r + 1) * m], &gy[r * (m + n)..r * (m + n) + m]);
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, rows * n);
                    for r in 0..rows {
                        add_assign(
                            &mut gb[r * n..(r + 1) * n],
                            &gy[r * (m + n) + m..(r + 1) * (m + n)],
                        );
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.wants(*logits) {
                    let v = self.nodes[*logits].value.last_dim();
                    let scale = gy[0] / *count as f32;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::SymmetricKl { a, b, rows, pa, pb, count } => {
                let v = self.nodes[*a].value.last_dim();
                let scale = gy[0] as f64 * 0.5 / *count as f64;
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let mut ga_acc = if wa { Some(vec![0.0f32; pa.len()]) } else { None };
                let mut gb_acc = if wb { Some(vec![0.0f32; pa.len()]) } else { None };
                for (r, &on) in rows.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let p = &pa[r * v..(r + 1) * v];
                    let q = &pb[r * v..(r + 1) * v];
                    // r_j = log p_j - log q_j, taken from the logits to avoid log(0).
                    let la = &self.nodes[*a].value.data()[r * v..(r + 1) * v];
                    let lb = &self.nodes[*b].value.data()[r * v..(r + 1) * v];
                    let (lsa, _) = log_sum_exp(la);
                    let (lsb, _) = log_sum_exp(lb);
                    let ratio: Vec<f64> = (0..v)
                        .map(|j| (la[j] as f64 - lsa) - (lb[j] as f64 - lsb))
                        .collect();
                    let kl_pq: f64 = (0..v).map(|j| p[j] as f64 * ratio[j]).sum();
                    let kl_qp: f64 = (0..v).map(|j| -(q[j] as f64) * ratio[j]).sum();
                    for j in 0..v {
                        let (pj, qj) = (p[j] as f64, q[j] as f64);
                        if let Some(ga) = ga_acc.as_mut() {
                            ga[r * v + j] = (scale * (pj * (ratio[j] - kl_pq) + (pj - qj))) as f32;
                        }
                        if let Some(gb) = gb_acc.as_mut() {
                            gb[r * v + j] =
                                (scale * (qj * (-ratio[j] - kl_qp) + (qj - pj))) as f32;
                        }
                    }
                }
                if let Some(ga) = ga_acc {
                    add_assign(slot(grads, *a, ga.len()), &ga);
                }
                if let Some(gb) = gb_acc {
                    add_assign(slot(grads, *b, gb.len()), &gb);
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    let n = self.nodes[x].value.numel();
                    let gx = slot(grads, x, n);
                    for g in gx.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], id: NodeId, len: usize) -> &mut [f32] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Returns `(log Σ exp(x), max(x))` accumulated in f64.
fn log_sum_exp(row: &[f32]) -> (f64, f64) {
    let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
    (mx + s.ln(), mx)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
