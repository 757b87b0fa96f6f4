//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep simply walks it in reverse.

use std::collections::HashMap;

use super::array::{gemm, DArray};
use super::params::{ParamId, ParamStore};
use super::rng::RngState;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    LayerNorm { x: Var, affine: Option<(Var, Var)>, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Dropout(Var, Vec<f64>),
    AttnScores { q: Var, k: Var, batch: usize, heads: usize, scale: f64 },
    AttnApply { w: Var, v: Var, batch: usize, heads: usize },
    Conv1d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    ConvMaxPool { x: Var, w: Var, b: Var, pool: usize, argmax: Vec<usize> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRow(Var),
    GroupMeanRows(Var, usize),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: DArray,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf inputs created with [`Graph::input`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, DArray>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DArray> {
        self.leaves.get(&v)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
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

    pub fn value(&self, v: Var) -> &DArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.rg(v))
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: DArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: DArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf. Gradients flow back into `store` unless the parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), !store.is_frozen(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg_any(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = DArray::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect(),
        )
        .expect("same shape");
        let rg = self.rg_any(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = DArray::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        )
        .expect("same shape");
        let rg = self.rg_any(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `[m]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = self.value(a).cols();
        assert_eq!(self.value(row).len(), m, "add_row width mismatch");
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg_any(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `[n,k] x [k,m] -> [n,m]`; `a` may have any leading shape with last axis `k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let bs = self.shape(b);
        assert_eq!(bs.len(), 2, "matmul rhs must be 2-D");
        assert_eq!(bs[0], k, "matmul inner dimension mismatch");
        let m = bs[1];
        let mut out = DArray::zeros(&[n, m]);
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), false);
        let rg = self.rg_any(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let src = self.value(a).data();
        let mut out = DArray::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                out.data_mut()[j * n + i] = src[i * m + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Row-wise layer normalization with population variance; `affine` is `(gamma, beta)`.
    pub fn layernorm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Var {
        let d = self.value(x).cols();
        let rows = self.value(x).rows();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let (gv, bv) = (self.value(g).data(), self.value(b).data());
            assert_eq!(gv.len(), d, "layernorm gamma width");
            for chunk in out.chunks_mut(d) {
                for ((o, gg), bb) in chunk.iter_mut().zip(gv).zip(bv) {
                    *o = *o * gg + bb;
                }
            }
        }
        let out = DArray::new(self.shape(x).to_vec(), out).expect("same shape");
        let mut deps = vec![x];
        if let Some((g, b)) = affine {
            deps.extend([g, b]);
        }
        let rg = self.rg_any(&deps);
        self.push(out, Op::LayerNorm { x, affine, xhat, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Inverted dropout. With `rng == None` or `p == 0` this is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut RngState>) -> Var {
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let out = DArray::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout(x, mask), rg)
    }

    /// Scaled per-head dot products. `q` is `[batch*nq, d]`, `k` is `[batch*nk, d]`;
    /// the result is `[batch, heads, nq, nk]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, heads: usize, scale: f64) -> Var {
        let d = self.value(q).cols();
        assert_eq!(self.value(k).cols(), d, "attention q/k width mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let nq = self.value(q).rows() / batch;
        let nk = self.value(k).rows() / batch;
        assert_eq!(nq * batch, self.value(q).rows(), "q rows not divisible by batch");
        assert_eq!(nk * batch, self.value(k).rows(), "k rows not divisible by batch");
        let dh = d / heads;
        let mut out = DArray::zeros(&[batch, heads, nq, nk]);
        {
            let (qd, kd) = (self.value(q).data(), self.value(k).data());
            let od = out.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    let qo = b * nq * d + h * dh;
                    let ko = b * nk * d + h * dh;
                    let oo = (b * heads + h) * nq * nk;
                    strided_gemm(
                        nq, dh, nk, scale,
                        &qd[qo..], d as isize, 1,
                        &kd[ko..], 1, d as isize,
                        0.0, &mut od[oo..], nk as isize, 1,
                    );
                }
            }
        }
        let rg = self.rg_any(&[q, k]);
        self.push(out, Op::AttnScores { q, k, batch, heads, scale }, rg)
    }

    /// Applies `[batch, heads, nq, nk]` weights to `v: [batch*nk, d]`, giving `[batch*nq, d]`.
    pub fn attn_apply(&mut self, w: Var, v: Var) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "attention weights must be 4-D");
        let (batch, heads, nq, nk) = (ws[0], ws[1], ws[2], ws[3]);
        let d = self.value(v).cols();
        assert_eq!(self.value(v).rows(), batch * nk, "value rows mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let mut out = DArray::zeros(&[batch * nq, d]);
        {
            let (wd, vd) = (self.value(w).data(), self.value(v).data());
            let od = out.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    let wo = (b * heads + h) * nq * nk;
                    let vo = b * nk * d + h * dh;
                    let oo = b * nq * d + h * dh;
                    strided_gemm(
                        nq, nk, dh, 1.0,
                        &wd[wo..], nk as isize, 1,
                        &vd[vo..], d as isize, 1,
                        0.0, &mut od[oo..], d as isize, 1,
                    );
                }
            }
        }
        let rg = self.rg_any(&[w, v]);
        self.push(out, Op::AttnApply { w, v, batch, heads }, rg)
    }

    /// Cross-correlation of each row of `x: [c, l]` with `w: [f, k]` plus `b: [f]`,
    /// "same" zero padding; output `[c, f, l]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (c, l) = (self.value(x).rows(), self.value(x).cols());
        let (f, k) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(self.value(b).len(), f, "conv bias width");
        let pre = conv_columns(self.value(x).data(), c, l, self.value(w).data(), f, k, self.value(b).data());
        let mut out = DArray::zeros(&[c, f, l]);
        let od = out.data_mut();
        for ci in 0..c {
            for t in 0..l {
                for fi in 0..f {
                    od[(ci * f + fi) * l + t] = pre[(ci * l + t) * f + fi];
                }
            }
        }
        let rg = self.rg_any(&[x, w, b]);
        self.push(out, Op::Conv1d { x, w, b }, rg)
    }

    /// Max over the whole last axis: `[.., l] -> [..]`.
    pub fn max_pool(&mut self, x: Var) -> Var {
        let l = self.value(x).cols();
        let src = self.value(x).data();
        let mut vals = Vec::with_capacity(src.len() / l);
        let mut argmax = Vec::with_capacity(src.len() / l);
        for (r, row) in src.chunks(l).enumerate() {
            let (i, v) = argmax_of(row);
            vals.push(v);
            argmax.push(r * l + i);
        }
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        let out = DArray::new(shape, vals).expect("pooled shape");
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Fused "same" conv1d followed by max pooling over windows of `pool` samples.
    /// Output is `[c, f * (l / pool)]` with filter-major layout.
    pub fn conv_maxpool(&mut self, x: Var, w: Var, b: Var, pool: usize) -> Var {
        let (c, l) = (self.value(x).rows(), self.value(x).cols());
        let (f, k) = (self.shape(w)[0], self.shape(w)[1]);
        assert!(pool >= 1 && l % pool == 0, "pool must divide the chunk length");
        let np = l / pool;
        let pre = conv_columns(self.value(x).data(), c, l, self.value(w).data(), f, k, self.value(b).data());
        let mut vals = vec![f64::NEG_INFINITY; c * f * np];
        let mut argmax = vec![0usize; c * f * np];
        for ci in 0..c {
            for t in 0..l {
                let j = t / pool;
                let row = &pre[(ci * l + t) * f..(ci * l + t + 1) * f];
                for (fi, &v) in row.iter().enumerate() {
                    let o = (ci * f + fi) * np + j;
                    if v > vals[o] {
                        vals[o] = v;
                        argmax[o] = t;
                    }
                }
            }
        }
        let out = DArray::new(vec![c, f * np], vals).expect("pooled shape");
        let rg = self.rg_any(&[x, w, b]);
        self.push(out, Op::ConvMaxPool { x, w, b, pool, argmax }, rg)
    }

    /// Selects (and possibly repeats or reorders) rows.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let m = self.value(x).cols();
        let n = self.value(x).rows();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in &idx {
            assert!(i < n, "gather index {i} out of {n} rows");
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let out = DArray::new(vec![idx.len(), m], data).expect("gather shape");
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), m, "concat_rows width mismatch");
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let out = DArray::new(vec![rows, m], data).expect("concat shape");
        let rg = self.rg_any(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            assert_eq!(self.value(p).rows(), n, "concat_cols row mismatch");
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = DArray::new(vec![n, total], data).expect("concat shape");
        let rg = self.rg_any(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Broadcasts a vector into `n` identical rows.
    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row).data().to_vec();
        let m = r.len();
        let data: Vec<f64> = (0..n).flat_map(|_| r.iter().copied()).collect();
        let out = DArray::new(vec![n, m], data).expect("repeat shape");
        let rg = self.rg(row);
        self.push(out, Op::RepeatRow(row), rg)
    }

    /// Mean over consecutive row groups: `[groups*n, m] -> [groups, m]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: usize) -> Var {
        let rows = self.value(x).rows();
        let m = self.value(x).cols();
        assert!(groups > 0 && rows % groups == 0, "rows not divisible into groups");
        let n = rows / groups;
        let src = self.value(x).data();
        let mut data = vec![0.0; groups * m];
        for g in 0..groups {
            for r in 0..n {
                let row = &src[(g * n + r) * m..(g * n + r + 1) * m];
                for (o, v) in data[g * m..(g + 1) * m].iter_mut().zip(row) {
                    *o += v / n as f64;
                }
            }
        }
        let out = DArray::new(vec![groups, m], data).expect("mean shape");
        let rg = self.rg(x);
        self.push(out, Op::GroupMeanRows(x, groups), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let m = self.value(x).cols();
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(m) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = DArray::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-weights[i] * log softmax(logits[i])[labels[i]]`.
    ///
    /// `exclude`, when given, removes entries (row-major, same size as logits)
    /// from the softmax normalizer.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
        exclude: Option<&[bool]>,
    ) -> Var {
        let (n, k) = (self.value(logits).rows(), self.value(logits).cols());
        assert_eq!(labels.len(), n, "one label per row");
        assert_eq!(weights.len(), n, "one weight per row");
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let ex = exclude.map(|e| &e[i * k..(i + 1) * k]);
            let kept = |j: usize| ex.is_none_or(|e| !e[j]);
            assert!(labels[i] < k && kept(labels[i]), "label must be a kept class");
            let max = (0..k).filter(|&j| kept(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).filter(|&j| kept(j)).map(|j| (row[j] - max).exp()).sum();
            for j in 0..k {
                if kept(j) {
                    probs[i * k + j] = (row[j] - max).exp() / z;
                }
            }
            let logp = row[labels[i]] - max - z.ln();
            total -= weights[i] * logp;
        }
        let out = DArray::scalar(total / n as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added into
    /// `store` (if given); gradients of [`Graph::input`] leaves are returned.
    pub fn backward(&self, loss: Var, mut store: Option<&mut ParamStore>) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<DArray>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DArray::full(self.shape(loss), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient at node {i} ({})", op_name(&node.op))));
            }
            self.backprop_node(Var(i), g, &mut grads, &mut out, store.as_deref_mut());
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        this: Var,
        g: DArray,
        grads: &mut [Option<DArray>],
        out: &mut Gradients,
        store: Option<&mut ParamStore>,
    ) {
        let node = &self.nodes[this.0];
        let mut acc = |v: Var, d: DArray| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            debug_assert!(v.0 < this.0, "graph edges point backwards");
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(this, g);
            }
            Op::Param(id) => {
                if let Some(s) = store {
                    s.accumulate_grad(*id, &g);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let da = zip_map(&g, val(*b), |x, y| x * y);
                let db = zip_map(&g, val(*a), |x, y| x * y);
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddRow(a, row) => {
                let m = g.cols();
                let mut dr = vec![0.0; m];
                for chunk in g.data().chunks(m) {
                    for (o, v) in dr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                acc(*row, DArray::new(val(*row).shape().to_vec(), dr).expect("row shape"));
                acc(*a, g);
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                if self.rg(*a) {
                    let mut da = DArray::zeros(val(*a).shape());
                    gemm(n, m, k, g.data(), false, val(*b).data(), true, da.data_mut(), false);
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = DArray::zeros(&[k, m]);
                    gemm(k, n, m, val(*a).data(), true, g.data(), false, db.data_mut(), false);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut d = DArray::zeros(&[n, m]);
                for i in 0..m {
                    for j in 0..n {
                        d.data_mut()[j * m + i] = g.data()[i * n + j];
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, affine, xhat, inv_std } => {
                let d = g.cols();
                let rows = g.rows();
                let gd = g.data();
                let mut dxhat = gd.to_vec();
                if let Some((gamma, beta)) = affine {
                    let gv = val(*gamma).data();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gi = gd[r * d + j];
                            dgamma[j] += gi * xhat[r * d + j];
                            dbeta[j] += gi;
                            dxhat[r * d + j] = gi * gv[j];
                        }
                    }
                    acc(*gamma, DArray::new(vec![d], dgamma).expect("gamma"));
                    acc(*beta, DArray::new(vec![d], dbeta).expect("beta"));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let dh = &dxhat[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                        }
                    }
                    acc(*x, DArray::new(val(*x).shape().to_vec(), dx).expect("ln shape"));
                }
            }
            Op::Gelu(x) => {
                let d = zip_map(&g, val(*x), |gi, v| {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                });
                acc(*x, d);
            }
            Op::Relu(x) => acc(*x, zip_map(&g, val(*x), |gi, v| if v > 0.0 { gi } else { 0.0 })),
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = g.clone();
                for (dr, yr) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, yy) in dr.iter_mut().zip(yr) {
                        *o = yy * (*o - dot);
                    }
                }
                acc(*x, d);
            }
            Op::Dropout(x, mask) => {
                let mut d = g;
                d.data_mut().iter_mut().zip(mask).for_each(|(o, m)| *o *= m);
                acc(*x, d);
            }
            Op::AttnScores { q, k, batch, heads, scale } => {
                let (batch, heads, scale) = (*batch, *heads, *scale);
                let d = val(*q).cols();
                let dh = d / heads;
                let nq = val(*q).rows() / batch;
                let nk = val(*k).rows() / batch;
                let gd = g.data();
                if self.rg(*q) {
                    let mut dq = DArray::zeros(val(*q).shape());
                    let kd = val(*k).data();
                    for b in 0..batch {
                        for h in 0..heads {
                            let go = (b * heads + h) * nq * nk;
                            strided_gemm(
                                nq, nk, dh, scale,
                                &gd[go..], nk as isize, 1,
                                &kd[b * nk * d + h * dh..], d as isize, 1,
                                1.0, &mut dq.data_mut()[b * nq * d + h * dh..], d as isize, 1,
                            );
                        }
                    }
                    acc(*q, dq);
                }
                if self.rg(*k) {
                    let mut dk = DArray::zeros(val(*k).shape());
                    let qd = val(*q).data();
                    for b in 0..batch {
                        for h in 0..heads {
                            let go = (b * heads + h) * nq * nk;
                            strided_gemm(
                                nk, nq, dh, scale,
                                &gd[go..], 1, nk as isize,
                                &qd[b * nq * d + h * dh..], d as isize, 1,
                                1.0, &mut dk.data_mut()[b * nk * d + h * dh..], d as isize, 1,
                            );
                        }
                    }
                    acc(*k, dk);
                }
            }
            Op::AttnApply { w, v, batch, heads } => {
                let (batch, heads) = (*batch, *heads);
                let ws = val(*w).shape();
                let (nq, nk) = (ws[2], ws[3]);
                let d = val(*v).cols();
                let dh = d / heads;
                let gd = g.data();
                if self.rg(*w) {
                    let mut dw = DArray::zeros(ws);
                    let vd = val(*v).data();
                    for b in 0..batch {
                        for h in 0..heads {
                            strided_gemm(
                                nq, dh, nk, 1.0,
                                &gd[b * nq * d + h * dh..], d as isize, 1,
                                &vd[b * nk * d + h * dh..], 1, d as isize,
                                0.0, &mut dw.data_mut()[(b * heads + h) * nq * nk..], nk as isize, 1,
                            );
                        }
                    }
                    acc(*w, dw);
                }
                if self.rg(*v) {
                    let mut dv = DArray::zeros(val(*v).shape());
                    let wd = val(*w).data();
                    for b in 0..batch {
                        for h in 0..heads {
                            strided_gemm(
                                nk, nq, dh, 1.0,
                                &wd[(b * heads + h) * nq * nk..], 1, nk as isize,
                                &gd[b * nq * d + h * dh..], d as isize, 1,
                                1.0, &mut dv.data_mut()[b * nk * d + h * dh..], d as isize, 1,
                            );
                        }
                    }
                    acc(*v, dv);
                }
            }
            Op::Conv1d { x, w, b } => {
                let (c, l) = (val(*x).rows(), val(*x).cols());
                let (f, k) = (val(*w).shape()[0], val(*w).shape()[1]);
                let pad = same_pad(k);
                let (xd, wd, gd) = (val(*x).data(), val(*w).data(), g.data());
                let mut dx = vec![0.0; c * l];
                let mut dw = vec![0.0; f * k];
                let mut db = vec![0.0; f];
                for ci in 0..c {
                    for fi in 0..f {
                        for t in 0..l {
                            let gi = gd[(ci * f + fi) * l + t];
                            db[fi] += gi;
                            for kk in 0..k {
                                let s = t as isize + kk as isize - pad as isize;
                                if s >= 0 && (s as usize) < l {
                                    dw[fi * k + kk] += gi * xd[ci * l + s as usize];
                                    dx[ci * l + s as usize] += gi * wd[fi * k + kk];
                                }
                            }
                        }
                    }
                }
                acc(*x, DArray::new(val(*x).shape().to_vec(), dx).expect("x"));
                acc(*w, DArray::new(vec![f, k], dw).expect("w"));
                acc(*b, DArray::new(vec![f], db).expect("b"));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = DArray::zeros(val(*x).shape());
                for (gi, &a) in g.data().iter().zip(argmax) {
                    d.data_mut()[a] += gi;
                }
                acc(*x, d);
            }
            Op::ConvMaxPool { x, w, b, pool, argmax } => {
                let (c, l) = (val(*x).rows(), val(*x).cols());
                let (f, k) = (val(*w).shape()[0], val(*w).shape()[1]);
                let np = l / pool;
                let pad = same_pad(k);
                let (xd, wd, gd) = (val(*x).data(), val(*w).data(), g.data());
                let need_x = self.rg(*x);
                let mut dx = if need_x { vec![0.0; c * l] } else { Vec::new() };
                let mut dw = vec![0.0; f * k];
                let mut db = vec![0.0; f];
                for ci in 0..c {
                    for fi in 0..f {
                        for j in 0..np {
                            let o = (ci * f + fi) * np + j;
                            let gi = gd[o];
                            if gi == 0.0 {
                                continue;
                            }
                            let t = argmax[o];
                            db[fi] += gi;
                            for kk in 0..k {
                                let s = t as isize + kk as isize - pad as isize;
                                if s >= 0 && (s as usize) < l {
                                    dw[fi * k + kk] += gi * xd[ci * l + s as usize];
                                    if need_x {
                                        dx[ci * l + s as usize] += gi * wd[fi * k + kk];
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    acc(*x, DArray::new(val(*x).shape().to_vec(), dx).expect("x"));
                }
                acc(*w, DArray::new(vec![f, k], dw).expect("w"));
                acc(*b, DArray::new(vec![f], db).expect("b"));
            }
            Op::GatherRows(x, idx) => {
                let m = g.cols();
                let mut d = DArray::zeros(val(*x).shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * m..(r + 1) * m];
                    for (o, v) in d.row_mut(i).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    let d = DArray::new(val(p).shape().to_vec(), g.data()[off..off + n].to_vec())
                        .expect("part shape");
                    off += n;
                    acc(p, d);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    acc(p, DArray::new(val(p).shape().to_vec(), d).expect("part shape"));
                }
            }
            Op::RepeatRow(row) => {
                let m = g.cols();
                let mut d = vec![0.0; m];
                for chunk in g.data().chunks(m) {
                    for (o, v) in d.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                acc(*row, DArray::new(val(*row).shape().to_vec(), d).expect("row"));
            }
            Op::GroupMeanRows(x, groups) => {
                let rows = val(*x).rows();
                let m = g.cols();
                let n = rows / groups;
                let mut d = DArray::zeros(val(*x).shape());
                for gi in 0..*groups {
                    let src = &g.data()[gi * m..(gi + 1) * m];
                    for r in 0..n {
                        for (o, v) in d.row_mut(gi * n + r).iter_mut().zip(src) {
                            *o = v / n as f64;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let m = y.cols();
                let mut d = g.clone();
                for ((dr, yr), n) in d.data_mut().chunks_mut(m).zip(y.data().chunks(m)).zip(norms) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, yy) in dr.iter_mut().zip(yr) {
                        *o = (*o - yy * dot) / n;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, DArray::full(val(*x).shape(), g.item())),
            Op::CrossEntropy { logits, labels, weights, probs } => {
                let k = val(*logits).cols();
                let n = labels.len();
                let s = g.item() / n as f64;
                let mut d = probs.clone();
                for i in 0..n {
                    let wi = weights[i] * s;
                    for v in &mut d[i * k..(i + 1) * k] {
                        *v *= wi;
                    }
                    d[i * k + labels[i]] -= wi;
                }
                acc(*logits, DArray::new(val(*logits).shape().to_vec(), d).expect("logits"));
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::LayerNorm { .. } => "layernorm",
        Op::Gelu(_) => "gelu",
        Op::Relu(_) => "relu",
        Op::Softmax(_) => "softmax",
        Op::Dropout(..) => "dropout",
        Op::AttnScores { .. } => "attn_scores",
        Op::AttnApply { .. } => "attn_apply",
        Op::Conv1d { .. } => "conv1d",
        Op::MaxPool { .. } => "max_pool",
        Op::ConvMaxPool { .. } => "conv_maxpool",
        Op::GatherRows(..) => "gather_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::RepeatRow(_) => "repeat_row",
        Op::GroupMeanRows(..) => "group_mean_rows",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn argmax_of(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn zip_map(a: &DArray, b: &DArray, f: impl Fn(f64, f64) -> f64) -> DArray {
    DArray::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .expect("same shape")
}

/// im2col + gemm. Returns pre-activations laid out `[c*l, f]`.
fn conv_columns(x: &[f64], c: usize, l: usize, w: &[f64], f: usize, k: usize, b: &[f64]) -> Vec<f64> {
    let pad = same_pad(k);
    let mut cols = vec![0.0; c * l * k];
    for ci in 0..c {
        let row = &x[ci * l..(ci + 1) * l];
        for t in 0..l {
            let dst = &mut cols[(ci * l + t) * k..(ci * l + t + 1) * k];
            for (kk, o) in dst.iter_mut().enumerate() {
                let s = t as isize + kk as isize - pad as isize;
                if s >= 0 && (s as usize) < l {
                    *o = row[s as usize];
                }
            }
        }
    }
    let mut pre = vec![0.0; c * l * f];
    for chunk in pre.chunks_mut(f) {
        chunk.copy_from_slice(b);
    }
    gemm(c * l, k, f, &cols, false, w, true, &mut pre, true);
    pre
}

/// `c = alpha * a * b + beta * c` over strided sub-matrices of the given slices.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, cc: usize, rs: isize, cs: isize| {
        (r.saturating_sub(1) as isize * rs + cc.saturating_sub(1) as isize * cs) as usize + 1
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let w = g.input(DArray::scalar(2.0));
        let x = g.constant(DArray::scalar(3.0));
        let y = g.mul(w, x);
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 3.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.input(DArray::from_vec(vec![0.3, -1.2, 2.5, 0.0]));
        let s = g.softmax(z);
        let l = g.sum(s);
        let grads = g.backward(l, None).unwrap();
        assert!(grads.get(z).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut g = Graph::new();
        let z = g.constant(DArray::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.7).sin() * 9.0).collect()).unwrap());
        let s = g.softmax(z);
        for r in 0..3 {
            assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let z = g.input(DArray::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(z, None).is_err());
    }

    #[test]
    fn fused_conv_pool_matches_composition() {
        let mut g = Graph::new();
        let x = g.constant(DArray::new(vec![3, 12], (0..36).map(|i| ((i * 7 % 11) as f64) - 5.0).collect()).unwrap());
        let w = g.constant(DArray::new(vec![2, 5], (0..10).map(|i| (i as f64 - 4.5) * 0.3).collect()).unwrap());
        let b = g.constant(DArray::from_vec(vec![0.1, -0.2]));
        let conv = g.conv1d(x, w, b);
        let pooled = g.max_pool(conv);
        let fused = g.conv_maxpool(x, w, b, 12);
        assert!(g.value(pooled).max_abs_diff(g.value(fused)) < 1e-12);
    }
}
