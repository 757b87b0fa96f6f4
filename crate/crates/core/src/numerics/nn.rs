//! Neural building blocks recorded on a [`Graph`].

use super::array::DArray;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::RngState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout randomness for one forward pass; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut RngState>;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let weight = store.xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.zeros(format!("{name}.bias"), &[fan_out]);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.gamma"), &[dim]),
            beta: store.zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, Some((gamma, beta)))
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights `[batch, heads, nq, nk]`, before dropout.
    pub weights: Var,
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `queries: [batch*nq, dim]`, `memory: [batch*nk, dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        batch: usize,
        dropout_p: f64,
        mut rng: DropoutRng<'_>,
    ) -> Result<AttentionOutput> {
        for v in [queries, memory] {
            if g.value(v).cols() != self.dim {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("input width {} != {}", g.value(v).cols(), self.dim),
                ));
            }
            if batch == 0 || g.value(v).rows() % batch != 0 {
                return Err(Error::shape("multi_head_attention", "rows not divisible by batch"));
            }
        }
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let logits = g.attn_scores(q, k, batch, self.heads, scale);
        let weights = g.softmax(logits);
        let dropped = g.dropout(weights, dropout_p, rng.as_deref_mut());
        let ctx = g.attn_apply(dropped, v);
        let o = self.out.forward(g, store, ctx);
        let out = g.dropout(o, dropout_p, rng);
        Ok(AttentionOutput { out, weights })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut RngState) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_width, rng),
            dropout,
        })
    }

    /// Returns the layer output and the head-resolved attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        mut rng: DropoutRng<'_>,
    ) -> Result<(Var, Var)> {
        let h = self.ln_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, batch, self.dropout, rng.as_deref_mut())?;
        let x = g.add(x, a.out);
        let h = self.ln_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, h);
        let f = g.dropout(f, self.dropout, rng);
        Ok((g.add(x, f), a.weights))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output length `l - k + 1`.
    Valid,
    /// Zero padding so output length equals input length.
    Same,
}

/// Single-channel cross-correlation `out[t] = bias + sum_k kernel[k] * x[t + k - pad]`.
pub fn conv1d(x: &[f64], kernel: &[f64], bias: f64, padding: Padding) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("conv1d input is empty".into()));
    }
    if kernel.is_empty() {
        return Err(Error::InvalidArgument("conv1d kernel is empty".into()));
    }
    let k = kernel.len();
    let (pad, out_len) = match padding {
        Padding::Valid => {
            if x.len() < k {
                return Err(Error::InvalidArgument("input shorter than kernel".into()));
            }
            (0isize, x.len() - k + 1)
        }
        Padding::Same => (((k - 1) / 2) as isize, x.len()),
    };
    Ok((0..out_len)
        .map(|t| {
            bias + kernel
                .iter()
                .enumerate()
                .filter_map(|(kk, w)| {
                    let s = t as isize + kk as isize - pad;
                    (s >= 0 && (s as usize) < x.len()).then(|| w * x[s as usize])
                })
                .sum::<f64>()
        })
        .collect())
}

/// Non-affine layer norm of a single vector (population variance).
pub fn layernorm_vec(x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(DArray::from_vec(x.to_vec()));
    let y = g.layernorm(v, None);
    g.value(y).data().to_vec()
}
