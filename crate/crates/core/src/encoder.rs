//! Fused multimodal transformer encoder and its attention trace.

use std::fs;
use std::path::Path;

use crate::dataio::Modality;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::Reader;
use crate::numerics::nn::{DropoutRng, LayerNorm, Mode, TransformerLayer};
use crate::numerics::{DArray, Graph, ParamStore, RngState, Var};
use crate::tokenizers::{TokenSequence, TokenTag};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub dropout: f64,
    pub ff_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { n_layers: 8, n_heads: 8, dim: 512, dropout: 0.1, ff_width: 2048 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {} not divisible by {} heads", self.dim, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Graph handles from one encoder pass.
pub struct EncoderPass {
    pub out: Var,
    /// Per layer, `[batch, heads, n, n]`.
    pub weights: Vec<Var>,
    pub layer_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                TransformerLayer::new(store, &format!("{name}.layer{l}"), cfg.dim, cfg.n_heads, cfg.ff_width, cfg.dropout, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), cfg.dim);
        Ok(Encoder { cfg, layers, final_ln })
    }

    /// `x: [batch * n, dim]`, sample-major. Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        mut rng: DropoutRng<'_>,
    ) -> Result<EncoderPass> {
        if g.value(x).rows() == 0 {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let mut h = x;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(g, store, h, batch, rng.as_deref_mut())?;
            weights.push(w);
            layer_outputs.push(y);
            h = y;
        }
        let out = self.final_ln.forward(g, store, h);
        Ok(EncoderPass { out, weights, layer_outputs })
    }

    /// Encodes one sequence outside of training.
    pub fn encode(
        &self,
        store: &ParamStore,
        seq: &TokenSequence,
        mode: Mode,
        capture_trace: bool,
        rng: Option<&mut RngState>,
    ) -> Result<(DArray, Option<EncoderTrace>)> {
        if seq.is_empty() || seq.len() > crate::dataio::MAX_TOKENS {
            return Err(Error::InvalidArgument(format!("sequence of {} tokens", seq.len())));
        }
        let mut g = Graph::new();
        let x = g.constant(seq.tokens.clone());
        let rng = if mode == Mode::Train { rng } else { None };
        let pass = self.forward(&mut g, store, x, 1, rng)?;
        let trace = capture_trace.then(|| EncoderTrace {
            n_heads: self.cfg.n_heads,
            tags: seq.tags.clone(),
            inputs: std::iter::once(seq.tokens.clone())
                .chain(pass.layer_outputs.iter().take(self.layers.len().saturating_sub(1)).map(|&v| g.value(v).clone()))
                .collect(),
            outputs: pass.layer_outputs.iter().map(|&v| g.value(v).clone()).collect(),
            weights: pass
                .weights
                .iter()
                .map(|&w| {
                    let a = g.value(w);
                    let s = a.shape();
                    a.clone().reshape(&[s[1], s[2], s[3]]).expect("single sample")
                })
                .collect(),
        });
        Ok((g.value(pass.out).clone(), trace))
    }
}

/// Post-softmax attention of every layer for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace {
    pub n_heads: usize,
    pub tags: Vec<TokenTag>,
    /// Per layer `[heads, n, n]`.
    pub weights: Vec<DArray>,
    pub inputs: Vec<DArray>,
    pub outputs: Vec<DArray>,
}

impl EncoderTrace {
    pub fn n_tokens(&self) -> usize {
        self.tags.len()
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.n_tokens();
        self.weights
            .iter()
            .flat_map(|w| w.data().chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

pub const TRACE_MAGIC: &[u8; 4] = b"PMTR";
pub const TRACE_VERSION: u32 = 1;

/// Attention dump for analysis. Layout (little-endian):
///
/// ```text
/// magic "PMTR", version u32, meta_len u32, meta (UTF-8)
/// n_layers u32, n_heads u32, n u32
/// tags: n x (u8 modality index, u8 position)
/// weights: f32 x n_layers*n_heads*n*n, layer-major then head, row-major
/// ```
pub fn encode_trace(weights: &[DArray], n_heads: usize, tags: &[TokenTag], meta: &str) -> Result<Vec<u8>> {
    let n = tags.len();
    for w in weights {
        if w.shape() != [n_heads, n, n] {
            return Err(Error::shape("encode_trace", format!("layer shape {:?}", w.shape())));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for v in [weights.len(), n_heads, n] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in tags {
        out.push(t.modality.index() as u8);
        out.push(t.position as u8);
    }
    for w in weights {
        for &x in w.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded attention dump: per-layer `[heads, n, n]` weights, tags and meta.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceFile {
    pub meta: String,
    pub n_heads: usize,
    pub tags: Vec<TokenTag>,
    pub weights: Vec<DArray>,
}

pub fn decode_trace(bytes: &[u8], path: &Path) -> Result<TraceFile> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != TRACE_MAGIC {
        return Err(Error::format(path, "bad trace magic"));
    }
    let version = r.u32()?;
    if version != TRACE_VERSION {
        return Err(Error::format(path, format!("unsupported trace version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let (layers, heads, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut tags = Vec::with_capacity(n);
    for _ in 0..n {
        let m = Modality::from_index(r.u8()? as usize).map_err(|e| Error::format(path, e.to_string()))?;
        tags.push(TokenTag { modality: m, position: r.u8()? as usize });
    }
    let mut weights = Vec::with_capacity(layers);
    for _ in 0..layers {
        let data = (0..heads * n * n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        weights.push(DArray::new(vec![heads, n, n], data)?);
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after trace"));
    }
    Ok(TraceFile { meta, n_heads: heads, tags, weights })
}

pub fn save_trace(path: &Path, trace: &EncoderTrace, meta: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_trace(&trace.weights, trace.n_heads, &trace.tags, meta)?)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<TraceFile> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_trace(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dropout: f64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(2);
        let cfg = EncoderConfig { n_layers: 2, n_heads: 2, dim: 8, dropout, ff_width: 16 };
        let enc = Encoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn seq(n: usize) -> TokenSequence {
        let mut rng = RngState::new(9);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        TokenSequence {
            tokens: DArray::from_rows(&rows).unwrap(),
            tags: (0..n).map(|t| TokenTag::from_index(t).unwrap()).collect(),
            masked: vec![false; n],
        }
    }

    #[test]
    fn shape_and_eval_determinism() {
        let (store, enc) = setup(0.1);
        let s = seq(36);
        let (a, t) = enc.encode(&store, &s, Mode::Eval, true, None).unwrap();
        assert_eq!(a.shape(), &[36, 8]);
        let (b, _) = enc.encode(&store, &s, Mode::Eval, false, None).unwrap();
        assert_eq!(a, b);
        let t = t.unwrap();
        assert_eq!(t.weights.len(), 2);
        assert!(t.max_row_sum_error() < 1e-6);
    }

    #[test]
    fn permutation_equivariance() {
        let (store, enc) = setup(0.0);
        let s = seq(10);
        let perm = [3, 0, 9, 1, 8, 2, 7, 4, 6, 5];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| s.tokens.row(i).to_vec()).collect();
        let p = TokenSequence { tokens: DArray::from_rows(&rows).unwrap(), ..s.clone() };
        let (a, _) = enc.encode(&store, &s, Mode::Eval, false, None).unwrap();
        let (b, _) = enc.encode(&store, &p, Mode::Eval, false, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((b.get2(k, j) - a.get2(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trace_round_trip() {
        let (store, enc) = setup(0.0);
        let s = seq(5);
        let (_, t) = enc.encode(&store, &s, Mode::Eval, true, None).unwrap();
        let t = t.unwrap();
        let bytes = encode_trace(&t.weights, 2, &t.tags, "x=1").unwrap();
        let back = decode_trace(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.meta, "x=1");
        assert_eq!(back.tags, t.tags);
        assert!(back.weights[1].max_abs_diff(&t.weights[1]) < 1e-6);
        assert!(decode_trace(&bytes[..bytes.len() - 2], Path::new("m")).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let (store, enc) = setup(0.0);
        let s = TokenSequence { tokens: DArray::zeros(&[0, 8]), tags: vec![], masked: vec![] };
        assert!(enc.encode(&store, &s, Mode::Eval, false, None).is_err());
    }
}
