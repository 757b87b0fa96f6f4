//! Per-modality tokenization of 30 s windows and concatenation fusion.
//!
//! Each one-second chunk goes through conv1d (64 filters, k=21) and max
//! pooling, a linear projection to the model width and a layer norm. The
//! sinusoidal positional embedding and a learned modality embedding are then
//! added. Fused sequences use the canonical order EEG, EMG, EOG, ECG, so
//! token `t` is modality `t / 30`, position `t % 30`.

use crate::dataio::{Modality, SignalWindow, CHUNK_SAMPLES, MAX_TOKENS, N_MODALITIES, TOKENS_PER_MODALITY};
use crate::error::{Error, Result};
use crate::numerics::nn::{LayerNorm, Linear};
use crate::numerics::{DArray, Graph, ParamId, ParamStore, RngState, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenTag {
    pub modality: Modality,
    pub position: usize,
}

impl TokenTag {
    pub fn from_index(t: usize) -> Result<Self> {
        if t >= MAX_TOKENS {
            return Err(Error::OutOfRange(format!("token index {t}")));
        }
        Ok(TokenTag { modality: Modality::from_index(t / TOKENS_PER_MODALITY)?, position: t % TOKENS_PER_MODALITY })
    }

    pub fn index(self) -> usize {
        self.modality.index() * TOKENS_PER_MODALITY + self.position
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/D))`, `PE(pos, 2i+1) = cos(same)`.
pub fn positional_embedding(pos: usize, dim: usize) -> Result<Vec<f64>> {
    if pos >= TOKENS_PER_MODALITY {
        return Err(Error::OutOfRange(format!("position {pos} not in 0..{TOKENS_PER_MODALITY}")));
    }
    Ok((0..dim)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub dim: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    /// Max-pool window in samples; `CHUNK_SAMPLES` pools the whole chunk.
    pub pool: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { dim: 512, conv_filters: 64, conv_kernel: 21, pool: CHUNK_SAMPLES }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.conv_filters == 0 || self.conv_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("tokenizer needs positive width and an odd kernel".into()));
        }
        if self.pool == 0 || CHUNK_SAMPLES % self.pool != 0 {
            return Err(Error::InvalidArgument(format!("pool {} must divide {CHUNK_SAMPLES}", self.pool)));
        }
        Ok(())
    }

    fn pooled_width(&self) -> usize {
        self.conv_filters * (CHUNK_SAMPLES / self.pool)
    }
}

#[derive(Clone, Debug)]
pub struct ModalityTokenizer {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: Linear,
    pub ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    /// Indexed by modality; `None` for modalities this tokenizer does not cover.
    pub modalities: Vec<Option<ModalityTokenizer>>,
    /// `[4, dim]`.
    pub modality_emb: ParamId,
    positional: DArray,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TokenizerConfig, rng: &mut RngState) -> Result<Self> {
        Self::with_modalities(store, name, cfg, &Modality::ALL, rng)
    }

    /// Tokenizer that only covers `covered`.
    pub fn with_modalities(
        store: &mut ParamStore,
        name: &str,
        cfg: TokenizerConfig,
        covered: &[Modality],
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        let modalities = Modality::ALL
            .iter()
            .map(|m| {
                if !covered.contains(m) {
                    return None;
                }
                let p = format!("{name}.{}", m.name().to_lowercase());
                let fan = (cfg.conv_kernel + cfg.conv_filters) as f64;
                let bound = (6.0 / fan).sqrt();
                let mut w = DArray::zeros(&[cfg.conv_filters, cfg.conv_kernel]);
                w.data_mut().iter_mut().for_each(|x| *x = rng.uniform_range(-bound, bound));
                Some(ModalityTokenizer {
                    conv_w: store.add(format!("{p}.conv.weight"), w),
                    conv_b: store.zeros(format!("{p}.conv.bias"), &[cfg.conv_filters]),
                    proj: Linear::new(store, &format!("{p}.proj"), cfg.pooled_width(), cfg.dim, rng),
                    ln: LayerNorm::new(store, &format!("{p}.ln"), cfg.dim),
                })
            })
            .collect();
        let modality_emb = store.trunc_normal(format!("{name}.modality_emb"), &[N_MODALITIES, cfg.dim], 0.02, rng);
        let positional = positional_table(cfg.dim);
        Ok(Tokenizer { cfg, modalities, modality_emb, positional })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// `[30, dim]` sinusoidal table.
    pub fn positional(&self) -> &DArray {
        &self.positional
    }

    /// Layer-normed chunk projections of `chunks: [n, 100]` for one modality.
    pub fn project_chunks(&self, g: &mut Graph, store: &ParamStore, m: Modality, chunks: DArray) -> Result<Var> {
        let t = self.modalities[m.index()]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("tokenizer does not cover {m}")))?;
        let x = g.constant(chunks);
        let w = g.param(store, t.conv_w);
        let b = g.param(store, t.conv_b);
        let pooled = g.conv_maxpool(x, w, b, self.cfg.pool);
        let h = t.proj.forward(g, store, pooled);
        Ok(t.ln.forward(g, store, h))
    }

    /// Positional plus modality embedding rows for `tags`, as a `[n, dim]` var.
    pub fn embeddings(&self, g: &mut Graph, store: &ParamStore, tags: &[TokenTag]) -> Var {
        let d = self.cfg.dim;
        let mut pe = Vec::with_capacity(tags.len() * d);
        for t in tags {
            pe.extend_from_slice(self.positional.row(t.position));
        }
        let pe = g.constant(DArray::new(vec![tags.len(), d], pe).expect("pe rows"));
        let table = g.param(store, self.modality_emb);
        let me = g.gather_rows(table, tags.iter().map(|t| t.modality.index()).collect());
        g.add(pe, me)
    }

    /// Tokens for `tags[b]` of every window `b`, stacked sample-major into
    /// `[sum_b |tags[b]|, dim]`, with both embeddings added.
    pub fn embed_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
        tags: &[Vec<TokenTag>],
    ) -> Result<Var> {
        if windows.len() != tags.len() {
            return Err(Error::shape("embed_tokens", "one tag list per window"));
        }
        let total: usize = tags.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no tokens to embed".into()));
        }
        for w in windows {
            if !w.is_valid() {
                return Err(Error::shape("tokenize", format!("window {} of {} is malformed", w.index, w.patient_id)));
            }
        }
        // group rows by modality, remembering each row's output slot
        let mut parts = Vec::new();
        let mut slot_of = vec![0usize; total];
        let mut offset = 0;
        let bases: Vec<usize> = tags
            .iter()
            .scan(0, |acc, t| {
                let b = *acc;
                *acc += t.len();
                Some(b)
            })
            .collect();
        for m in Modality::ALL {
            let mut data = Vec::new();
            let mut row = 0;
            for (b, (w, ts)) in windows.iter().zip(tags).enumerate() {
                let base = bases[b];
                for (i, t) in ts.iter().enumerate() {
                    if t.modality == m {
                        data.extend_from_slice(w.chunk(m, t.position));
                        slot_of[base + i] = offset + row;
                        row += 1;
                    }
                }
            }
            if row > 0 {
                let chunks = DArray::new(vec![row, CHUNK_SAMPLES], data)?;
                parts.push(self.project_chunks(g, store, m, chunks)?);
                offset += row;
            }
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let ordered = g.gather_rows(stacked, slot_of);
        let flat: Vec<TokenTag> = tags.iter().flatten().copied().collect();
        let emb = self.embeddings(g, store, &flat);
        Ok(g.add(ordered, emb))
    }

    /// The 30 tokens of one modality of one window, embeddings included.
    pub fn tokenize(&self, store: &ParamStore, window: &SignalWindow, m: Modality) -> Result<DArray> {
        let tags: Vec<TokenTag> = (0..TOKENS_PER_MODALITY).map(|position| TokenTag { modality: m, position }).collect();
        let mut g = Graph::new();
        let v = self.embed_tokens(&mut g, store, &[window], &[tags])?;
        Ok(g.value(v).clone())
    }
}

pub fn positional_table(dim: usize) -> DArray {
    let rows: Vec<Vec<f64>> =
        (0..TOKENS_PER_MODALITY).map(|p| positional_embedding(p, dim).expect("position in range")).collect();
    DArray::from_rows(&rows).expect("rectangular")
}

/// Fused token sequence with per-token tags and mask flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: DArray,
    pub tags: Vec<TokenTag>,
    pub masked: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Splits back into per-modality `[30, dim]` blocks (`None` where absent).
    pub fn split(&self) -> Vec<Option<DArray>> {
        Modality::ALL
            .iter()
            .map(|&m| {
                let rows: Vec<Vec<f64>> = self
                    .tags
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.modality == m)
                    .map(|(i, _)| self.tokens.row(i).to_vec())
                    .collect();
                (!rows.is_empty()).then(|| DArray::from_rows(&rows).expect("rectangular"))
            })
            .collect()
    }
}

/// Concatenates per-modality `[30, dim]` blocks in canonical order. A `None`
/// entry is only allowed when `dropped` names that modality.
pub fn fuse(per_modality: &[Option<DArray>], dropped: Option<Modality>) -> Result<TokenSequence> {
    if per_modality.len() != N_MODALITIES {
        return Err(Error::shape("fuse", format!("expected {N_MODALITIES} modality slots")));
    }
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for (m, block) in Modality::ALL.iter().zip(per_modality) {
        match block {
            Some(b) => {
                if b.rows() != TOKENS_PER_MODALITY {
                    return Err(Error::shape("fuse", format!("{m} has {} tokens", b.rows())));
                }
                for p in 0..TOKENS_PER_MODALITY {
                    rows.push(b.row(p).to_vec());
                    tags.push(TokenTag { modality: *m, position: p });
                }
            }
            None if dropped == Some(*m) => {}
            None => return Err(Error::InvalidArgument(format!("{m} missing without a drop flag"))),
        }
    }
    let n = tags.len();
    Ok(TokenSequence { tokens: DArray::from_rows(&rows)?, tags, masked: vec![false; n] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Demographics, Gender, WINDOW_SAMPLES};

    fn window(seed: u64) -> SignalWindow {
        let mut rng = RngState::new(seed);
        SignalWindow {
            patient_id: "t".into(),
            index: 0,
            data: (0..4 * WINDOW_SAMPLES).map(|_| rng.normal()).collect(),
            label: None,
            demographics: Demographics { age_years: 30.0, gender: Gender::Female },
        }
    }

    fn small() -> (ParamStore, Tokenizer) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(1);
        let cfg = TokenizerConfig { dim: 16, conv_filters: 8, ..TokenizerConfig::default() };
        let t = Tokenizer::new(&mut store, "tok", cfg, &mut rng).unwrap();
        (store, t)
    }

    #[test]
    fn position_zero_is_sin0_cos1() {
        let pe = positional_embedding(0, 8).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(positional_embedding(30, 8).is_err());
    }

    #[test]
    fn tag_arithmetic() {
        let t = TokenTag::from_index(37).unwrap();
        assert_eq!((t.modality, t.position), (Modality::Emg, 7));
        assert_eq!(t.index(), 37);
    }

    #[test]
    fn tokenize_shape_and_determinism() {
        let (store, t) = small();
        let w = window(3);
        let a = t.tokenize(&store, &w, Modality::Eog).unwrap();
        assert_eq!(a.shape(), &[30, 16]);
        assert_eq!(a, t.tokenize(&store, &w, Modality::Eog).unwrap());
    }

    #[test]
    fn identical_chunks_give_identical_tokens_before_embedding() {
        let (store, t) = small();
        let mut w = window(4);
        let first = w.chunk(Modality::Eeg, 0).to_vec();
        w.channel_mut(Modality::Eeg)[500..600].copy_from_slice(&first);
        let a = t.tokenize(&store, &w, Modality::Eeg).unwrap();
        let pe = t.positional();
        let me = store.value(t.modality_emb).row(0).to_vec();
        for j in 0..16 {
            let x0 = a.get2(0, j) - pe.get2(0, j) - me[j];
            let x5 = a.get2(5, j) - pe.get2(5, j) - me[j];
            assert!((x0 - x5).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_orders_and_drops() {
        let blocks: Vec<Option<DArray>> = (0..4).map(|m| Some(DArray::full(&[30, 2], m as f64))).collect();
        let s = fuse(&blocks, None).unwrap();
        assert_eq!(s.len(), 120);
        assert_eq!(s.tags[37], TokenTag { modality: Modality::Emg, position: 7 });
        assert_eq!(s.tokens.get2(37, 0), 1.0);
        assert_eq!(s.split(), blocks);
        let mut dropped = blocks.clone();
        dropped[2] = None;
        assert!(fuse(&dropped, None).is_err());
        let s = fuse(&dropped, Some(Modality::Eog)).unwrap();
        assert_eq!(s.len(), 90);
        assert!(s.tags.iter().all(|t| t.modality != Modality::Eog));
    }
}
