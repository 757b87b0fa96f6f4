//! Uniform token masking, input modality drop and mask-token interleaving.

use crate::dataio::{Modality, MAX_TOKENS, N_MODALITIES, TOKENS_PER_MODALITY};
use crate::error::{Error, Result};
use crate::numerics::{DArray, Graph, ParamId, ParamStore, RngState, Var};
use crate::tokenizers::{TokenSequence, TokenTag, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub p: f64,
    pub modality_drop: bool,
}

impl MaskConfig {
    /// 0.6 with modality drop (overall ratio 0.7), 0.7 without.
    pub fn standard(modality_drop: bool) -> Self {
        MaskConfig { p: if modality_drop { 0.6 } else { 0.7 }, modality_drop }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!("mask probability {} not in [0, 1]", self.p)));
        }
        let (_, visible) = self.counts();
        if visible == 0 {
            return Err(Error::InvalidArgument(format!("mask probability {} leaves no visible tokens", self.p)));
        }
        Ok(())
    }

    /// Expected fraction of masked tokens, `1/N + p (N-1)/N` with drop.
    pub fn overall_ratio(&self) -> f64 {
        let n = N_MODALITIES as f64;
        if self.modality_drop {
            1.0 / n + self.p * (n - 1.0) / n
        } else {
            self.p
        }
    }

    /// (uniformly masked count, visible count).
    fn counts(&self) -> (usize, usize) {
        let pool = if self.modality_drop { MAX_TOKENS - TOKENS_PER_MODALITY } else { MAX_TOKENS };
        let k = (self.p * pool as f64).round() as usize;
        (k, pool - k)
    }
}

/// Masked and visible canonical token indices of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub dropped: Option<Modality>,
    /// Sorted.
    pub masked: Vec<usize>,
    /// Sorted.
    pub visible: Vec<usize>,
}

impl MaskPlan {
    /// Nothing masked.
    pub fn none() -> Self {
        MaskPlan { dropped: None, masked: Vec::new(), visible: (0..MAX_TOKENS).collect() }
    }

    /// Masks exactly the given canonical indices.
    pub fn from_masked(dropped: Option<Modality>, masked: &[usize]) -> Result<Self> {
        let mut flags = [false; MAX_TOKENS];
        for &t in masked {
            if t >= MAX_TOKENS {
                return Err(Error::OutOfRange(format!("token index {t}")));
            }
            flags[t] = true;
        }
        if let Some(m) = dropped {
            if (0..TOKENS_PER_MODALITY).any(|p| !flags[m.index() * TOKENS_PER_MODALITY + p]) {
                return Err(Error::InvalidArgument(format!("dropped {m} must be fully masked")));
            }
        }
        let masked: Vec<usize> = (0..MAX_TOKENS).filter(|&t| flags[t]).collect();
        let visible: Vec<usize> = (0..MAX_TOKENS).filter(|&t| !flags[t]).collect();
        if visible.is_empty() {
            return Err(Error::InvalidArgument("every token is masked".into()));
        }
        Ok(MaskPlan { dropped, masked, visible })
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }

    pub fn visible_tags(&self) -> Vec<TokenTag> {
        self.visible.iter().map(|&t| TokenTag::from_index(t).expect("valid index")).collect()
    }

    pub fn masked_tags(&self) -> Vec<TokenTag> {
        self.masked.iter().map(|&t| TokenTag::from_index(t).expect("valid index")).collect()
    }

    pub fn mask_fraction(&self) -> f64 {
        self.masked.len() as f64 / MAX_TOKENS as f64
    }
}

/// One plan for a single sequence (drop choice made here).
pub fn sample_mask(cfg: &MaskConfig, rng: &mut RngState) -> Result<MaskPlan> {
    Ok(sample_batch_masks(cfg, 1, rng)?.remove(0))
}

/// Plans for a batch: the dropped modality is drawn once, uniform masking
/// is drawn per sample with the same exact count.
pub fn sample_batch_masks(cfg: &MaskConfig, batch: usize, rng: &mut RngState) -> Result<Vec<MaskPlan>> {
    cfg.validate()?;
    let dropped = cfg.modality_drop.then(|| Modality::ALL[rng.below(N_MODALITIES)]);
    let pool: Vec<usize> = (0..MAX_TOKENS)
        .filter(|&t| dropped.is_none_or(|m| t / TOKENS_PER_MODALITY != m.index()))
        .collect();
    let (k, _) = cfg.counts();
    (0..batch)
        .map(|_| {
            let mut masked: Vec<usize> = rng.choose_k(pool.len(), k).into_iter().map(|i| pool[i]).collect();
            if let Some(m) = dropped {
                masked.extend(m.index() * TOKENS_PER_MODALITY..(m.index() + 1) * TOKENS_PER_MODALITY);
            }
            MaskPlan::from_masked(dropped, &masked)
        })
        .collect()
}

/// Keeps the visible tokens of a full 120-token sequence.
pub fn apply_mask(seq: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    if seq.len() != MAX_TOKENS || seq.tags.iter().enumerate().any(|(i, t)| t.index() != i) {
        return Err(Error::InvalidArgument("apply_mask needs a full canonical sequence".into()));
    }
    if plan.visible.is_empty() {
        return Err(Error::InvalidArgument("empty visible set".into()));
    }
    let rows: Vec<Vec<f64>> = plan.visible.iter().map(|&t| seq.tokens.row(t).to_vec()).collect();
    Ok(TokenSequence {
        tokens: DArray::from_rows(&rows)?,
        tags: plan.visible_tags(),
        masked: vec![false; plan.visible.len()],
    })
}

/// Row of `concat(visible rows, mask rows)` that lands at each canonical slot.
fn interleave_index(plan: &MaskPlan, visible_base: usize, masked_base: usize, out: &mut Vec<usize>) {
    let (mut v, mut k) = (0, 0);
    for t in 0..MAX_TOKENS {
        if plan.is_masked(t) {
            out.push(masked_base + k);
            k += 1;
        } else {
            out.push(visible_base + v);
            v += 1;
        }
    }
}

/// Inserts `mask_token + PE (+ modality embedding)` at every masked slot and
/// returns the full canonical sequence.
pub fn interleave(
    encoder_out: &TokenSequence,
    plan: &MaskPlan,
    mask_token: &[f64],
    positional: &DArray,
    modality_emb: Option<&DArray>,
) -> Result<TokenSequence> {
    if encoder_out.tags != plan.visible_tags() {
        return Err(Error::InvalidArgument("encoder output tags do not match the plan".into()));
    }
    let d = mask_token.len();
    let mut rows: Vec<Vec<f64>> = (0..encoder_out.len()).map(|i| encoder_out.tokens.row(i).to_vec()).collect();
    for tag in plan.masked_tags() {
        let mut r = mask_token.to_vec();
        for j in 0..d {
            r[j] += positional.get2(tag.position, j);
            if let Some(me) = modality_emb {
                r[j] += me.get2(tag.modality.index(), j);
            }
        }
        rows.push(r);
    }
    let mut idx = Vec::with_capacity(MAX_TOKENS);
    interleave_index(plan, 0, encoder_out.len(), &mut idx);
    let ordered: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
    Ok(TokenSequence {
        tokens: DArray::from_rows(&ordered)?,
        tags: (0..MAX_TOKENS).map(|t| TokenTag::from_index(t).expect("valid")).collect(),
        masked: (0..MAX_TOKENS).map(|t| plan.is_masked(t)).collect(),
    })
}

/// Graph version of [`interleave`] over a batch. `encoded` is
/// `[batch * n_visible, dim]`, sample-major; the result is `[batch * 120, dim]`.
pub fn interleave_batch(
    g: &mut Graph,
    store: &ParamStore,
    encoded: Var,
    plans: &[MaskPlan],
    tokenizer: &Tokenizer,
    mask_token: ParamId,
    with_modality_emb: bool,
) -> Result<Var> {
    let batch = plans.len();
    let nv = plans.first().map_or(0, |p| p.visible.len());
    if plans.iter().any(|p| p.visible.len() != nv) || g.value(encoded).rows() != batch * nv {
        return Err(Error::shape("interleave", "visible counts differ from encoder rows"));
    }
    let masked_tags: Vec<TokenTag> = plans.iter().flat_map(MaskPlan::masked_tags).collect();
    let nm = masked_tags.len() / batch.max(1);
    let mut idx = Vec::with_capacity(batch * MAX_TOKENS);
    for (b, p) in plans.iter().enumerate() {
        interleave_index(p, b * nv, batch * nv + b * nm, &mut idx);
    }
    if masked_tags.is_empty() {
        return Ok(g.gather_rows(encoded, idx));
    }
    let mt = g.param(store, mask_token);
    let rep = g.repeat_row(mt, masked_tags.len());
    let d = tokenizer.dim();
    let mut pe = Vec::with_capacity(masked_tags.len() * d);
    for t in &masked_tags {
        pe.extend_from_slice(tokenizer.positional().row(t.position));
    }
    let pe = g.constant(DArray::new(vec![masked_tags.len(), d], pe)?);
    let mut filler = g.add(rep, pe);
    if with_modality_emb {
        let table = g.param(store, tokenizer.modality_emb);
        let me = g.gather_rows(table, masked_tags.iter().map(|t| t.modality.index()).collect());
        filler = g.add(filler, me);
    }
    let all = g.concat_rows(&[encoded, filler]);
    Ok(g.gather_rows(all, idx))
}
