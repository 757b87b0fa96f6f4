//! Multimodal masked autoencoder: model, masked reconstruction loss and
//! the pretraining loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataio::{Modality, SignalWindow, CHUNK_SAMPLES, MAX_TOKENS, N_MODALITIES, TOKENS_PER_MODALITY};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::{interleave_batch, sample_batch_masks, MaskConfig, MaskPlan};
use crate::numerics::checkpoint::save_checkpoint;
use crate::numerics::nn::{DropoutRng, LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
use crate::numerics::{lr_at, AdamW, DArray, Graph, ParamId, ParamStore, RngState, ScheduleConfig, Var};
use crate::tokenizers::{TokenTag, Tokenizer, TokenizerConfig};

/// Parameter-name prefixes of the parts that make up the representation.
pub const TOKENIZER_PREFIX: &str = "tokenizer";
pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    /// Also add the slot's modality embedding to interleaved mask tokens.
    pub mask_token_modality_emb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            mask_token_modality_emb: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        if self.tokenizer.dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "tokenizer width {} differs from encoder width {}",
                self.tokenizer.dim, self.encoder.dim
            )));
        }
        Ok(())
    }
}

/// Cross-attention from one modality's slots into the full sequence, one
/// transformer layer over those slots and a linear head to 100 samples.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross: MultiHeadAttention,
    pub layer: TransformerLayer,
    pub head: Linear,
    pub dropout: f64,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut RngState) -> Result<Self> {
        Ok(Decoder {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), cfg.dim),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), cfg.dim),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), cfg.dim, cfg.n_heads, rng)?,
            layer: TransformerLayer::new(store, &format!("{name}.layer"), cfg.dim, cfg.n_heads, cfg.ff_width, cfg.dropout, rng)?,
            head: Linear::new(store, &format!("{name}.head"), cfg.dim, CHUNK_SAMPLES, rng),
            dropout: cfg.dropout,
        })
    }

    /// `full: [batch * 120, dim]` in canonical order; returns `[batch * 30, 100]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        full: Var,
        m: Modality,
        batch: usize,
        mut rng: DropoutRng<'_>,
    ) -> Result<Var> {
        if g.value(full).rows() != batch * MAX_TOKENS {
            return Err(Error::shape("decode", "decoder input must hold 120 tokens per sample"));
        }
        let idx: Vec<usize> = (0..batch)
            .flat_map(|b| (0..TOKENS_PER_MODALITY).map(move |p| b * MAX_TOKENS + m.index() * TOKENS_PER_MODALITY + p))
            .collect();
        let q = g.gather_rows(full, idx);
        let hq = self.ln_q.forward(g, store, q);
        let hkv = self.ln_kv.forward(g, store, full);
        let ca = self.cross.forward(g, store, hq, hkv, batch, self.dropout, rng.as_deref_mut())?;
        let x = g.add(q, ca.out);
        let (y, _) = self.layer.forward(g, store, x, batch, rng)?;
        Ok(self.head.forward(g, store, y))
    }
}

#[derive(Clone, Debug)]
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub mask_token: ParamId,
    pub decoders: Vec<Decoder>,
}

/// Graph handles of one MAE forward pass.
pub struct MaeForward {
    pub loss: Var,
    /// Per modality `[batch * 30, 100]`, `None` when not decoded.
    pub recon: Vec<Option<Var>>,
    /// Per modality masked MSE, `None` when nothing of it was masked.
    pub modality_loss: Vec<Option<Var>>,
}

impl MaeModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = Tokenizer::new(store, TOKENIZER_PREFIX, cfg.tokenizer.clone(), rng)?;
        let encoder = Encoder::new(store, ENCODER_PREFIX, cfg.encoder.clone(), rng)?;
        let mask_token = store.trunc_normal("mask_token", &[cfg.encoder.dim], 0.02, rng);
        let decoders = Modality::ALL
            .iter()
            .map(|m| Decoder::new(store, &format!("decoder.{}", m.name().to_lowercase()), &cfg.encoder, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaeModel { cfg, tokenizer, encoder, mask_token, decoders })
    }

    /// Tokenizes the visible tokens, encodes, interleaves mask tokens and
    /// decodes every modality that has masked tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
        plans: &[MaskPlan],
        mut rng: DropoutRng<'_>,
    ) -> Result<MaeForward> {
        let batch = windows.len();
        if batch == 0 || plans.len() != batch {
            return Err(Error::shape("mae_forward", "one mask plan per window"));
        }
        let tags: Vec<Vec<TokenTag>> = plans.iter().map(MaskPlan::visible_tags).collect();
        let x = self.tokenizer.embed_tokens(g, store, windows, &tags)?;
        let enc = self.encoder.forward(g, store, x, batch, rng.as_deref_mut())?;
        let full = interleave_batch(
            g,
            store,
            enc.out,
            plans,
            &self.tokenizer,
            self.mask_token,
            self.cfg.mask_token_modality_emb,
        )?;
        let mut recon = vec![None; N_MODALITIES];
        let mut modality_loss = vec![None; N_MODALITIES];
        for m in Modality::ALL {
            let rows = masked_rows(plans, m);
            if rows.is_empty() {
                continue;
            }
            let r = self.decoders[m.index()].forward(g, store, full, m, batch, rng.as_deref_mut())?;
            recon[m.index()] = Some(r);
            modality_loss[m.index()] = Some(masked_mse(g, r, windows, &rows, m)?);
        }
        let present: Vec<Var> = modality_loss.iter().flatten().copied().collect();
        let loss = if present.is_empty() {
            g.constant(DArray::scalar(0.0))
        } else {
            let stacked = g.concat_rows(&present);
            g.mean(stacked)
        };
        Ok(MaeForward { loss, recon, modality_loss })
    }

    /// Reconstruction of one window as `[4][30, 100]` (unmasked slots included).
    pub fn reconstruct(&self, store: &ParamStore, window: &SignalWindow, plan: &MaskPlan) -> Result<Vec<DArray>> {
        let mut g = Graph::new();
        let tags = vec![plan.visible_tags()];
        let x = self.tokenizer.embed_tokens(&mut g, store, &[window], &tags)?;
        let enc = self.encoder.forward(&mut g, store, x, 1, None)?;
        let full = interleave_batch(
            &mut g,
            store,
            enc.out,
            std::slice::from_ref(plan),
            &self.tokenizer,
            self.mask_token,
            self.cfg.mask_token_modality_emb,
        )?;
        Modality::ALL
            .iter()
            .map(|&m| {
                let r = self.decoders[m.index()].forward(&mut g, store, full, m, 1, None)?;
                Ok(g.value(r).clone())
            })
            .collect()
    }
}

/// `(row in the [batch*30] decoder output, sample, position)` of masked tokens of `m`.
fn masked_rows(plans: &[MaskPlan], m: Modality) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        for pos in 0..TOKENS_PER_MODALITY {
            if p.is_masked(m.index() * TOKENS_PER_MODALITY + pos) {
                out.push((b * TOKENS_PER_MODALITY + pos, b, pos));
            }
        }
    }
    out
}

fn masked_mse(
    g: &mut Graph,
    recon: Var,
    windows: &[&SignalWindow],
    rows: &[(usize, usize, usize)],
    m: Modality,
) -> Result<Var> {
    let pred = g.gather_rows(recon, rows.iter().map(|r| r.0).collect());
    let mut target = Vec::with_capacity(rows.len() * CHUNK_SAMPLES);
    for &(_, b, pos) in rows {
        target.extend_from_slice(windows[b].chunk(m, pos));
    }
    let t = g.constant(DArray::new(vec![rows.len(), CHUNK_SAMPLES], target)?);
    let d = g.sub(pred, t);
    let sq = g.mul(d, d);
    let mse = g.mean(sq);
    // as a [1, 1] row so per-modality terms can be stacked
    let one = g.repeat_row(mse, 1);
    Ok(one)
}

/// MSE over the masked tokens' samples of each modality, then an
/// equal-weight mean over modalities with at least one masked token.
/// `recon[m]` is `[30, 100]`. Zero if nothing is masked.
pub fn masked_reconstruction_loss(recon: &[DArray], target: &SignalWindow, plan: &MaskPlan) -> Result<f64> {
    if recon.len() != N_MODALITIES || recon.iter().any(|r| r.shape() != [TOKENS_PER_MODALITY, CHUNK_SAMPLES]) {
        return Err(Error::shape("masked_reconstruction_loss", "expected 4 x [30, 100] reconstructions"));
    }
    let per = per_modality_masked_mse(recon, target, plan);
    let present: Vec<f64> = per.into_iter().flatten().collect();
    Ok(if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 })
}

pub fn per_modality_masked_mse(recon: &[DArray], target: &SignalWindow, plan: &MaskPlan) -> Vec<Option<f64>> {
    Modality::ALL
        .iter()
        .map(|&m| {
            let positions: Vec<usize> =
                (0..TOKENS_PER_MODALITY).filter(|p| plan.is_masked(m.index() * TOKENS_PER_MODALITY + p)).collect();
            if positions.is_empty() {
                return None;
            }
            let mut se = 0.0;
            for &p in &positions {
                for (r, t) in recon[m.index()].row(p).iter().zip(target.chunk(m, p)) {
                    se += (r - t) * (r - t);
                }
            }
            Some(se / (positions.len() * CHUNK_SAMPLES) as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Mae,
    MaeModDrop,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mae => "mae",
            Strategy::MaeModDrop => "mae_moddrop",
        }
    }

    pub fn modality_drop(self) -> bool {
        self == Strategy::MaeModDrop
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask: MaskConfig,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many seconds of training (checked between epochs).
    pub max_seconds: Option<f64>,
    /// Where per-epoch checkpoints go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    pub fn new(strategy: Strategy, epochs: usize) -> Self {
        PretrainConfig {
            strategy,
            epochs,
            batch_size: 32,
            mask: MaskConfig::standard(strategy.modality_drop()),
            schedule: ScheduleConfig::for_epochs(epochs),
            weight_decay: 0.05,
            seed: 0,
            max_seconds: None,
            checkpoint_dir: None,
            checkpoint_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.modality_drop != self.strategy.modality_drop() {
            return Err(Error::Config(format!(
                "strategy {} requires mask.modality_drop = {}",
                self.strategy.name(),
                self.strategy.modality_drop()
            )));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch size and checkpoint interval must be positive".into()));
        }
        self.mask.validate()?;
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters of the selected checkpoint.
    pub store: ParamStore,
    /// `None` means the initialization was selected.
    pub selected_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fixed batches of a deterministic epoch order.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Loss on `windows` in eval mode with masks drawn from a fixed stream.
pub fn evaluate_loss(
    model: &MaeModel,
    store: &ParamStore,
    windows: &[SignalWindow],
    mask: &MaskConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let mut rng = RngState::derive(seed, "mae-eval-masks");
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&SignalWindow> = chunk.iter().collect();
        let plans = sample_batch_masks(mask, refs.len(), &mut rng)?;
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, &refs, &plans, None)?;
        total += g.value(fwd.loss).item() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Pretrains `store` in place and returns the selected checkpoint:
/// lowest validation loss for plain MAE, latest epoch with modality drop.
pub fn pretrain(
    model: &MaeModel,
    store: &mut ParamStore,
    train: &[SignalWindow],
    val: &[SignalWindow],
    cfg: &PretrainConfig,
    meta: &str,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("no pretraining windows".into()));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(store, cfg.schedule.base_lr, cfg.weight_decay);
    let mut order_rng = RngState::derive(cfg.seed, "mae-order");
    let mut mask_rng = RngState::derive(cfg.seed, "mae-masks");
    let mut drop_rng = RngState::derive(cfg.seed, "mae-dropout");
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let use_val = !val.is_empty() && cfg.strategy == Strategy::Mae;

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut order_rng);
        let n_batches = batches.len();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (i, idx) in batches.into_iter().enumerate() {
            lr = lr_at(epoch as f64 + i as f64 / n_batches as f64, &cfg.schedule)?;
            opt.lr = lr;
            let refs: Vec<&SignalWindow> = idx.iter().map(|&j| &train[j]).collect();
            let plans = sample_batch_masks(&cfg.mask, refs.len(), &mut mask_rng)?;
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, store, &refs, &plans, Some(&mut drop_rng))?;
            let loss = g.value(fwd.loss).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("loss {loss} at batch {i}") });
            }
            store.zero_grads();
            g.backward(fwd.loss, Some(store))
                .map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
            opt.step(store).map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
            loss_sum += loss * refs.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, store, val, &cfg.mask, cfg.batch_size, cfg.seed)?)
        };
        logs.push(EpochLog { epoch, lr, train_loss, val_loss });

        if use_val {
            let v = val_loss.expect("validation present");
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, store.clone()));
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
                let path = checkpoint_path(dir, cfg.strategy, epoch);
                save_checkpoint(&path, store, &format!("{meta};strategy={};epoch={epoch}", cfg.strategy.name()))?;
                checkpoints.push(path);
            }
        }
        if cfg.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() > s) {
            break;
        }
    }

    let (selected, selected_epoch) = match best {
        Some((_, e, s)) => (s, Some(e)),
        None => (store.clone(), logs.last().map(|l| l.epoch)),
    };
    Ok(PretrainOutcome { store: selected, selected_epoch, logs, checkpoints })
}

pub fn checkpoint_path(dir: &Path, strategy: Strategy, epoch: usize) -> PathBuf {
    dir.join(format!("{}_epoch{epoch:05}.pmck", strategy.name()))
}

/// Dropped-modality and all-masked reconstruction errors against a
/// mean predictor that outputs the training mean of each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    /// Masked MSE per modality when that modality is the dropped one.
    pub dropped_mse: [f64; N_MODALITIES],
    pub dropped_oracle_mse: [f64; N_MODALITIES],
    pub mean_dropped_mse: f64,
    pub mean_oracle_mse: f64,
}

/// Per-modality mean of all samples in `windows`.
pub fn modality_means(windows: &[SignalWindow]) -> [f64; N_MODALITIES] {
    let mut out = [0.0; N_MODALITIES];
    for m in Modality::ALL {
        let total: f64 = windows.iter().map(|w| w.channel(m).iter().sum::<f64>()).sum();
        out[m.index()] = total / (windows.len() * crate::dataio::WINDOW_SAMPLES).max(1) as f64;
    }
    out
}

/// Drops each modality in turn (other tokens masked at `mask.p`) and
/// measures the dropped modality's reconstruction error.
pub fn evaluate_dropped_reconstruction(
    model: &MaeModel,
    store: &ParamStore,
    windows: &[SignalWindow],
    train_means: [f64; N_MODALITIES],
    p: f64,
    seed: u64,
) -> Result<ReconReport> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let mut rng = RngState::derive(seed, "recon-eval");
    let mut mse = [0.0; N_MODALITIES];
    let mut oracle = [0.0; N_MODALITIES];
    let cfg = MaskConfig { p, modality_drop: true };
    cfg.validate()?;
    for m in Modality::ALL {
        for w in windows {
            let others: Vec<usize> = (0..MAX_TOKENS).filter(|t| t / TOKENS_PER_MODALITY != m.index()).collect();
            let k = (p * others.len() as f64).round() as usize;
            let mut masked: Vec<usize> = rng.choose_k(others.len(), k).into_iter().map(|i| others[i]).collect();
            masked.extend(m.index() * TOKENS_PER_MODALITY..(m.index() + 1) * TOKENS_PER_MODALITY);
            let plan = MaskPlan::from_masked(Some(m), &masked)?;
            let recon = model.reconstruct(store, w, &plan)?;
            mse[m.index()] += per_modality_masked_mse(&recon, w, &plan)[m.index()].expect("dropped is masked");
            let mu = train_means[m.index()];
            oracle[m.index()] +=
                w.channel(m).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w.channel(m).len() as f64;
        }
        mse[m.index()] /= windows.len() as f64;
        oracle[m.index()] /= windows.len() as f64;
    }
    Ok(ReconReport {
        dropped_mse: mse,
        dropped_oracle_mse: oracle,
        mean_dropped_mse: mse.iter().sum::<f64>() / N_MODALITIES as f64,
        mean_oracle_mse: oracle.iter().sum::<f64>() / N_MODALITIES as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Demographics, Gender, WINDOW_SAMPLES};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig { dim: 8, conv_filters: 4, conv_kernel: 5, pool: CHUNK_SAMPLES },
            encoder: EncoderConfig { n_layers: 1, n_heads: 2, dim: 8, dropout: 0.0, ff_width: 16 },
            mask_token_modality_emb: true,
        }
    }

    fn window(seed: u64) -> SignalWindow {
        let mut rng = RngState::new(seed);
        SignalWindow {
            patient_id: format!("w{seed}"),
            index: 0,
            data: (0..4 * WINDOW_SAMPLES).map(|_| rng.normal()).collect(),
            label: None,
            demographics: Demographics { age_years: 30.0, gender: Gender::Male },
        }
    }

    #[test]
    fn loss_arithmetic() {
        let w = window(1);
        let plan = MaskPlan::from_masked(None, &[3]).unwrap();
        let mut recon: Vec<DArray> = (0..4).map(|_| DArray::full(&[30, 100], 123.0)).collect();
        for p in 0..30 {
            recon[0].row_mut(p).copy_from_slice(w.chunk(Modality::Eeg, p));
        }
        assert_eq!(masked_reconstruction_loss(&recon, &w, &plan).unwrap(), 0.0);
        for (r, t) in recon[0].row_mut(3).iter_mut().zip(w.chunk(Modality::Eeg, 3)) {
            *r = t + 1.0;
        }
        assert!((masked_reconstruction_loss(&recon, &w, &plan).unwrap() - 1.0).abs() < 1e-12);
        for (r, t) in recon[0].row_mut(3).iter_mut().zip(w.chunk(Modality::Eeg, 3)) {
            *r = t + 2.0;
        }
        assert!((masked_reconstruction_loss(&recon, &w, &plan).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(masked_reconstruction_loss(&recon, &w, &MaskPlan::none()).unwrap(), 0.0);
    }

    #[test]
    fn graph_loss_matches_reference() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let model = MaeModel::new(&mut store, tiny_cfg(), &mut rng).unwrap();
        let w = window(2);
        let plans = sample_batch_masks(&MaskConfig::standard(true), 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &store, &[&w], &plans, None).unwrap();
        let recon = model.reconstruct(&store, &w, &plans[0]).unwrap();
        let want = masked_reconstruction_loss(&recon, &w, &plans[0]).unwrap();
        assert!((g.value(fwd.loss).item() - want).abs() < 1e-10);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let model = MaeModel::new(&mut store, tiny_cfg(), &mut rng).unwrap();
        let before = store.hash_prefix("");
        let out = pretrain(&model, &mut store, &[window(1)], &[], &PretrainConfig::new(Strategy::Mae, 0), "").unwrap();
        assert_eq!(out.store.hash_prefix(""), before);
        assert!(out.logs.is_empty());
        assert_eq!(out.selected_epoch, None);
    }

    #[test]
    fn strategy_mask_mismatch_rejected() {
        let mut cfg = PretrainConfig::new(Strategy::Mae, 1);
        cfg.mask.modality_drop = true;
        assert!(cfg.validate().is_err());
    }
}
