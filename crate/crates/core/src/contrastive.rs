//! Late-fusion contrastive baselines: one tokenizer + encoder stack per
//! modality, MLP projection heads, and the SimCLR-style and CLIP-style losses.

use std::time::Instant;

use crate::dataio::{Modality, SignalWindow, N_MODALITIES, TOKENS_PER_MODALITY, WINDOW_SAMPLES};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalprobe::{pool_graph, Representation};
use crate::mae::{epoch_batches, EpochLog};
use crate::numerics::nn::{DropoutRng, Linear};
use crate::numerics::{lr_at, AdamW, Graph, ParamStore, RngState, ScheduleConfig, Var};
use crate::tokenizers::{TokenTag, Tokenizer, TokenizerConfig};

pub const LATE_PREFIX: &str = "late";
pub const PROJECTION_PREFIX: &str = "proj";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveStyle {
    SimClr,
    ClipPair,
    ClipLoo,
}

impl ContrastiveStyle {
    pub const ALL: [ContrastiveStyle; 3] = [ContrastiveStyle::SimClr, ContrastiveStyle::ClipPair, ContrastiveStyle::ClipLoo];

    pub fn name(self) -> &'static str {
        match self {
            ContrastiveStyle::SimClr => "simclr",
            ContrastiveStyle::ClipPair => "clip-pair",
            ContrastiveStyle::ClipLoo => "clip-loo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown contrastive style {s:?}")))
    }
}

/// Per-channel augmentation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Noise standard deviation relative to the channel's standard deviation.
    pub noise_sigma: f64,
    /// Amplitude factor drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
    /// Length of the zeroed span, in samples.
    pub mask_samples: usize,
    /// Chance that a channel gets a zeroed span.
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { noise_sigma: 0.05, scale: 0.1, mask_samples: 100, mask_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { noise_sigma: 0.0, scale: 0.0, mask_samples: 0, mask_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.scale) || !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("augmentation needs noise >= 0, scale and mask_prob in [0, 1]".into()));
        }
        if self.mask_samples > WINDOW_SAMPLES {
            return Err(Error::Config(format!("time mask of {} samples exceeds the window", self.mask_samples)));
        }
        Ok(())
    }
}

/// Noise, then scaling, then a zeroed span, drawn independently per channel.
pub fn augment(window: &SignalWindow, rng: &mut RngState, cfg: &AugmentConfig) -> SignalWindow {
    let mut out = window.clone();
    for m in Modality::ALL {
        let ch = out.channel_mut(m);
        if cfg.noise_sigma > 0.0 {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let std = (ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            for v in ch.iter_mut() {
                *v += cfg.noise_sigma * std * rng.normal();
            }
        }
        if cfg.scale > 0.0 {
            let f = rng.uniform_range(1.0 - cfg.scale, 1.0 + cfg.scale);
            ch.iter_mut().for_each(|v| *v *= f);
        }
        if cfg.mask_samples > 0 && rng.bernoulli(cfg.mask_prob) {
            let start = rng.below(WINDOW_SAMPLES - cfg.mask_samples + 1);
            ch[start..start + cfg.mask_samples].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LateFusionConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub proj_hidden: usize,
    pub proj_out: usize,
}

impl Default for LateFusionConfig {
    fn default() -> Self {
        LateFusionConfig {
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig { n_layers: 2, ..EncoderConfig::default() },
            proj_hidden: 256,
            proj_out: 128,
        }
    }
}

/// `dim -> hidden -> out` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut RngState) -> Self {
        ProjectionHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

/// One single-modality stack.
#[derive(Clone, Debug)]
pub struct ModalityStack {
    pub modality: Modality,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
}

#[derive(Clone, Debug)]
pub struct LateFusionModel {
    pub cfg: LateFusionConfig,
    pub stacks: Vec<ModalityStack>,
    pub heads: Vec<ProjectionHead>,
}

impl LateFusionModel {
    pub fn new(store: &mut ParamStore, cfg: LateFusionConfig, rng: &mut RngState) -> Result<Self> {
        cfg.tokenizer.validate()?;
        cfg.encoder.validate()?;
        if cfg.tokenizer.dim != cfg.encoder.dim || cfg.proj_hidden == 0 || cfg.proj_out == 0 {
            return Err(Error::Config("late-fusion widths are inconsistent".into()));
        }
        let mut stacks = Vec::with_capacity(N_MODALITIES);
        let mut heads = Vec::with_capacity(N_MODALITIES);
        for m in Modality::ALL {
            let key = m.name().to_lowercase();
            let base = format!("{LATE_PREFIX}.{key}");
            stacks.push(ModalityStack {
                modality: m,
                tokenizer: Tokenizer::with_modalities(store, &format!("{base}.tokenizer"), cfg.tokenizer.clone(), &[m], rng)?,
                encoder: Encoder::new(store, &format!("{base}.encoder"), cfg.encoder.clone(), rng)?,
            });
            heads.push(ProjectionHead::new(
                store,
                &format!("{PROJECTION_PREFIX}.{key}"),
                cfg.encoder.dim,
                cfg.proj_hidden,
                cfg.proj_out,
                rng,
            ));
        }
        Ok(LateFusionModel { cfg, stacks, heads })
    }

    /// Pooled encoder output per modality, each `[batch, dim]`.
    pub fn pooled(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
        mut rng: DropoutRng<'_>,
    ) -> Result<Vec<Var>> {
        self.stacks
            .iter()
            .map(|s| {
                let tags: Vec<TokenTag> =
                    (0..TOKENS_PER_MODALITY).map(|position| TokenTag { modality: s.modality, position }).collect();
                let x = s.tokenizer.embed_tokens(g, store, windows, &vec![tags; windows.len()])?;
                let pass = s.encoder.forward(g, store, x, windows.len(), rng.as_deref_mut())?;
                pool_graph(g, pass.out, windows.len())
            })
            .collect()
    }

    /// Projected representation per modality, each `[batch, proj_out]`.
    pub fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
        rng: DropoutRng<'_>,
    ) -> Result<Vec<Var>> {
        let pooled = self.pooled(g, store, windows, rng)?;
        Ok(pooled.into_iter().zip(&self.heads).map(|(p, h)| h.forward(g, store, p)).collect())
    }
}

impl Representation for LateFusionModel {
    fn feature_dim(&self) -> usize {
        N_MODALITIES * self.cfg.encoder.dim
    }

    fn features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let parts = self.pooled(g, store, windows, rng)?;
        Ok(g.concat_cols(&parts))
    }

    fn prefixes(&self) -> Vec<String> {
        vec![LATE_PREFIX.to_string()]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Cosine similarities between the rows of `a` and `b`, times `tau`.
fn scaled_cosine(g: &mut Graph, a: Var, b: Var, tau: f64) -> Var {
    let za = g.l2_normalize_rows(a);
    let zb = g.l2_normalize_rows(b);
    let zbt = g.transpose(zb);
    let s = g.matmul(za, zbt);
    g.scale(s, tau)
}

/// InfoNCE over `reps: [2N, F]` whose rows `2i` and `2i + 1` are positives;
/// every other row but the anchor itself is a negative.
pub fn simclr_loss(g: &mut Graph, reps: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = g.value(reps).rows();
    if n < 2 || n % 2 != 0 {
        return Err(Error::InsufficientData(format!("{n} rows do not form adjacent-window pairs")));
    }
    let logits = scaled_cosine(g, reps, reps, tau);
    let labels: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
    let exclude: Vec<bool> = (0..n * n).map(|k| k / n == k % n).collect();
    Ok(g.cross_entropy(logits, &labels, &vec![1.0; n], Some(&exclude)))
}

fn check_modality_reps(g: &Graph, reps: &[Var]) -> Result<usize> {
    if reps.len() < 2 {
        return Err(Error::InvalidArgument("need at least two modalities".into()));
    }
    let n = g.value(reps[0]).rows();
    if reps.iter().any(|&r| g.value(r).rows() != n || g.value(r).cols() != g.value(reps[0]).cols()) {
        return Err(Error::shape("clip_loss", "modality representations differ in shape"));
    }
    if n < 2 {
        return Err(Error::InsufficientData("contrastive batch needs N >= 2".into()));
    }
    Ok(n)
}

/// Mean over ordered modality pairs `i != j` and samples `k` of the
/// cross-entropy of matching `x^i_k` to `x^j_k` among all `x^j_m`.
pub fn clip_pair_loss(g: &mut Graph, reps: &[Var], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = check_modality_reps(g, reps)?;
    let labels: Vec<usize> = (0..n).collect();
    let mut terms = Vec::new();
    for (i, &a) in reps.iter().enumerate() {
        for (j, &b) in reps.iter().enumerate() {
            if i != j {
                let logits = scaled_cosine(g, a, b, tau);
                terms.push(g.cross_entropy(logits, &labels, &vec![1.0; n], None));
            }
        }
    }
    Ok(average(g, &terms))
}

/// Like [`clip_pair_loss`] but each modality is matched against the mean of
/// the other modalities' representations.
pub fn clip_loo_loss(g: &mut Graph, reps: &[Var], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = check_modality_reps(g, reps)?;
    let labels: Vec<usize> = (0..n).collect();
    let mut terms = Vec::new();
    for (i, &a) in reps.iter().enumerate() {
        let others: Vec<Var> = reps.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &r)| r).collect();
        let mean = leave_one_out_mean(g, &others);
        let logits = scaled_cosine(g, a, mean, tau);
        terms.push(g.cross_entropy(logits, &labels, &vec![1.0; n], None));
    }
    Ok(average(g, &terms))
}

fn leave_one_out_mean(g: &mut Graph, others: &[Var]) -> Var {
    let mut sum = others[0];
    for &o in &others[1..] {
        sum = g.add(sum, o);
    }
    g.scale(sum, 1.0 / others.len() as f64)
}

fn average(g: &mut Graph, terms: &[Var]) -> Var {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    g.scale(total, 1.0 / terms.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub style: ContrastiveStyle,
    pub temperature: f64,
    pub epochs: usize,
    /// Windows per batch; SimCLR batches hold `batch_size / 2` pairs.
    pub batch_size: usize,
    pub augment: AugmentConfig,
    /// Also augment the inputs of the CLIP-style objectives.
    pub augment_clip: bool,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_seconds: Option<f64>,
}

impl ContrastiveConfig {
    pub fn new(style: ContrastiveStyle, epochs: usize) -> Self {
        ContrastiveConfig {
            style,
            temperature: 0.1,
            epochs,
            batch_size: 32,
            augment: AugmentConfig::default(),
            augment_clip: false,
            schedule: ScheduleConfig::for_epochs(epochs),
            weight_decay: 0.05,
            seed: 0,
            max_seconds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.temperature).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size < 2 || (self.style == ContrastiveStyle::SimClr && self.batch_size < 4) {
            return Err(Error::Config(format!("batch size {} is too small for {}", self.batch_size, self.style.name())));
        }
        self.augment.validate()?;
        self.schedule.validate()
    }
}

/// Index pairs of windows `(t, t + 1)` of the same patient.
pub fn adjacent_pairs(windows: &[SignalWindow]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        (windows[a].patient_id.as_str(), windows[a].index).cmp(&(windows[b].patient_id.as_str(), windows[b].index))
    });
    order
        .windows(2)
        .filter(|p| {
            let (a, b) = (&windows[p[0]], &windows[p[1]]);
            a.patient_id == b.patient_id && a.index + 1 == b.index
        })
        .map(|p| (p[0], p[1]))
        .collect()
}

/// Loss of one batch. For SimCLR `windows` alternates pair partners.
pub fn batch_loss(
    model: &LateFusionModel,
    g: &mut Graph,
    store: &ParamStore,
    windows: &[&SignalWindow],
    cfg: &ContrastiveConfig,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    let reps = model.project(g, store, windows, rng)?;
    match cfg.style {
        ContrastiveStyle::SimClr => {
            let joint = g.concat_cols(&reps);
            simclr_loss(g, joint, cfg.temperature)
        }
        ContrastiveStyle::ClipPair => clip_pair_loss(g, &reps, cfg.temperature),
        ContrastiveStyle::ClipLoo => clip_loo_loss(g, &reps, cfg.temperature),
    }
}

/// Batches of owned (possibly augmented) windows for one pass over `windows`.
fn make_batches(
    windows: &[SignalWindow],
    pairs: &[(usize, usize)],
    cfg: &ContrastiveConfig,
    order_rng: &mut RngState,
    aug_rng: &mut RngState,
) -> Vec<Vec<SignalWindow>> {
    let aug = |w: &SignalWindow, rng: &mut RngState, on: bool| if on { augment(w, rng, &cfg.augment) } else { w.clone() };
    match cfg.style {
        ContrastiveStyle::SimClr => epoch_batches(pairs.len(), cfg.batch_size / 2, order_rng)
            .into_iter()
            .filter(|b| b.len() >= 2)
            .map(|b| {
                b.iter()
                    .flat_map(|&p| [pairs[p].0, pairs[p].1])
                    .map(|i| aug(&windows[i], aug_rng, true))
                    .collect()
            })
            .collect(),
        _ => epoch_batches(windows.len(), cfg.batch_size, order_rng)
            .into_iter()
            .filter(|b| b.len() >= 2)
            .map(|b| b.iter().map(|&i| aug(&windows[i], aug_rng, cfg.augment_clip)).collect())
            .collect(),
    }
}

/// Mean batch loss in eval mode with a fixed batch order and augmentation stream.
pub fn evaluate_contrastive(
    model: &LateFusionModel,
    store: &ParamStore,
    windows: &[SignalWindow],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let pairs = adjacent_pairs(windows);
    let mut order_rng = RngState::derive(cfg.seed, "contrastive-eval-order");
    let mut aug_rng = RngState::derive(cfg.seed, "contrastive-eval-augment");
    let batches = make_batches(windows, &pairs, cfg, &mut order_rng, &mut aug_rng);
    if batches.is_empty() {
        return Err(Error::InsufficientData(format!("no {} batch can be formed", cfg.style.name())));
    }
    let mut total = 0.0;
    for b in &batches {
        let refs: Vec<&SignalWindow> = b.iter().collect();
        let mut g = Graph::new();
        let l = batch_loss(model, &mut g, store, &refs, cfg, None)?;
        total += g.value(l).item();
    }
    Ok(total / batches.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutcome {
    pub store: ParamStore,
    pub selected_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
}

/// Trains `store` in place; returns the lowest-validation-loss epoch, or the
/// last one without validation data.
pub fn pretrain_contrastive(
    model: &LateFusionModel,
    store: &mut ParamStore,
    train: &[SignalWindow],
    val: &[SignalWindow],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutcome> {
    cfg.validate()?;
    let pairs = adjacent_pairs(train);
    if cfg.style == ContrastiveStyle::SimClr && pairs.len() < 2 {
        return Err(Error::InsufficientData("SimCLR needs at least two adjacent-window pairs".into()));
    }
    if train.len() < 2 {
        return Err(Error::InsufficientData("contrastive pretraining needs two windows".into()));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(store, cfg.schedule.base_lr, cfg.weight_decay);
    let mut order_rng = RngState::derive(cfg.seed, "contrastive-order");
    let mut aug_rng = RngState::derive(cfg.seed, "contrastive-augment");
    let mut drop_rng = RngState::derive(cfg.seed, "contrastive-dropout");
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let batches = make_batches(train, &pairs, cfg, &mut order_rng, &mut aug_rng);
        let n_batches = batches.len();
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (i, b) in batches.iter().enumerate() {
            lr = lr_at(epoch as f64 + i as f64 / n_batches as f64, &cfg.schedule)?;
            opt.lr = lr;
            let refs: Vec<&SignalWindow> = b.iter().collect();
            let mut g = Graph::new();
            let loss = batch_loss(model, &mut g, store, &refs, cfg, Some(&mut drop_rng))?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("loss {v} at batch {i}") });
            }
            store.zero_grads();
            g.backward(loss, Some(store)).map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
            opt.step(store).map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
            loss_sum += v;
        }
        let val_loss = if val.is_empty() { None } else { Some(evaluate_contrastive(model, store, val, cfg)?) };
        logs.push(EpochLog { epoch, lr, train_loss: loss_sum / n_batches.max(1) as f64, val_loss });
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, store.clone()));
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
    Ok(ContrastiveOutcome { store: selected, selected_epoch, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Demographics, Gender};
    use crate::numerics::gradcheck::check_inputs;
    use crate::numerics::DArray;

    fn value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> DArray {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        DArray::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn uniform_similarity_gives_log_n() {
        let same = DArray::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]).unwrap();
        for tau in [0.1, 1.0, 7.0] {
            let pair = value(|g| {
                let reps: Vec<Var> = (0..4).map(|_| g.constant(same.clone())).collect();
                clip_pair_loss(g, &reps, tau)
            });
            let loo = value(|g| {
                let reps: Vec<Var> = (0..4).map(|_| g.constant(same.clone())).collect();
                clip_loo_loss(g, &reps, tau)
            });
            let sim = value(|g| {
                let r = g.constant(same.clone());
                simclr_loss(g, r, tau)
            });
            assert!((pair - 4f64.ln()).abs() < 1e-9);
            assert!((loo - 4f64.ln()).abs() < 1e-9);
            // one positive and two negatives once the anchor is excluded
            assert!((sim - 3f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_sample_hand_case() {
        let basis = DArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((expected - 0.3133).abs() < 1e-4);
        for loo in [false, true] {
            let l = value(|g| {
                let reps: Vec<Var> = (0..4).map(|_| g.constant(basis.clone())).collect();
                if loo {
                    clip_loo_loss(g, &reps, 1.0)
                } else {
                    clip_pair_loss(g, &reps, 1.0)
                }
            });
            assert!((l - expected).abs() < 1e-6, "{l}");
        }
    }

    #[test]
    fn simclr_hand_case() {
        // rows 0,1 identical, rows 2,3 orthogonal to them: anchor 0 sees
        // sims (1, 0, 0) to (1, 2, 3)
        let reps = DArray::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let l = value(|g| {
            let r = g.constant(reps.clone());
            simclr_loss(g, r, 1.0)
        });
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn strong_alignment_drives_loss_to_zero() {
        let basis = DArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = value(|g| {
            let reps: Vec<Var> = (0..4).map(|_| g.constant(basis.clone())).collect();
            clip_pair_loss(g, &reps, 60.0)
        });
        assert!(l < 1e-20);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut g = Graph::new();
        let one = g.constant(DArray::zeros(&[1, 3]));
        assert!(clip_pair_loss(&mut g, &[one, one], 1.0).is_err());
        let three = g.constant(DArray::zeros(&[3, 3]));
        assert!(simclr_loss(&mut g, three, 1.0).is_err());
        let four = g.constant(DArray::zeros(&[4, 3]));
        assert!(simclr_loss(&mut g, four, 0.0).is_err());
    }

    #[test]
    fn losses_are_rotation_invariant() {
        let mut rng = RngState::new(3);
        // random orthogonal 5x5 via Gram-Schmidt
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < 5 {
            let mut v: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.iter().map(|x| x / n).collect());
        }
        let q = DArray::from_rows(&q).unwrap();
        let reps: Vec<DArray> = (0..4).map(|_| random(3, 5, &mut rng)).collect();
        for loo in [false, true] {
            let run = |rotate: bool| {
                value(|g| {
                    let qv = g.constant(q.clone());
                    let vs: Vec<Var> = reps
                        .iter()
                        .map(|r| {
                            let v = g.constant(r.clone());
                            if rotate {
                                g.matmul(v, qv)
                            } else {
                                v
                            }
                        })
                        .collect();
                    if loo {
                        clip_loo_loss(g, &vs, 0.7)
                    } else {
                        clip_pair_loss(g, &vs, 0.7)
                    }
                })
            };
            assert!((run(false) - run(true)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = RngState::new(11);
        let reps: Vec<DArray> = (0..4).map(|_| random(3, 5, &mut rng)).collect();
        let pair = check_inputs(&reps, 1e-6, |g, v| clip_pair_loss(g, v, 2.0).unwrap());
        let loo = check_inputs(&reps, 1e-6, |g, v| clip_loo_loss(g, v, 2.0).unwrap());
        let sim = check_inputs(&[random(6, 5, &mut rng)], 1e-6, |g, v| simclr_loss(g, v[0], 2.0).unwrap());
        for r in [pair, loo, sim] {
            assert!(r.max_rel_error < 1e-4, "{}", r.worst);
        }
    }

    fn window(id: &str, index: usize, seed: u64) -> SignalWindow {
        let mut rng = RngState::new(seed);
        SignalWindow {
            patient_id: id.into(),
            index,
            data: (0..N_MODALITIES * WINDOW_SAMPLES).map(|_| rng.normal()).collect(),
            label: None,
            demographics: Demographics { age_years: 40.0, gender: Gender::Male },
        }
    }

    #[test]
    fn augmentation_examples() {
        let w = window("a", 0, 1);
        let mut rng = RngState::new(0);
        assert_eq!(augment(&w, &mut rng, &AugmentConfig::identity()), w);
        let one_second = AugmentConfig { mask_samples: 100, mask_prob: 1.0, ..AugmentConfig::identity() };
        let a = augment(&w, &mut rng, &one_second);
        for m in Modality::ALL {
            let zeroed = a.channel(m).iter().zip(w.channel(m)).filter(|(x, y)| **x == 0.0 && **y != 0.0).count();
            assert_eq!(zeroed, 100);
        }
        let noisy = augment(&w, &mut rng, &AugmentConfig::default());
        assert_ne!(noisy, w);
        assert!(noisy.is_valid());
    }

    #[test]
    fn adjacent_pairs_stay_within_patients() {
        let ws = vec![window("b", 1, 0), window("a", 0, 1), window("b", 0, 2), window("a", 2, 3), window("a", 1, 4)];
        let pairs = adjacent_pairs(&ws);
        let named: Vec<(String, usize, usize)> =
            pairs.iter().map(|&(x, y)| (ws[x].patient_id.clone(), ws[x].index, ws[y].index)).collect();
        assert_eq!(named, vec![("a".into(), 0, 1), ("a".into(), 1, 2), ("b".into(), 0, 1)]);
    }

    fn tiny() -> LateFusionConfig {
        LateFusionConfig {
            tokenizer: TokenizerConfig { dim: 8, conv_filters: 4, conv_kernel: 5, pool: 100 },
            encoder: EncoderConfig { n_layers: 1, n_heads: 2, dim: 8, dropout: 0.0, ff_width: 16 },
            proj_hidden: 6,
            proj_out: 4,
        }
    }

    #[test]
    fn late_fusion_shapes_and_separation() {
        let mut store = ParamStore::new();
        let model = LateFusionModel::new(&mut store, tiny(), &mut RngState::new(0)).unwrap();
        let ws = [window("a", 0, 1), window("a", 1, 2), window("b", 0, 3)];
        let refs: Vec<&SignalWindow> = ws.iter().collect();
        let mut g = Graph::new();
        let reps = model.project(&mut g, &store, &refs, None).unwrap();
        assert_eq!(reps.len(), 4);
        assert!(reps.iter().all(|&r| g.shape(r) == [3, 4]));
        let f = model.features(&mut g, &store, &refs, None).unwrap();
        assert_eq!(g.shape(f), [3, 32]);
        // no parameter is shared between modality stacks
        for id in store.ids() {
            let n = store.name(id);
            assert!(n.starts_with("late.") || n.starts_with("proj."), "{n}");
        }
        let eeg_conv = store.find("late.eeg.tokenizer.eeg.conv.weight");
        assert!(eeg_conv.is_some());
        assert!(store.find("late.eeg.tokenizer.emg.conv.weight").is_none());
    }

    #[test]
    fn pretraining_runs_and_is_deterministic() {
        let ws: Vec<SignalWindow> = (0..8).map(|i| window(if i < 4 { "a" } else { "b" }, i % 4, i as u64)).collect();
        for style in ContrastiveStyle::ALL {
            let mut cfg = ContrastiveConfig::new(style, 2);
            cfg.batch_size = 4;
            cfg.schedule.base_lr = 1e-3;
            let run = || {
                let mut store = ParamStore::new();
                let model = LateFusionModel::new(&mut store, tiny(), &mut RngState::new(0)).unwrap();
                let out = pretrain_contrastive(&model, &mut store, &ws, &[], &cfg).unwrap();
                out.logs.iter().map(|l| l.train_loss).collect::<Vec<_>>()
            };
            let a = run();
            assert_eq!(a.len(), 2);
            assert!(a.iter().all(|v| v.is_finite()));
            assert_eq!(a, run());
        }
    }
}
