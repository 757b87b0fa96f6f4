//! Flat `key = value` experiment configuration.
//!
//! Grammar: one `key = value` per line, `#` starts a comment, blank lines
//! are ignored. Keys are dotted names from [`SCHEMA`]; unknown or repeated
//! keys are errors. Lists are comma separated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::analysis::RsvConfig;
use crate::contrastive::{AugmentConfig, ContrastiveConfig, ContrastiveStyle, LateFusionConfig};
use crate::dataio::{Modality, PreprocessConfig, SplitConfig, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalprobe::{ProbeConfig, Task};
use crate::mae::{ModelConfig, PretrainConfig, Strategy};
use crate::masking::MaskConfig;
use crate::numerics::ScheduleConfig;
use crate::tokenizers::TokenizerConfig;

/// Overrides `output.dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "PHYSIO_MAE_OUTPUT_ROOT";

/// `(key, default, description)`.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed; every stream is derived from it"),
    ("output.dir", "runs", "directory for all artifacts"),
    ("data.raw_dir", "data/raw", "dataset written by generate-data"),
    ("data.dir", "data/processed", "preprocessed 100 Hz dataset"),
    ("synth.n_patients", "64", ""),
    ("synth.n_labeled", "32", "the first n patients carry window labels"),
    ("synth.windows_per_patient", "8", ""),
    ("synth.states", "5", "latent states, mapped onto the sleep stages"),
    ("synth.stay_prob", "0.85", "probability of keeping the state between windows"),
    ("synth.coupling", "1.0", "weight of the slow wave shared across modalities"),
    ("synth.noise", "0.1", "white noise standard deviation"),
    ("synth.arousal_rate", "0.027", "per-window arousal probability"),
    ("synth.slow_hz_min", "0.15", ""),
    ("synth.slow_hz_max", "0.25", ""),
    ("synth.sample_rate", "200", "Hz"),
    ("preprocess.transition_hz", "0.1", "FIR transition width"),
    ("preprocess.target_rate", "100", "Hz after decimation"),
    ("split.n_labeled_pretrain", "8", "labeled patients added to pretraining"),
    ("split.n_train", "12", ""),
    ("split.n_validation", "4", ""),
    ("split.n_test", "8", ""),
    ("model.dim", "512", ""),
    ("model.conv_filters", "64", ""),
    ("model.conv_kernel", "21", ""),
    ("model.pool", "100", "max-pool window in samples"),
    ("model.layers", "8", ""),
    ("model.heads", "8", ""),
    ("model.ff_width", "2048", ""),
    ("model.dropout", "0.1", ""),
    ("model.mask_token_modality_emb", "true", "add modality embeddings to mask tokens"),
    ("mask.p", "auto", "token mask ratio; auto is 0.6 with modality drop, else 0.7"),
    ("pretrain.strategy", "mae_moddrop", "mae, mae_moddrop, simclr, clip-pair, clip-loo"),
    ("pretrain.epochs", "2000", ""),
    ("pretrain.batch_size", "32", ""),
    ("pretrain.lr", "1e-4", "peak learning rate"),
    ("pretrain.min_lr", "0", ""),
    ("pretrain.warmup_epochs", "10", "capped at the epoch count"),
    ("pretrain.weight_decay", "0.05", ""),
    ("pretrain.max_seconds", "none", "wall-clock budget checked between epochs"),
    ("pretrain.checkpoint_every", "100", "epochs between saved checkpoints"),
    ("contrastive.temperature", "0.1", "multiplies the cosine similarity"),
    ("contrastive.layers", "2", "depth of each per-modality encoder"),
    ("contrastive.proj_hidden", "256", ""),
    ("contrastive.proj_out", "128", ""),
    ("contrastive.augment_clip", "false", "augment the CLIP-style inputs too"),
    ("augment.noise_sigma", "0.05", "relative to the channel standard deviation"),
    ("augment.scale", "0.1", ""),
    ("augment.mask_samples", "100", ""),
    ("augment.mask_prob", "0.5", ""),
    ("probe.tasks", "sleep,age,arousal", ""),
    ("probe.modalities", "eeg,emg,eog,ecg", "modalities fed to the encoder"),
    ("probe.epochs", "200", ""),
    ("probe.batch_size", "32", ""),
    ("probe.lr", "1e-3", ""),
    ("probe.weight_decay", "0", ""),
    ("probe.smoothing", "false", "tolerate classes absent from the training labels"),
    ("probe.seeds", "0,1,2,3,4", ""),
    ("finetune.epochs", "20", ""),
    ("finetune.lr", "1e-4", ""),
    ("analysis.window", "0", "test window used for attention traces"),
    ("analysis.n_contexts", "10", ""),
    ("analysis.n_vary", "100", ""),
    ("analysis.normalize", "false", "normalize variances before the softmax"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                split_pair(line).ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: key {k} set twice", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies `key=value` overrides, then revalidates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = split_pair(o).ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not in the schema"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let x: f64 = self.parsed(key)?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Config(format!("{key} must be finite")))
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    fn optional_f64(&self, key: &str, none: &str) -> Result<Option<f64>> {
        if self.get(key) == none {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    fn list(&self, key: &str) -> Vec<&str> {
        self.get(key).split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    }

    /// Builds every typed section once so bad values fail at load time.
    pub fn validate(&self) -> Result<()> {
        self.synth()?.validate()?;
        self.preprocess()?;
        self.split()?;
        self.model()?.validate()?;
        self.strategy()?;
        self.pretrain()?;
        self.contrastive()?;
        self.late_fusion()?;
        for t in self.tasks()? {
            self.probe(t, false)?.validate()?;
            self.probe(t, true)?.validate()?;
        }
        self.probe_modalities()?;
        self.probe_seeds()?;
        self.rsv()?;
        self.usize("analysis.window")?;
        Ok(())
    }

    /// SHA-256 over every effective `key=value`, sorted by key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// All effective values in file syntax.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    /// `output.dir`, unless the environment override is set.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => PathBuf::from(self.get("output.dir")),
        }
    }

    pub fn raw_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data.raw_dir"))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data.dir"))
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let states = self.usize("synth.states")?;
        Ok(SynthConfig {
            n_patients: self.usize("synth.n_patients")?,
            n_labeled: self.usize("synth.n_labeled")?,
            windows_per_patient: self.usize("synth.windows_per_patient")?,
            states: crate::dataio::synth::default_states(states),
            stay_prob: self.f64("synth.stay_prob")?,
            coupling: self.f64("synth.coupling")?,
            noise_std: self.f64("synth.noise")?,
            arousal_rate: self.f64("synth.arousal_rate")?,
            slow_hz: (self.f64("synth.slow_hz_min")?, self.f64("synth.slow_hz_max")?),
            sample_rate_hz: self.f64("synth.sample_rate")?,
            seed: self.seed()?,
        })
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig> {
        let cfg = PreprocessConfig {
            transition_hz: self.f64("preprocess.transition_hz")?,
            target_rate_hz: self.f64("preprocess.target_rate")?,
            ..PreprocessConfig::default()
        };
        if cfg.transition_hz <= 0.0 || cfg.target_rate_hz <= 0.0 {
            return Err(Error::Config("preprocess rates must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn split(&self) -> Result<SplitConfig> {
        Ok(SplitConfig {
            n_labeled_pretrain: self.usize("split.n_labeled_pretrain")?,
            n_train: self.usize("split.n_train")?,
            n_validation: self.usize("split.n_validation")?,
            n_test: self.usize("split.n_test")?,
            seed: self.seed()?,
        })
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            n_layers: self.usize("model.layers")?,
            n_heads: self.usize("model.heads")?,
            dim: self.usize("model.dim")?,
            dropout: self.f64("model.dropout")?,
            ff_width: self.usize("model.ff_width")?,
        })
    }

    pub fn tokenizer(&self) -> Result<TokenizerConfig> {
        Ok(TokenizerConfig {
            dim: self.usize("model.dim")?,
            conv_filters: self.usize("model.conv_filters")?,
            conv_kernel: self.usize("model.conv_kernel")?,
            pool: self.usize("model.pool")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            tokenizer: self.tokenizer()?,
            encoder: self.encoder()?,
            mask_token_modality_emb: self.bool("model.mask_token_modality_emb")?,
        })
    }

    pub fn strategy(&self) -> Result<StrategyKind> {
        StrategyKind::parse(self.get("pretrain.strategy"))
    }

    fn schedule(&self, epochs: usize, lr_key: &str) -> Result<ScheduleConfig> {
        let total = epochs.max(1);
        Ok(ScheduleConfig {
            warmup_epochs: self.usize("pretrain.warmup_epochs")?.min(total),
            base_lr: self.f64(lr_key)?,
            total_epochs: total,
            min_lr: self.f64("pretrain.min_lr")?,
        })
    }

    /// MAE pretraining settings; the strategy comes from `pretrain.strategy`
    /// unless it names a contrastive objective, in which case MAE+drop is used.
    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let strategy = match self.strategy()? {
            StrategyKind::Mae(s) => s,
            StrategyKind::Contrastive(_) => Strategy::MaeModDrop,
        };
        self.pretrain_for(strategy)
    }

    pub fn pretrain_for(&self, strategy: Strategy) -> Result<PretrainConfig> {
        let epochs = self.usize("pretrain.epochs")?;
        let mut mask = MaskConfig::standard(strategy.modality_drop());
        if let Some(p) = self.optional_f64("mask.p", "auto")? {
            mask.p = p;
        }
        let cfg = PretrainConfig {
            batch_size: self.usize("pretrain.batch_size")?,
            mask,
            schedule: self.schedule(epochs, "pretrain.lr")?,
            weight_decay: self.f64("pretrain.weight_decay")?,
            seed: self.seed()?,
            max_seconds: self.optional_f64("pretrain.max_seconds", "none")?,
            checkpoint_every: self.usize("pretrain.checkpoint_every")?,
            ..PretrainConfig::new(strategy, epochs)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn contrastive(&self) -> Result<ContrastiveConfig> {
        let style = match self.strategy()? {
            StrategyKind::Contrastive(s) => s,
            StrategyKind::Mae(_) => ContrastiveStyle::SimClr,
        };
        self.contrastive_for(style)
    }

    pub fn contrastive_for(&self, style: ContrastiveStyle) -> Result<ContrastiveConfig> {
        let epochs = self.usize("pretrain.epochs")?;
        let cfg = ContrastiveConfig {
            temperature: self.f64("contrastive.temperature")?,
            batch_size: self.usize("pretrain.batch_size")?,
            augment: AugmentConfig {
                noise_sigma: self.f64("augment.noise_sigma")?,
                scale: self.f64("augment.scale")?,
                mask_samples: self.usize("augment.mask_samples")?,
                mask_prob: self.f64("augment.mask_prob")?,
            },
            augment_clip: self.bool("contrastive.augment_clip")?,
            schedule: self.schedule(epochs, "pretrain.lr")?,
            weight_decay: self.f64("pretrain.weight_decay")?,
            seed: self.seed()?,
            max_seconds: self.optional_f64("pretrain.max_seconds", "none")?,
            ..ContrastiveConfig::new(style, epochs)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn late_fusion(&self) -> Result<LateFusionConfig> {
        Ok(LateFusionConfig {
            tokenizer: self.tokenizer()?,
            encoder: EncoderConfig { n_layers: self.usize("contrastive.layers")?, ..self.encoder()? },
            proj_hidden: self.usize("contrastive.proj_hidden")?,
            proj_out: self.usize("contrastive.proj_out")?,
        })
    }

    pub fn tasks(&self) -> Result<Vec<Task>> {
        let tasks = self.list("probe.tasks").into_iter().map(Task::parse).collect::<Result<Vec<_>>>()?;
        if tasks.is_empty() {
            return Err(Error::Config("probe.tasks is empty".into()));
        }
        Ok(tasks)
    }

    pub fn probe_modalities(&self) -> Result<Vec<Modality>> {
        let ms = self
            .list("probe.modalities")
            .into_iter()
            .map(|s| {
                Modality::ALL
                    .into_iter()
                    .find(|m| m.name().eq_ignore_ascii_case(s))
                    .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ms.is_empty() {
            return Err(Error::Config("probe.modalities is empty".into()));
        }
        Ok(ms)
    }

    pub fn probe_seeds(&self) -> Result<Vec<u64>> {
        let seeds = self
            .list("probe.seeds")
            .into_iter()
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
            .collect::<Result<Vec<u64>>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("probe.seeds is empty".into()));
        }
        Ok(seeds)
    }

    pub fn probe(&self, task: Task, finetune: bool) -> Result<ProbeConfig> {
        let (epochs, lr) = if finetune {
            (self.usize("finetune.epochs")?, self.f64("finetune.lr")?)
        } else {
            (self.usize("probe.epochs")?, self.f64("probe.lr")?)
        };
        Ok(ProbeConfig {
            batch_size: self.usize("probe.batch_size")?,
            schedule: ScheduleConfig {
                base_lr: lr,
                warmup_epochs: 10.min(epochs.max(1)),
                ..ScheduleConfig::for_epochs(epochs)
            },
            weight_decay: self.f64("probe.weight_decay")?,
            seed: self.seed()?,
            smoothing: self.bool("probe.smoothing")?,
            ..ProbeConfig::new(task, epochs)
        })
    }

    pub fn rsv(&self) -> Result<RsvConfig> {
        Ok(RsvConfig {
            n_contexts: self.usize("analysis.n_contexts")?,
            n_vary: self.usize("analysis.n_vary")?,
            normalize: self.bool("analysis.normalize")?,
            seed: self.seed()?,
        })
    }
}

/// Pretraining objective, masked or contrastive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    Mae(Strategy),
    Contrastive(ContrastiveStyle),
}

impl StrategyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(StrategyKind::Mae(Strategy::Mae)),
            "mae_moddrop" | "mae-moddrop" => Ok(StrategyKind::Mae(Strategy::MaeModDrop)),
            other => ContrastiveStyle::parse(other)
                .map(StrategyKind::Contrastive)
                .map_err(|_| Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Mae(s) => s.name(),
            StrategyKind::Contrastive(c) => c.name(),
        }
    }
}
