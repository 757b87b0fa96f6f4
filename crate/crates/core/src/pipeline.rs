//! End-to-end steps shared by the command line and the acceptance suite.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, StrategyKind};
use crate::contrastive::{pretrain_contrastive, LateFusionModel};
use crate::dataio::{
    generate_synthetic, make_splits, preprocess, windows_of, Modality, PatientRecord, SignalWindow, SplitManifest,
};
use crate::encoder::EncoderTrace;
use crate::error::{Error, Result};
use crate::evalprobe::{probe_seeds, EvalReport, MaeRepresentation, ProbeResult, Representation, Task};
use crate::mae::{self, EpochLog, MaeModel, ReconReport};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numerics::nn::Mode;
use crate::numerics::{ParamStore, RngState};
use crate::tokenizers::fuse;

/// Z-scored windows of each split role.
#[derive(Clone, Debug, Default)]
pub struct SplitWindows {
    pub pretrain: Vec<SignalWindow>,
    pub train: Vec<SignalWindow>,
    pub validation: Vec<SignalWindow>,
    pub test: Vec<SignalWindow>,
}

/// Synthetic records at the configured raw rate.
pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<PatientRecord>> {
    generate_synthetic(&cfg.synth()?)
}

pub fn preprocess_all(records: &[PatientRecord], cfg: &ExperimentConfig) -> Result<Vec<PatientRecord>> {
    let pc = cfg.preprocess()?;
    records.iter().map(|r| preprocess(r, &pc)).collect()
}

/// Patient-level split of labeled and unlabeled records.
pub fn split_records(records: &[PatientRecord], cfg: &ExperimentConfig) -> Result<SplitManifest> {
    let (labeled, unlabeled): (Vec<&PatientRecord>, Vec<&PatientRecord>) =
        records.iter().partition(|r| r.labels.is_some());
    let ids = |rs: Vec<&PatientRecord>| rs.into_iter().map(|r| r.patient_id.clone()).collect::<Vec<_>>();
    make_splits(&ids(labeled), &ids(unlabeled), &cfg.split()?)
}

/// Windows every record into the roles `split` gives its patient.
pub fn partition(records: &[PatientRecord], split: &SplitManifest) -> Result<SplitWindows> {
    split.check()?;
    let mut out = SplitWindows::default();
    for r in records {
        let roles = split.role_of(&r.patient_id);
        if roles.is_empty() {
            continue;
        }
        let ws = windows_of(std::slice::from_ref(r), true)?;
        for role in roles {
            let dst = match role {
                crate::dataio::Role::Pretrain => &mut out.pretrain,
                crate::dataio::Role::Train => &mut out.train,
                crate::dataio::Role::Validation => &mut out.validation,
                crate::dataio::Role::Test => &mut out.test,
            };
            dst.extend(ws.iter().cloned());
        }
    }
    Ok(out)
}

/// A model of either family together with its parameters.
#[derive(Clone, Debug)]
pub enum Pretrained {
    Mae { model: MaeModel, store: ParamStore },
    Late { model: LateFusionModel, store: ParamStore },
}

impl Pretrained {
    /// Freshly initialized model for `kind`.
    pub fn init(cfg: &ExperimentConfig, kind: StrategyKind) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngState::derive(cfg.seed()?, &format!("init-{}", kind.name()));
        Ok(match kind {
            StrategyKind::Mae(_) => Pretrained::Mae { model: MaeModel::new(&mut store, cfg.model()?, &mut rng)?, store },
            StrategyKind::Contrastive(_) => {
                Pretrained::Late { model: LateFusionModel::new(&mut store, cfg.late_fusion()?, &mut rng)?, store }
            }
        })
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Pretrained::Mae { store, .. } | Pretrained::Late { store, .. } => store,
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Pretrained::Mae { store, .. } | Pretrained::Late { store, .. } => store,
        }
    }

    /// The pooled encoder used by probes.
    pub fn representation<'a>(&'a self, modalities: &[Modality]) -> Result<Box<dyn Representation + 'a>> {
        match self {
            Pretrained::Mae { model, .. } => Ok(Box::new(MaeRepresentation::new(model, modalities)?)),
            Pretrained::Late { model, .. } => {
                if modalities.len() != Modality::ALL.len() {
                    return Err(Error::Config("late-fusion probes use all four modalities".into()));
                }
                Ok(Box::new(model.clone()))
            }
        }
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        save_checkpoint(path, self.store(), meta)
    }

    /// Rebuilds the architecture from `cfg` and fills it from `path`.
    pub fn load(cfg: &ExperimentConfig, kind: StrategyKind, path: &Path) -> Result<Self> {
        let (stored, meta) = load_checkpoint(path)?;
        if let Some(s) = meta_value(&meta, "strategy") {
            if s != kind.name() {
                return Err(Error::Config(format!("{} holds a {s} model, not {}", path.display(), kind.name())));
            }
        }
        let mut p = Self::init(cfg, kind)?;
        let expected = p.store().len();
        let copied = p.store_mut().load_from(&stored)?;
        if copied != expected || stored.len() != expected {
            return Err(Error::Config(format!(
                "{} does not match the configured architecture ({copied} of {expected} tensors)",
                path.display()
            )));
        }
        Ok(p)
    }
}

/// Value of `key` in a `k=v;k=v` metadata string.
pub fn meta_value<'a>(meta: &'a str, key: &str) -> Option<&'a str> {
    meta.split(';').filter_map(|kv| kv.split_once('=')).find(|(k, _)| *k == key).map(|(_, v)| v)
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub pretrained: Pretrained,
    pub logs: Vec<EpochLog>,
    pub selected_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

/// Pretrains on the pretraining windows, selecting on the validation windows.
pub fn pretrain(
    cfg: &ExperimentConfig,
    kind: StrategyKind,
    data: &SplitWindows,
    checkpoint_dir: Option<PathBuf>,
    meta: &str,
) -> Result<PretrainRun> {
    let mut init = Pretrained::init(cfg, kind)?;
    match (&mut init, kind) {
        (Pretrained::Mae { model, store }, StrategyKind::Mae(strategy)) => {
            let pc = mae::PretrainConfig { checkpoint_dir, ..cfg.pretrain_for(strategy)? };
            let out = mae::pretrain(model, store, &data.pretrain, &data.validation, &pc, meta)?;
            Ok(PretrainRun {
                pretrained: Pretrained::Mae { model: model.clone(), store: out.store },
                logs: out.logs,
                selected_epoch: out.selected_epoch,
                checkpoints: out.checkpoints,
            })
        }
        (Pretrained::Late { model, store }, StrategyKind::Contrastive(style)) => {
            let cc = cfg.contrastive_for(style)?;
            let out = pretrain_contrastive(model, store, &data.pretrain, &data.validation, &cc)?;
            Ok(PretrainRun {
                pretrained: Pretrained::Late { model: model.clone(), store: out.store },
                logs: out.logs,
                selected_epoch: out.selected_epoch,
                checkpoints: Vec::new(),
            })
        }
        _ => unreachable!("init matches the strategy family"),
    }
}

/// Probe (or finetune) runs for every task and seed in the config.
pub fn probe_runs(
    cfg: &ExperimentConfig,
    pretrained: &Pretrained,
    data: &SplitWindows,
    tasks: &[Task],
    finetune: bool,
    shuffle_labels: bool,
) -> Result<Vec<ProbeResult>> {
    let rep = pretrained.representation(&cfg.probe_modalities()?)?;
    let seeds = cfg.probe_seeds()?;
    let mut runs = Vec::new();
    for &task in tasks {
        let pc = crate::evalprobe::ProbeConfig { shuffle_labels, ..cfg.probe(task, finetune)? };
        runs.extend(probe_seeds(
            rep.as_ref(),
            pretrained.store(),
            &data.train,
            &data.validation,
            &data.test,
            &pc,
            &seeds,
            finetune,
        )?);
    }
    Ok(runs)
}

pub fn probe_report(
    cfg: &ExperimentConfig,
    label: &str,
    pretrained: &Pretrained,
    data: &SplitWindows,
    tasks: &[Task],
    finetune: bool,
    shuffle_labels: bool,
) -> Result<EvalReport> {
    let runs = probe_runs(cfg, pretrained, data, tasks, finetune, shuffle_labels)?;
    EvalReport::from_runs(label, &cfg.hash(), runs)
}

/// Dropped-modality reconstruction of the test windows against the
/// pretraining-mean predictor.
pub fn reconstruction_report(cfg: &ExperimentConfig, pretrained: &Pretrained, data: &SplitWindows) -> Result<ReconReport> {
    match pretrained {
        Pretrained::Mae { model, store } => {
            let means = mae::modality_means(&data.pretrain);
            let p = cfg.pretrain_for(mae::Strategy::MaeModDrop)?.mask.p;
            mae::evaluate_dropped_reconstruction(model, store, &data.test, means, p, cfg.seed()?)
        }
        Pretrained::Late { .. } => Err(Error::Config("reconstruction needs an MAE checkpoint".into())),
    }
}

/// Full unmasked forward trace of one window through the fused encoder.
pub fn attention_trace(pretrained: &Pretrained, window: &SignalWindow) -> Result<EncoderTrace> {
    let Pretrained::Mae { model, store } = pretrained else {
        return Err(Error::Config("attention analysis needs the fused MAE encoder".into()));
    };
    let blocks = Modality::ALL
        .iter()
        .map(|&m| model.tokenizer.tokenize(store, window, m).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let seq = fuse(&blocks, None)?;
    let (_, trace) = model.encoder.encode(store, &seq, Mode::Eval, true, None)?;
    Ok(trace.expect("trace requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "synth.n_patients = 10\nsynth.n_labeled = 8\nsynth.windows_per_patient = 2\n\
             split.n_labeled_pretrain = 4\nsplit.n_train = 3\nsplit.n_validation = 2\nsplit.n_test = 2\n\
             model.dim = 8\nmodel.heads = 2\nmodel.layers = 1\nmodel.ff_width = 16\nmodel.conv_filters = 4\n\
             model.conv_kernel = 5\npretrain.epochs = 1\npretrain.batch_size = 4\ncontrastive.layers = 1\n\
             contrastive.proj_hidden = 6\ncontrastive.proj_out = 4\nprobe.epochs = 2\nprobe.seeds = 0\n\
             probe.tasks = sleep\nprobe.smoothing = true\n",
        )
        .unwrap()
    }

    #[test]
    fn partition_respects_roles() {
        let cfg = tiny();
        let recs = preprocess_all(&generate(&cfg).unwrap(), &cfg).unwrap();
        let split = split_records(&recs, &cfg).unwrap();
        let data = partition(&recs, &split).unwrap();
        assert_eq!(data.pretrain.len(), (2 + 4) * 2);
        assert_eq!(data.train.len(), 3 * 2);
        assert_eq!(data.test.len(), 2 * 2);
        assert!(data.test.iter().all(|w| split.test.contains(&w.patient_id)));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let kind = StrategyKind::parse("mae_moddrop").unwrap();
        let p = Pretrained::init(&cfg, kind).unwrap();
        let path = dir.path().join("m.pmck");
        p.save(&path, "strategy=mae_moddrop").unwrap();
        let back = Pretrained::load(&cfg, kind, &path).unwrap();
        // f32 storage
        let diff = p
            .store()
            .ids()
            .map(|id| p.store().value(id).max_abs_diff(back.store().value(id)))
            .fold(0.0, f64::max);
        assert!(diff < 1e-6);
        let mut wider = cfg.clone();
        wider.apply_overrides(&["model.dim=16".into()]).unwrap();
        assert!(Pretrained::load(&wider, kind, &path).is_err());
        let other = StrategyKind::parse("mae").unwrap();
        assert!(Pretrained::load(&cfg, other, &path).is_err());
    }

    #[test]
    fn meta_lookup() {
        assert_eq!(meta_value("a=1;strategy=mae", "strategy"), Some("mae"));
        assert_eq!(meta_value("a=1", "strategy"), None);
    }
}
