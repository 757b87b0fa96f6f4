//! Downstream tasks, pooled representations, linear probing and finetuning.

use std::collections::BTreeSet;
use std::path::Path;

use crate::dataio::format::{csv_err, csv_writer};
use crate::dataio::{Modality, SignalWindow, TOKENS_PER_MODALITY};
use crate::dataio::synth::AGE_THRESHOLD_YEARS;
use crate::error::{Error, Result};
use crate::mae::{epoch_batches, MaeModel, ENCODER_PREFIX, TOKENIZER_PREFIX};
use crate::numerics::nn::{layernorm_vec, DropoutRng, Linear};
use crate::numerics::{lr_at, AdamW, DArray, Graph, ParamStore, RngState, ScheduleConfig, Var};
use crate::tokenizers::TokenTag;

use super::metrics::{aggregate_score, auroc, balanced_accuracy, class_weights, cohen_kappa, macro_f1, Confusion};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Sleep,
    Age,
    Arousal,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sleep, Task::Age, Task::Arousal];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sleep => "sleep",
            Task::Age => "age",
            Task::Arousal => "arousal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?} (sleep, age, arousal)")))
    }

    pub fn n_classes(self) -> usize {
        match self {
            Task::Sleep => 5,
            Task::Age | Task::Arousal => 2,
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.n_classes() as f64
    }

    /// Class of `w`; age class 1 means under the threshold.
    pub fn label(self, w: &SignalWindow) -> Result<usize> {
        let need = || Error::InsufficientData(format!("window {} of {} has no annotation", w.index, w.patient_id));
        Ok(match self {
            Task::Sleep => w.label.ok_or_else(need)?.stage.index(),
            Task::Arousal => usize::from(w.label.ok_or_else(need)?.arousal),
            Task::Age => usize::from(w.demographics.age_years < AGE_THRESHOLD_YEARS),
        })
    }

    pub fn labels(self, windows: &[SignalWindow]) -> Result<Vec<usize>> {
        windows.iter().map(|w| self.label(w)).collect()
    }
}

/// Layer-normalize every token (no affine) and average: `[n, dim] -> [dim]`.
pub fn pool(tokens: &DArray) -> Result<Vec<f64>> {
    if tokens.rows() == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty token set".into()));
    }
    let d = tokens.cols();
    let mut out = vec![0.0; d];
    for r in 0..tokens.rows() {
        for (o, v) in out.iter_mut().zip(layernorm_vec(tokens.row(r))) {
            *o += v / tokens.rows() as f64;
        }
    }
    Ok(out)
}

/// Graph version of [`pool`] over `batch` equal-length sequences.
pub fn pool_graph(g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
    let rows = g.value(x).rows();
    if rows == 0 || batch == 0 || rows % batch != 0 {
        return Err(Error::shape("pool", format!("{rows} tokens do not split into {batch} sequences")));
    }
    let ln = g.layernorm(x, None);
    Ok(g.group_mean_rows(ln, batch))
}

/// A frozen-or-trainable map from windows to fixed-width features.
pub trait Representation {
    fn feature_dim(&self) -> usize;

    /// `[windows.len(), feature_dim]`; dropout only when `rng` is given.
    fn features(&self, g: &mut Graph, store: &ParamStore, windows: &[&SignalWindow], rng: DropoutRng<'_>)
        -> Result<Var>;

    /// Parameter-name prefixes that make up the representation.
    fn prefixes(&self) -> Vec<String>;

    /// SHA-256 over the representation's parameters.
    fn hash(&self, store: &ParamStore) -> String {
        self.prefixes().iter().map(|p| store.hash_prefix(p)).collect::<Vec<_>>().join(":")
    }
}

/// MAE encoder over the unmasked tokens of `modalities`.
pub struct MaeRepresentation<'a> {
    pub model: &'a MaeModel,
    pub modalities: Vec<Modality>,
}

impl<'a> MaeRepresentation<'a> {
    pub fn new(model: &'a MaeModel, modalities: &[Modality]) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::InvalidArgument("representation needs at least one modality".into()));
        }
        let mut seen = BTreeSet::new();
        if !modalities.iter().all(|m| seen.insert(m.index())) {
            return Err(Error::InvalidArgument("repeated modality".into()));
        }
        let mut modalities = modalities.to_vec();
        modalities.sort_by_key(|m| m.index());
        Ok(MaeRepresentation { model, modalities })
    }

    pub fn tags(&self) -> Vec<TokenTag> {
        self.modalities
            .iter()
            .flat_map(|&modality| (0..TOKENS_PER_MODALITY).map(move |position| TokenTag { modality, position }))
            .collect()
    }

    /// Pooled output of every encoder layer.
    pub fn layer_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
    ) -> Result<Vec<Var>> {
        let tags = vec![self.tags(); windows.len()];
        let x = self.model.tokenizer.embed_tokens(g, store, windows, &tags)?;
        let pass = self.model.encoder.forward(g, store, x, windows.len(), None)?;
        pass.layer_outputs.iter().map(|&v| pool_graph(g, v, windows.len())).collect()
    }
}

impl Representation for MaeRepresentation<'_> {
    fn feature_dim(&self) -> usize {
        self.model.cfg.encoder.dim
    }

    fn features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SignalWindow],
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let tags = vec![self.tags(); windows.len()];
        let x = self.model.tokenizer.embed_tokens(g, store, windows, &tags)?;
        let pass = self.model.encoder.forward(g, store, x, windows.len(), rng)?;
        pool_graph(g, pass.out, windows.len())
    }

    fn prefixes(&self) -> Vec<String> {
        vec![TOKENIZER_PREFIX.to_string(), ENCODER_PREFIX.to_string()]
    }
}

/// Eval-mode features of `windows`, `[n, feature_dim]`.
pub fn extract_features(
    rep: &dyn Representation,
    store: &ParamStore,
    windows: &[SignalWindow],
    batch_size: usize,
) -> Result<DArray> {
    let mut data = Vec::with_capacity(windows.len() * rep.feature_dim());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&SignalWindow> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = rep.features(&mut g, store, &refs, None)?;
        data.extend_from_slice(g.value(f).data());
    }
    DArray::new(vec![windows.len(), rep.feature_dim()], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    pub seed: u64,
    /// Add one pseudo-count per class to the weight computation.
    pub smoothing: bool,
    /// Permute train and validation labels (permutation-null check).
    pub shuffle_labels: bool,
}

impl ProbeConfig {
    pub fn new(task: Task, epochs: usize) -> Self {
        ProbeConfig {
            task,
            epochs,
            batch_size: 32,
            schedule: ScheduleConfig { base_lr: 1e-3, ..ScheduleConfig::for_epochs(epochs) },
            weight_decay: 0.0,
            seed: 0,
            smoothing: false,
            shuffle_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch size must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub balanced_accuracy: f64,
    pub kappa: Option<f64>,
    /// Binary tasks only.
    pub auroc: Option<f64>,
    pub macro_f1: Option<f64>,
}

impl TaskMetrics {
    pub fn compute(task: Task, truth: &[usize], logits: &DArray) -> Result<Self> {
        let k = task.n_classes();
        let pred: Vec<usize> = (0..logits.rows())
            .map(|i| {
                let r = logits.row(i);
                (0..k).fold(0, |b, j| if r[j] > r[b] { j } else { b })
            })
            .collect();
        let c = Confusion::from_predictions(truth, &pred, k)?;
        let auroc = if k == 2 {
            let scores: Vec<f64> = (0..logits.rows()).map(|i| logits.get2(i, 1) - logits.get2(i, 0)).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            auroc(&scores, &pos).ok()
        } else {
            None
        };
        Ok(TaskMetrics {
            balanced_accuracy: balanced_accuracy(&c)?,
            kappa: cohen_kappa(&c).ok(),
            auroc,
            macro_f1: macro_f1(&c).ok(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub task: Task,
    pub seed: u64,
    /// `None`: the initial head was kept.
    pub selected_epoch: Option<usize>,
    pub test: TaskMetrics,
    pub train_balanced_accuracy: f64,
    pub hash_before: String,
    pub hash_after: String,
}

fn patients(ws: &[SignalWindow]) -> BTreeSet<&str> {
    ws.iter().map(|w| w.patient_id.as_str()).collect()
}

/// Hard error if any test patient also appears in train or validation.
pub fn check_leakage(train: &[SignalWindow], val: &[SignalWindow], test: &[SignalWindow]) -> Result<()> {
    let test_ids = patients(test);
    for (name, set) in [("train", train), ("validation", val)] {
        if let Some(id) = patients(set).intersection(&test_ids).next() {
            return Err(Error::Leakage(format!("patient {id} is in both {name} and test data")));
        }
    }
    Ok(())
}

const HEAD: &str = "probe.head";

/// Trains a linear head on frozen features; the representation's
/// parameters are never written.
pub fn linear_probe(
    rep: &dyn Representation,
    store: &ParamStore,
    train: &[SignalWindow],
    val: &[SignalWindow],
    test: &[SignalWindow],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    run(rep, store, train, val, test, cfg, false)
}

/// Trains the head and the representation together.
pub fn full_finetune(
    rep: &dyn Representation,
    store: &ParamStore,
    train: &[SignalWindow],
    val: &[SignalWindow],
    test: &[SignalWindow],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    run(rep, store, train, val, test, cfg, true)
}

struct Inputs<'a> {
    windows: &'a [SignalWindow],
    labels: Vec<usize>,
    frozen: Option<DArray>,
}

fn run(
    rep: &dyn Representation,
    store: &ParamStore,
    train: &[SignalWindow],
    val: &[SignalWindow],
    test: &[SignalWindow],
    cfg: &ProbeConfig,
    finetune: bool,
) -> Result<ProbeResult> {
    cfg.validate()?;
    check_leakage(train, val, test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData("probe needs train and test windows".into()));
    }
    let task = cfg.task;
    let hash_before = rep.hash(store);
    let mut train_labels = task.labels(train)?;
    let mut val_labels = task.labels(val)?;
    if cfg.shuffle_labels {
        let mut rng = RngState::derive(cfg.seed, "probe-shuffle");
        rng.shuffle(&mut train_labels);
        rng.shuffle(&mut val_labels);
    }
    let weights = class_weights(&train_labels, task.n_classes(), cfg.smoothing)?;

    let frozen = |ws: &[SignalWindow]| -> Result<Option<DArray>> {
        if finetune || ws.is_empty() {
            Ok(None)
        } else {
            extract_features(rep, store, ws, cfg.batch_size).map(Some)
        }
    };
    let tr = Inputs { windows: train, labels: train_labels, frozen: frozen(train)? };
    let va = Inputs { windows: val, labels: val_labels, frozen: frozen(val)? };
    let te = Inputs { windows: test, labels: task.labels(test)?, frozen: frozen(test)? };

    let mut work = if finetune { store.clone() } else { ParamStore::new() };
    let mut init_rng = RngState::derive(cfg.seed, &format!("probe-head-{}", task.name()));
    let head = Linear::new(&mut work, HEAD, rep.feature_dim(), task.n_classes(), &mut init_rng);
    let mut opt = AdamW::new(&work, cfg.schedule.base_lr, cfg.weight_decay);
    let mut order_rng = RngState::derive(cfg.seed, "probe-order");
    let mut drop_rng = RngState::derive(cfg.seed, "probe-dropout");

    let logits = |g: &mut Graph, work: &ParamStore, inp: &Inputs, idx: &[usize], rng: DropoutRng<'_>| -> Result<Var> {
        let f = match &inp.frozen {
            Some(feats) => {
                let mut rows = Vec::with_capacity(idx.len() * feats.cols());
                for &i in idx {
                    rows.extend_from_slice(feats.row(i));
                }
                g.constant(DArray::new(vec![idx.len(), feats.cols()], rows)?)
            }
            None => {
                let refs: Vec<&SignalWindow> = idx.iter().map(|&i| &inp.windows[i]).collect();
                rep.features(g, work, &refs, rng)?
            }
        };
        Ok(head.forward(g, work, f))
    };
    let eval_logits = |work: &ParamStore, inp: &Inputs| -> Result<DArray> {
        let mut data = Vec::with_capacity(inp.windows.len() * task.n_classes());
        let all: Vec<usize> = (0..inp.windows.len()).collect();
        for idx in all.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let l = logits(&mut g, work, inp, idx, None)?;
            data.extend_from_slice(g.value(l).data());
        }
        DArray::new(vec![inp.windows.len(), task.n_classes()], data)
    };
    let weighted_loss = |l: &DArray, labels: &[usize]| -> f64 {
        let mut g = Graph::new();
        let v = g.constant(l.clone());
        let w: Vec<f64> = labels.iter().map(|&c| weights[c]).collect();
        let ce = g.cross_entropy(v, labels, &w, None);
        g.value(ce).item()
    };

    let mut best: Option<(f64, Option<usize>, ParamStore)> = None;
    if !val.is_empty() {
        best = Some((weighted_loss(&eval_logits(&work, &va)?, &va.labels), None, work.clone()));
    }
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut order_rng);
        let n_batches = batches.len();
        for (i, idx) in batches.into_iter().enumerate() {
            opt.lr = lr_at(epoch as f64 + i as f64 / n_batches as f64, &cfg.schedule)?;
            let mut g = Graph::new();
            let l = logits(&mut g, &work, &tr, &idx, finetune.then_some(&mut drop_rng))?;
            let labels: Vec<usize> = idx.iter().map(|&j| tr.labels[j]).collect();
            let w: Vec<f64> = labels.iter().map(|&c| weights[c]).collect();
            let loss = g.cross_entropy(l, &labels, &w, None);
            if !g.value(loss).item().is_finite() {
                return Err(Error::Diverged { epoch, detail: "probe loss is not finite".into() });
            }
            work.zero_grads();
            g.backward(loss, Some(&mut work))?;
            opt.step(&mut work).map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
        }
        if !val.is_empty() {
            let v = weighted_loss(&eval_logits(&work, &va)?, &va.labels);
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, Some(epoch), work.clone()));
            }
        }
    }
    let (selected, selected_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => {
            let e = cfg.epochs.checked_sub(1);
            (work, e)
        }
    };

    let test_metrics = TaskMetrics::compute(task, &te.labels, &eval_logits(&selected, &te)?)?;
    let train_metrics = TaskMetrics::compute(task, &tr.labels, &eval_logits(&selected, &tr)?)?;
    let hash_after = if finetune { rep.hash(&selected) } else { rep.hash(store) };
    Ok(ProbeResult {
        task,
        seed: cfg.seed,
        selected_epoch,
        test: test_metrics,
        train_balanced_accuracy: train_metrics.balanced_accuracy,
        hash_before,
        hash_after,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSummary {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub balanced_accuracy: (f64, f64),
    pub kappa: Option<(f64, f64)>,
    pub auroc: Option<(f64, f64)>,
    pub macro_f1: Option<(f64, f64)>,
}

fn summarize_opt(xs: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Option<Vec<f64>> = xs.iter().copied().collect();
    v.map(|v| mean_std(&v))
}

/// Seed-averaged results of several tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub tasks: Vec<TaskSummary>,
    pub runs: Vec<ProbeResult>,
}

impl EvalReport {
    pub fn from_runs(label: &str, config_hash: &str, runs: Vec<ProbeResult>) -> Result<Self> {
        let tasks: BTreeSet<Task> = runs.iter().map(|r| r.task).collect();
        let tasks = tasks
            .into_iter()
            .map(|task| {
                let rs: Vec<&ProbeResult> = runs.iter().filter(|r| r.task == task).collect();
                let bacc: Vec<f64> = rs.iter().map(|r| r.test.balanced_accuracy).collect();
                TaskSummary {
                    task,
                    seeds: rs.iter().map(|r| r.seed).collect(),
                    balanced_accuracy: mean_std(&bacc),
                    kappa: summarize_opt(&rs.iter().map(|r| r.test.kappa).collect::<Vec<_>>()),
                    auroc: summarize_opt(&rs.iter().map(|r| r.test.auroc).collect::<Vec<_>>()),
                    macro_f1: summarize_opt(&rs.iter().map(|r| r.test.macro_f1).collect::<Vec<_>>()),
                }
            })
            .collect();
        Ok(EvalReport { label: label.to_string(), config_hash: config_hash.to_string(), tasks, runs })
    }

    /// Chance-normalized mean of the tasks' mean balanced accuracies.
    pub fn aggregate(&self) -> Result<f64> {
        let s: Vec<f64> = self.tasks.iter().map(|t| t.balanced_accuracy.0).collect();
        let r: Vec<f64> = self.tasks.iter().map(|t| t.task.chance()).collect();
        aggregate_score(&s, &r)
    }

    pub fn summary(&self, task: Task) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| t.task == task)
    }

    /// Per-seed rows, then one `mean`/`std` row pair per task, then the aggregate.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path, &[format!("config_hash={}", self.config_hash)])?;
        let fmt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        w.write_record(["model", "task", "seed", "balanced_accuracy", "kappa", "auroc", "macro_f1", "selected_epoch"])
            .map_err(|e| csv_err(path, e))?;
        let mut rows: Vec<[String; 8]> = Vec::new();
        for r in &self.runs {
            rows.push([
                self.label.clone(),
                r.task.name().into(),
                r.seed.to_string(),
                fmt(Some(r.test.balanced_accuracy)),
                fmt(r.test.kappa),
                fmt(r.test.auroc),
                fmt(r.test.macro_f1),
                r.selected_epoch.map_or_else(|| "init".to_string(), |e| e.to_string()),
            ]);
        }
        for t in &self.tasks {
            for (stat, pick) in [("mean", 0usize), ("std", 1)] {
                let get = |x: Option<(f64, f64)>| x.map(|p| if pick == 0 { p.0 } else { p.1 });
                rows.push([
                    self.label.clone(),
                    t.task.name().into(),
                    stat.into(),
                    fmt(get(Some(t.balanced_accuracy))),
                    fmt(get(t.kappa)),
                    fmt(get(t.auroc)),
                    fmt(get(t.macro_f1)),
                    String::new(),
                ]);
            }
        }
        rows.push([
            self.label.clone(),
            "aggregate".into(),
            "mean".into(),
            fmt(self.aggregate().ok()),
            "nan".into(),
            "nan".into(),
            "nan".into(),
            String::new(),
        ]);
        for r in rows {
            w.write_record(&r).map_err(|e| csv_err(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `cfg` once per seed.
pub fn probe_seeds(
    rep: &dyn Representation,
    store: &ParamStore,
    train: &[SignalWindow],
    val: &[SignalWindow],
    test: &[SignalWindow],
    cfg: &ProbeConfig,
    seeds: &[u64],
    finetune: bool,
) -> Result<Vec<ProbeResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let c = ProbeConfig { seed, ..cfg.clone() };
            run(rep, store, train, val, test, &c, finetune)
        })
        .collect()
}
