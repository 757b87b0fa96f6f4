//! Attention rollout and relative source variance.

use std::path::Path;

use crate::dataio::format::{csv_err, csv_writer, read_csv};
use crate::dataio::{Modality, SignalWindow, N_MODALITIES};
use crate::encoder::{encode_trace, EncoderTrace, TraceFile};
use crate::error::{Error, Result};
use crate::evalprobe::MaeRepresentation;
use crate::numerics::{softmax_in_place, DArray, Graph, ParamStore, RngState};
use crate::tokenizers::TokenTag;

/// Output-token by input-token attribution; rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMatrix {
    pub tags: Vec<TokenTag>,
    /// `[n, n]`.
    pub values: DArray,
}

impl RolloutMatrix {
    pub fn n(&self) -> usize {
        self.tags.len()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n()).map(|i| (self.values.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Same binary layout as an attention trace: one layer with one head.
    pub fn encode(&self, meta: &str) -> Result<Vec<u8>> {
        let n = self.n();
        let w = self.values.clone().reshape(&[1, n, n])?;
        encode_trace(&[w], 1, &self.tags, meta)
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode(meta)?)?;
        Ok(())
    }

    pub fn from_trace_file(file: &TraceFile) -> Result<Self> {
        if file.weights.len() != 1 || file.n_heads != 1 {
            return Err(Error::InvalidArgument("a rollout file holds exactly one single-head matrix".into()));
        }
        let n = file.tags.len();
        Ok(RolloutMatrix { tags: file.tags.clone(), values: file.weights[0].clone().reshape(&[n, n])? })
    }
}

fn matmul_square(a: &DArray, b: &DArray, n: usize) -> DArray {
    let mut out = DArray::zeros(&[n, n]);
    for i in 0..n {
        let row = out.row_mut(i);
        for k in 0..n {
            let aik = a.get2(i, k);
            if aik != 0.0 {
                for (o, bkj) in row.iter_mut().zip(b.row(k)) {
                    *o += aik * bkj;
                }
            }
        }
    }
    out
}

/// `A_L ... A_1` with `A_l = 0.5 * mean_heads(W_l) + 0.5 * I`; `weights`
/// holds one `[heads, n, n]` array per layer.
pub fn attention_rollout(weights: &[DArray], tags: &[TokenTag]) -> Result<RolloutMatrix> {
    let n = tags.len();
    let mut acc: Option<DArray> = None;
    for (l, w) in weights.iter().enumerate() {
        let s = w.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::shape("attention_rollout", format!("layer {l} weights {s:?} are not square")));
        }
        if s[1] != n || s[0] == 0 {
            return Err(Error::shape("attention_rollout", format!("layer {l} has {} tokens, expected {n}", s[1])));
        }
        let h = s[0];
        let mut a = DArray::zeros(&[n, n]);
        for (k, v) in a.data_mut().iter_mut().enumerate() {
            let mean = (0..h).map(|head| w.data()[head * n * n + k]).sum::<f64>() / h as f64;
            *v = 0.5 * mean + if k / n == k % n { 0.5 } else { 0.0 };
        }
        acc = Some(match acc {
            None => a,
            Some(prev) => matmul_square(&a, &prev, n),
        });
    }
    let values = acc.unwrap_or_else(|| {
        let mut id = DArray::zeros(&[n, n]);
        (0..n).for_each(|i| id.row_mut(i)[i] = 1.0);
        id
    });
    Ok(RolloutMatrix { tags: tags.to_vec(), values })
}

pub fn rollout_of_trace(trace: &EncoderTrace) -> Result<RolloutMatrix> {
    attention_rollout(&trace.weights, &trace.tags)
}

/// Pooled embeddings of a batch: one `[windows, units]` array per layer.
pub type Embedder<'a> = dyn Fn(&[SignalWindow]) -> Result<Vec<DArray>> + 'a;

/// Per-layer pooled outputs of the MAE encoder on the full unmasked input.
pub fn mae_layer_embedder<'a>(
    model: &'a crate::mae::MaeModel,
    store: &'a ParamStore,
    batch_size: usize,
) -> Result<impl Fn(&[SignalWindow]) -> Result<Vec<DArray>> + 'a> {
    let rep = MaeRepresentation::new(model, &Modality::ALL)?;
    Ok(move |windows: &[SignalWindow]| {
        let mut layers: Vec<Vec<f64>> = Vec::new();
        let mut units = 0;
        for chunk in windows.chunks(batch_size.max(1)) {
            let refs: Vec<&SignalWindow> = chunk.iter().collect();
            let mut g = Graph::new();
            let feats = rep.layer_features(&mut g, store, &refs)?;
            layers.resize(feats.len(), Vec::new());
            for (acc, &f) in layers.iter_mut().zip(&feats) {
                units = g.value(f).cols();
                acc.extend_from_slice(g.value(f).data());
            }
        }
        layers.into_iter().map(|d| DArray::new(vec![windows.len(), units], d)).collect()
    })
}

/// `context` with the channel of `m` taken from `source`.
pub fn splice(context: &SignalWindow, source: &SignalWindow, m: Modality) -> SignalWindow {
    let mut w = context.clone();
    w.channel_mut(m).copy_from_slice(source.channel(m));
    w
}

/// Per layer, per unit population variance of the embedding as only
/// modality `vary` changes across `samples`.
pub fn source_variance(
    embed: &Embedder<'_>,
    vary: Modality,
    context: &SignalWindow,
    samples: &[SignalWindow],
) -> Result<Vec<Vec<f64>>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!("{} varied samples; need at least 2", samples.len())));
    }
    let inputs: Vec<SignalWindow> = samples.iter().map(|s| splice(context, s, vary)).collect();
    let layers = embed(&inputs)?;
    layers
        .iter()
        .map(|e| {
            if e.rows() != samples.len() {
                return Err(Error::shape("source_variance", "embedder returned the wrong number of rows"));
            }
            let n = e.rows() as f64;
            Ok((0..e.cols())
                .map(|u| {
                    // shifted by the first row, so constant units give exactly 0
                    let x0 = e.get2(0, u);
                    let d: Vec<f64> = (0..e.rows()).map(|r| e.get2(r, u) - x0).collect();
                    let mean = d.iter().sum::<f64>() / n;
                    d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
                })
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsvConfig {
    pub n_contexts: usize,
    pub n_vary: usize,
    /// Divide each unit's four variances by their sum before the softmax.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for RsvConfig {
    fn default() -> Self {
        RsvConfig { n_contexts: 10, n_vary: 100, normalize: false, seed: 0 }
    }
}

/// Softmax over one unit's four source variances.
pub fn rsv_of(variances: [f64; N_MODALITIES], normalize: bool) -> [f64; N_MODALITIES] {
    let mut v = variances;
    if normalize {
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            v.iter_mut().for_each(|x| *x /= total);
        }
    }
    softmax_in_place(&mut v);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRsv {
    /// Per unit, one value per modality.
    pub units: Vec<[f64; N_MODALITIES]>,
    pub mean: [f64; N_MODALITIES],
    /// 95% normal-approximation interval of the mean over units.
    pub ci: [(f64, f64); N_MODALITIES],
}

impl LayerRsv {
    pub fn from_units(units: Vec<[f64; N_MODALITIES]>) -> Self {
        let n = units.len() as f64;
        let mut mean = [0.0; N_MODALITIES];
        let mut ci = [(0.0, 0.0); N_MODALITIES];
        for m in 0..N_MODALITIES {
            let mu = units.iter().map(|u| u[m]).sum::<f64>() / n;
            let sd = if units.len() > 1 {
                (units.iter().map(|u| (u[m] - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let half = 1.96 * sd / n.sqrt();
            mean[m] = mu;
            ci[m] = (mu - half, mu + half);
        }
        LayerRsv { units, mean, ci }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsvProfile {
    pub layers: Vec<LayerRsv>,
}

/// Context-averaged source variances of every modality, softmaxed per unit.
pub fn rsv(embed: &Embedder<'_>, dataset: &[SignalWindow], cfg: &RsvConfig) -> Result<RsvProfile> {
    if cfg.n_contexts == 0 || cfg.n_vary < 2 {
        return Err(Error::InvalidArgument("need n_contexts >= 1 and n_vary >= 2".into()));
    }
    if dataset.len() < cfg.n_vary.max(cfg.n_contexts) {
        return Err(Error::InsufficientData(format!(
            "{} windows cannot supply {} contexts and {} varied samples",
            dataset.len(),
            cfg.n_contexts,
            cfg.n_vary
        )));
    }
    let mut rng = RngState::derive(cfg.seed, "rsv");
    let contexts = rng.choose_k(dataset.len(), cfg.n_contexts);
    let mut sums: Option<Vec<Vec<[f64; N_MODALITIES]>>> = None;
    for &c in &contexts {
        for m in Modality::ALL {
            let picks = rng.choose_k(dataset.len(), cfg.n_vary);
            let samples: Vec<SignalWindow> = picks.iter().map(|&i| dataset[i].clone()).collect();
            let var = source_variance(embed, m, &dataset[c], &samples)?;
            let acc = sums.get_or_insert_with(|| var.iter().map(|l| vec![[0.0; N_MODALITIES]; l.len()]).collect());
            for (al, vl) in acc.iter_mut().zip(&var) {
                for (a, v) in al.iter_mut().zip(vl) {
                    a[m.index()] += v / cfg.n_contexts as f64;
                }
            }
        }
    }
    let layers = sums
        .unwrap_or_default()
        .into_iter()
        .map(|l| LayerRsv::from_units(l.into_iter().map(|v| rsv_of(v, cfg.normalize)).collect()))
        .collect();
    Ok(RsvProfile { layers })
}

impl RsvProfile {
    /// Columns `layer,unit,eeg,emg,eog,ecg`.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut w = csv_writer(path, comments)?;
        let mut header = vec!["layer".to_string(), "unit".to_string()];
        header.extend(Modality::ALL.iter().map(|m| m.name().to_lowercase()));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (u, v) in layer.units.iter().enumerate() {
                let mut row = vec![l.to_string(), u.to_string()];
                row.extend(v.iter().map(|x| format!("{x:.9}")));
                w.write_record(&row).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (_, rows) = read_csv(path)?;
        let mut layers: Vec<Vec<[f64; N_MODALITIES]>> = Vec::new();
        for r in rows {
            if r.len() != 2 + N_MODALITIES {
                return Err(Error::format(path, "RSV rows need layer, unit and four values"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
            let l: usize = r[0].parse().map_err(|_| Error::format(path, "bad layer index"))?;
            let mut v = [0.0; N_MODALITIES];
            for m in 0..N_MODALITIES {
                v[m] = num(&r[2 + m])?;
            }
            if l >= layers.len() {
                layers.resize(l + 1, Vec::new());
            }
            layers[l].push(v);
        }
        Ok(RsvProfile { layers: layers.into_iter().map(LayerRsv::from_units).collect() })
    }
}
