//! Classification metrics and the chance-normalized aggregate score.

use crate::error::{Error, Result};

/// `counts[true][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion { counts: vec![vec![0; k]; k] }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", "truth and predictions differ in length"));
        }
        let mut c = Confusion::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::OutOfRange(format!("class {} not below {k}", t.max(p))));
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn from_rows(rows: &[&[usize]]) -> Self {
        Confusion { counts: rows.iter().map(|r| r.to_vec()).collect() }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> usize {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

/// Mean of per-class recalls. Every class must occur.
pub fn balanced_accuracy(c: &Confusion) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..c.k() {
        let n = c.row_sum(i);
        if n == 0 {
            return Err(Error::InsufficientData(format!("class {i} absent from the evaluation labels")));
        }
        total += c.counts[i][i] as f64 / n as f64;
    }
    Ok(total / c.k() as f64)
}

/// `(p_o - p_e) / (1 - p_e)`.
pub fn cohen_kappa(c: &Confusion) -> Result<f64> {
    let n = c.total() as f64;
    if n == 0.0 {
        return Err(Error::InsufficientData("empty confusion matrix".into()));
    }
    let po = (0..c.k()).map(|i| c.counts[i][i]).sum::<usize>() as f64 / n;
    let pe = (0..c.k()).map(|i| c.row_sum(i) as f64 * c.col_sum(i) as f64).sum::<f64>() / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return Err(Error::InsufficientData("kappa undefined: a single class in truth and predictions".into()));
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Mean of per-class F1; a class with no true and no predicted samples is an error.
pub fn macro_f1(c: &Confusion) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..c.k() {
        let tp = c.counts[i][i] as f64;
        let denom = (c.row_sum(i) + c.col_sum(i)) as f64;
        if denom == 0.0 {
            return Err(Error::InsufficientData(format!("class {i} absent from truth and predictions")));
        }
        total += 2.0 * tp / denom;
    }
    Ok(total / c.k() as f64)
}

/// Rank-statistic AUROC with midranks for ties; `labels` are 0/1.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", "scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientData("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUROC scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// `(1/N) sum_i (s_i - r_i) / r_i`.
pub fn aggregate_score(scores: &[f64], chance: &[f64]) -> Result<f64> {
    if scores.len() != chance.len() || scores.is_empty() {
        return Err(Error::shape("aggregate_score", "one chance level per score"));
    }
    if chance.iter().any(|&r| r == 0.0) {
        return Err(Error::InvalidArgument("chance level of zero".into()));
    }
    Ok(scores.iter().zip(chance).map(|(s, r)| (s - r) / r).sum::<f64>() / scores.len() as f64)
}

/// `w_c = 1 / (K f_c)` from label frequencies. With `smoothing`, every
/// class count gets +1 so absent classes are tolerated.
pub fn class_weights(labels: &[usize], k: usize, smoothing: bool) -> Result<Vec<f64>> {
    let mut counts = vec![if smoothing { 1.0 } else { 0.0 }; k];
    for &l in labels {
        if l >= k {
            return Err(Error::OutOfRange(format!("label {l} not below {k}")));
        }
        counts[l] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0.0 {
                Err(Error::InsufficientData(format!("class {c} never occurs; enable smoothing")))
            } else {
                Ok(total / (k as f64 * n))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_examples() {
        let c = Confusion::from_rows(&[&[3, 1], &[2, 2]]);
        assert!((balanced_accuracy(&c).unwrap() - 0.625).abs() < 1e-12);
        let majority = Confusion::from_rows(&[&[10, 0], &[5, 0]]);
        assert_eq!(balanced_accuracy(&majority).unwrap(), 0.5);
        assert!(balanced_accuracy(&Confusion::from_rows(&[&[1, 0], &[0, 0]])).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let c = Confusion::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(balanced_accuracy(&c).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&c).unwrap(), 1.0);
        assert_eq!(macro_f1(&c).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.9, 0.8], &[false, true, true]).unwrap(), 1.0);
    }

    #[test]
    fn independent_predictions_have_zero_kappa() {
        // marginals (0.5, 0.5) x (0.25, 0.75)
        let c = Confusion::from_rows(&[&[1, 3], &[1, 3]]);
        assert!(cohen_kappa(&c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn auroc_hand_case_and_ties() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let r = [0.2, 0.5, 0.5];
        assert!((aggregate_score(&[0.744, 0.719, 0.637], &r).unwrap() - 1.144).abs() < 0.0005);
        assert!((aggregate_score(&[0.717, 0.641, 0.568], &r).unwrap() - 1.001).abs() < 0.0005);
        assert_eq!(aggregate_score(&r, &r).unwrap(), 0.0);
        assert!(aggregate_score(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[0, 1, 0, 1], 2, false).unwrap(), vec![1.0, 1.0]);
        let mut labels = vec![0usize; 973];
        labels.extend(vec![1usize; 27]);
        let w = class_weights(&labels, 2, false).unwrap();
        assert!((w[1] - 18.5185).abs() < 1e-3);
        assert!((w[0] - 0.5139).abs() < 1e-3);
        assert!(class_weights(&[0, 0], 2, false).is_err());
        assert!(class_weights(&[0, 0], 2, true).is_ok());
    }
}
