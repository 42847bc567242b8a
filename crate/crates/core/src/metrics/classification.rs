use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The table obtained by swapping the predicted labels.
    pub fn flip_predictions(&self) -> Self {
        ConfusionCounts {
            tp: self.fn_,
            fp: self.tn,
            tn: self.fp,
            fn_: self.tp,
        }
    }
}

/// Tally predictions against ground truth; class 1 is positive.
pub fn confusion_counts(pred: &[usize], truth: &[usize]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::Label(format!("binary labels expected, got ({p}, {t})"))),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Rates from a confusion table. A zero denominator yields 0 for that rate.
pub fn confusion_stats(c: ConfusionCounts) -> Result<ConfusionStats> {
    if c.total() == 0 {
        return Err(Error::Degenerate("confusion table is empty".into()));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    Ok(ConfusionStats {
        accuracy: (tp + tn) / c.total() as f64,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        mcc: ratio(tp * tn - fp * fn_, den),
    })
}

fn check_scores(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Label(format!("binary labels expected, got {l}")));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Degenerate(format!(
            "ROC analysis needs both classes ({n1} positive, {n0} negative)"
        )));
    }
    Ok((n1, n0))
}

/// 1-based ranks with ties sharing their average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC, `(wins + ties/2) / (n₁·n₀)`, via midranks.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (n1, n0) = check_scores(scores, labels)?;
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let n1f = n1 as f64;
    Ok((pos_rank_sum - n1f * (n1f + 1.0) / 2.0) / (n1f * n0 as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub delong_variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

fn sample_var(v: &[f64], mean: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64
}

/// AUC with the DeLong structural-component variance and a two-sided
/// normal-approximation interval clipped to `[0, 1]`. A class with a single
/// member contributes no variance term.
pub fn delong_ci(scores: &[f64], labels: &[usize], level: f64) -> Result<RocResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let auc = roc_auc(scores, labels)?;
    let (n1, n0) = check_scores(scores, labels)?;
    let all = midranks(scores);
    let split = |cls: usize| -> (Vec<usize>, Vec<f64>) {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cls).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        (idx, midranks(&vals))
    };
    let (pos_idx, pos_ranks) = split(1);
    let (neg_idx, neg_ranks) = split(0);
    let v10: Vec<f64> = pos_idx
        .iter()
        .zip(&pos_ranks)
        .map(|(&i, r)| (all[i] - r) / n0 as f64)
        .collect();
    let v01: Vec<f64> = neg_idx
        .iter()
        .zip(&neg_ranks)
        .map(|(&j, r)| 1.0 - (all[j] - r) / n1 as f64)
        .collect();
    let var = (sample_var(&v10, auc) / n1 as f64 + sample_var(&v01, auc) / n0 as f64).max(0.0);
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half = z * var.sqrt();
    Ok(RocResult {
        auc,
        delong_variance: var,
        ci_low: (auc - half).clamp(0.0, 1.0),
        ci_high: (auc + half).clamp(0.0, 1.0),
        level,
    })
}

/// Everything reported for one binary classifier on one cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub counts: ConfusionCounts,
    pub stats: ConfusionStats,
    /// `None` when the cohort holds a single class.
    pub roc: Option<RocResult>,
}

/// Metrics for positive-class probabilities; a case is called positive when
/// its probability exceeds 0.5.
pub fn binary_metrics(probs: &[f64], labels: &[usize]) -> Result<BinaryMetrics> {
    let pred: Vec<usize> = probs.iter().map(|&p| usize::from(p > 0.5)).collect();
    let counts = confusion_counts(&pred, labels)?;
    let stats = confusion_stats(counts)?;
    let roc = match delong_ci(probs, labels, 0.95) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(msg)) => {
            log::warn!("AUC not reported: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(BinaryMetrics { counts, stats, roc })
}
