//! Classification metrics: tie-aware AUROC, one-vs-rest macro AUROC,
//! accuracy and macro precision / recall / F1.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary AUROC counting ties as one half:
/// `(#{s_p > s_n} + ½ #{s_p = s_n}) / (|pos| · |neg|)`.
///
/// Computed from tie-averaged ranks (Mann–Whitney U) in `O(n log n)`; the
/// rank sums are exact multiples of ½, so the result equals the pairwise
/// count exactly.
pub fn auroc_binary(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs positive and negative scores (got {} / {})",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUROC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of 1-based ranks of positives, ties averaged; kept doubled to stay integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let n_pos = all[i..=j].iter().filter(|(_, p)| *p).count() as u128;
        // average rank of positions i..=j (1-based) is (i + j + 2) / 2
        doubled_rank_sum += n_pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let p = pos.len() as u128;
    let n = neg.len() as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok((doubled_u as f64 / 2.0) / (p * n) as f64)
}

/// Per-class one-vs-rest AUROC: positives are samples of class `k`, all
/// others are negatives, both scored by column `k`.
pub fn auroc_per_class(scores: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = scores.dim();
    if n != labels.len() {
        return Err(Error::Argument(format!(
            "{n} score rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Argument(format!("label {bad} outside 0..{k}")));
    }
    (0..k)
        .map(|class| {
            let column = scores.column(class);
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (&s, &l) in column.iter().zip(labels) {
                if l == class {
                    pos.push(s);
                } else {
                    neg.push(s);
                }
            }
            if pos.is_empty() {
                return Err(Error::UndefinedMetric(format!(
                    "class {class} has no samples"
                )));
            }
            auroc_binary(&pos, &neg)
        })
        .collect()
}

/// Unweighted mean of the per-class one-vs-rest AUROCs.
pub fn auroc_multiclass(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let per_class = auroc_per_class(scores, labels)?;
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// `counts[i][j]` = number of samples with label `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    /// Predicted as `k` but labelled otherwise.
    pub fn false_positives(&self, k: usize) -> u64 {
        (0..self.num_classes())
            .filter(|&i| i != k)
            .map(|i| self.counts[i][k])
            .sum()
    }

    /// Labelled `k` but predicted otherwise.
    pub fn false_negatives(&self, k: usize) -> u64 {
        (0..self.num_classes())
            .filter(|&j| j != k)
            .map(|j| self.counts[k][j])
            .sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }
}

pub fn confusion_and_accuracy(
    preds: &[usize],
    labels: &[usize],
    k: usize,
) -> Result<(ConfusionMatrix, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of zero samples".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Argument(format!(
                "prediction {p} / label {l} outside 0..{k}"
            )));
        }
        counts[l][p] += 1;
    }
    let confusion = ConfusionMatrix { counts };
    let accuracy = confusion.trace() as f64 / confusion.total() as f64;
    Ok((confusion, accuracy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    /// Zero denominators yield 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self::from_pr(precision, recall)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<Prf>,
}

/// Per-class precision / recall / F1 and their unweighted means.
pub fn macro_prf(confusion: &ConfusionMatrix) -> Result<MacroPrf> {
    let k = confusion.num_classes();
    if k < 2 {
        return Err(Error::Argument(format!(
            "macro metrics need K >= 2, got {k}"
        )));
    }
    if confusion.total() == 0 {
        return Err(Error::UndefinedMetric(
            "confusion matrix is all zero".into(),
        ));
    }
    let per_class: Vec<Prf> = (0..k)
        .map(|c| {
            Prf::from_counts(
                confusion.true_positives(c),
                confusion.false_positives(c),
                confusion.false_negatives(c),
            )
        })
        .collect();
    let mean = |f: fn(&Prf) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(MacroPrf {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub auroc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Evaluation summary; JSON keys follow the AUROC / ACC / F1 / precision /
/// recall column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    #[serde(rename = "acc")]
    pub accuracy: f64,
    #[serde(rename = "f1")]
    pub f1_macro: f64,
    #[serde(rename = "precision")]
    pub precision_macro: f64,
    #[serde(rename = "recall")]
    pub recall_macro: f64,
    pub per_class: Vec<ClassReport>,
    pub confusion: ConfusionMatrix,
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Full report from an `N×K` score matrix; predictions are row-wise argmax.
pub fn evaluate(
    scores: ArrayView2<f64>,
    labels: &[usize],
    class_names: &[String],
) -> Result<EvalReport> {
    let k = scores.ncols();
    if class_names.len() != k {
        return Err(Error::Argument(format!(
            "{} class names for {k} score columns",
            class_names.len()
        )));
    }
    let preds: Vec<usize> = scores
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect();
    let per_class_auroc = auroc_per_class(scores, labels)?;
    let (confusion, accuracy) = confusion_and_accuracy(&preds, labels, k)?;
    let prf = macro_prf(&confusion)?;
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassReport {
            class: name.clone(),
            auroc: per_class_auroc[c],
            precision: prf.per_class[c].precision,
            recall: prf.per_class[c].recall,
            f1: prf.per_class[c].f1,
            support: confusion.support(c),
        })
        .collect();
    Ok(EvalReport {
        auroc: per_class_auroc.iter().sum::<f64>() / k as f64,
        accuracy,
        f1_macro: prf.f1,
        precision_macro: prf.precision,
        recall_macro: prf.recall,
        per_class,
        confusion,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Metrics aggregated over independent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub auroc: MeanSd,
    pub acc: MeanSd,
    pub f1: MeanSd,
    pub precision: MeanSd,
    pub recall: MeanSd,
}

impl SeedSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let pick =
            |f: fn(&EvalReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            auroc: pick(|r| r.auroc),
            acc: pick(|r| r.accuracy),
            f1: pick(|r| r.f1_macro),
            precision: pick(|r| r.precision_macro),
            recall: pick(|r| r.recall_macro),
        }
    }
}
