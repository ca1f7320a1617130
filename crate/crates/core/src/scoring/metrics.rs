use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// z-value of a two-sided 95% interval.
pub const Z95: f64 = 1.96;

fn class_sizes(labels: &[bool]) -> (usize, usize) {
    let m = labels.iter().filter(|&&l| l).count();
    (m, labels.len() - m)
}

fn require_both(scores: &[f64], labels: &[bool], what: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Param(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Param(format!("score {i} is not finite")));
    }
    let (m, n) = class_sizes(labels);
    if m == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs both classes, got {m} anomalous and {n} normal"
        )));
    }
    Ok((m, n))
}

/// Indices sorted by score, then grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUC: the probability that an anomalous window (label
/// `true`) outscores a normal one, ties counting one half. Uses rank sums
/// with tied ranks averaged; all sums are kept as doubled integers so the
/// result is exact.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (m, n) = require_both(scores, labels, "AUC")?;
    let mut doubled_rank_sum: u128 = 0;
    let mut next_rank: u128 = 1;
    for group in tie_groups(scores) {
        let k = group.len() as u128;
        // Twice the average of ranks next_rank ..= next_rank + k - 1.
        let doubled_avg = 2 * next_rank + k - 1;
        let positives = group.iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += positives * doubled_avg;
        next_rank += k;
    }
    let (m, n) = (m as u128, n as u128);
    let doubled_u = doubled_rank_sum - m * (m + 1);
    Ok(doubled_u as f64 / (2 * m * n) as f64)
}

/// Hanley–McNeil variance of an AUC estimate from `m` anomalous and `n`
/// normal windows, clamped at zero.
pub fn auc_variance(a: f64, m: usize, n: usize) -> Result<f64> {
    if m == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUC variance needs m, n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Param(format!("AUC {a} outside [0, 1]")));
    }
    let px = a / (2.0 - a);
    let py = 2.0 * a * a / (1.0 + a);
    let (mf, nf) = (m as f64, n as f64);
    let var = (a * (1.0 - a) + (mf - 1.0) * (px - a * a) + (nf - 1.0) * (py - a * a)) / (mf * nf);
    Ok(var.max(0.0))
}

/// 95% half-width `1.96 σ_A` from the Hanley–McNeil variance.
pub fn auc_ci(a: f64, m: usize, n: usize) -> Result<f64> {
    Ok(Z95 * auc_variance(a, m, n)?.sqrt())
}

/// 95% half-width of a proportion estimated from `m + n` windows.
pub fn proportion_ci(p: f64, m: usize, n: usize) -> Result<f64> {
    if m + n == 0 {
        return Err(Error::UndefinedMetric("proportion interval over zero windows".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("proportion {p} outside [0, 1]")));
    }
    Ok(Z95 * (p * (1.0 - p) / (m + n) as f64).max(0.0).sqrt())
}

/// The chosen cut and its quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    #[serde(with = "super::extended_f64")]
    pub threshold: f64,
    pub g_mean: f64,
    /// No cut separates the classes at all (G-mean 0 everywhere).
    pub degenerate: bool,
}

/// Threshold maximizing `√(TPR·TNR)` for the rule `score > threshold`.
/// Candidates are −∞, the midpoints between consecutive distinct scores, and
/// +∞; ties go to the lowest candidate.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice> {
    let (m, n) = require_both(scores, labels, "threshold selection")?;
    let groups = tie_groups(scores);
    // Everything above the cut is predicted anomalous; start with all of it.
    let (mut tp, mut tn) = (m, 0usize);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, group) in groups.iter().enumerate() {
        for &i in group {
            if labels[i] {
                tp -= 1;
            } else {
                tn += 1;
            }
        }
        let product = tp * tn;
        if product > best.0 {
            let cut = match groups.get(k + 1) {
                Some(next) => {
                    let (lo, hi) = (scores[group[0]], scores[next[0]]);
                    let mid = lo + (hi - lo) / 2.0;
                    // Adjacent floats have no midpoint; `lo` induces the same split.
                    if mid < hi {
                        mid
                    } else {
                        lo
                    }
                }
                None => f64::INFINITY,
            };
            best = (product, cut);
        }
    }
    let degenerate = best.0 == 0;
    if degenerate {
        log::warn!("no threshold separates the classes; returning the lowest candidate");
    }
    Ok(ThresholdChoice {
        threshold: best.1,
        g_mean: ((best.0 as f64) / (m as f64 * n as f64)).sqrt(),
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: Confusion,
    /// Per-class values weighted by class support.
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
}

fn ratio_or_zero(num: usize, den: usize, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what}: no windows predicted in this class; precision set to 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationMetrics> {
    let (m, n) = require_both(scores, labels, "classification metrics")?;
    let c = Confusion::new(scores, labels, threshold);
    let recall_pos = c.tp as f64 / m as f64;
    let recall_neg = c.tn as f64 / n as f64;
    let precision_pos = ratio_or_zero(c.tp, c.tp + c.fp, "anomalous class");
    let precision_neg = ratio_or_zero(c.tn, c.tn + c.fn_, "normal class");
    let total = (m + n) as f64;
    let weight = |pos: f64, neg: f64| (m as f64 * pos + n as f64 * neg) / total;
    Ok(ClassificationMetrics {
        confusion: c,
        precision: weight(precision_pos, precision_neg),
        recall: weight(recall_pos, recall_neg),
        balanced_accuracy: (recall_pos + recall_neg) / 2.0,
    })
}
