//! Anomaly scores, threshold selection and evaluation metrics.
//!
//! A window's score is the mean absolute reconstruction error of the
//! unmasked window. Anomalous windows (label `true`) are expected to score
//! higher; a window is flagged when `score > threshold`.

mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    auc, auc_ci, auc_variance, classification_metrics, proportion_ci, select_threshold, ClassificationMetrics,
    Confusion, ThresholdChoice, Z95,
};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Float, Tensor};

/// `(1/(T·M)) Σ |x − x̂|`.
pub fn anomaly_score<T: Float>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() || x.is_empty() {
        return Err(Error::Shape {
            op: "anomaly_score",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a - b).abs().to_f64().unwrap())
        .sum();
    Ok(sum / x.len() as f64)
}

pub const SCORE_BATCH: usize = 64;

/// Score every window of an `N × T × M` tensor with the model in inference
/// mode. Batches run in parallel; results are in window order.
pub fn score_windows<T: Float>(params: &ModelParams<T>, windows: &Tensor<T>) -> Result<Vec<f64>> {
    let s = windows.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "score_windows",
            lhs: s.to_vec(),
            rhs: vec![0, params.config.window_len, params.config.channels],
        });
    }
    let (n, size) = (s[0], s[1] * s[2]);
    let starts: Vec<usize> = (0..n).step_by(SCORE_BATCH).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let end = (start + SCORE_BATCH).min(n);
            let batch = Tensor::new(
                vec![end - start, s[1], s[2]],
                windows.data()[start * size..end * size].to_vec(),
            )?;
            let recon = params.forward(&batch, false)?.recon;
            (0..end - start)
                .map(|i| {
                    let a = Tensor::new(vec![s[1], s[2]], batch.data()[i * size..(i + 1) * size].to_vec())?;
                    let b = Tensor::new(vec![s[1], s[2]], recon.data()[i * size..(i + 1) * size].to_vec())?;
                    anomaly_score(&a, &b)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Scores with labels and window ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(ids: Vec<usize>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if ids.len() != scores.len() || labels.len() != scores.len() {
            return Err(Error::Param("score set columns differ in length".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Param(format!("score of window {} is not a finite nonnegative number", ids[i])));
        }
        Ok(ScoreSet { ids, scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Rows whose id satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> ScoreSet {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.ids[i])).collect();
        ScoreSet {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            scores: rows.iter().map(|&i| self.scores[i]).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `window_id,score,label`; scores use the shortest exact representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_id,score,label\n");
        for i in 0..self.len() {
            out.push_str(&format!("{},{},{}\n", self.ids[i], self.scores[i], self.labels[i] as u8));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::input(path, e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::input(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != ["window_id", "score", "label"] {
            return Err(Error::input(path, format!("expected header window_id,score,label, got {}", header.join(","))));
        }
        let (mut ids, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::input(path, format!("row {}: {e}", row + 1)))?;
            let bad = |col: &str| Error::input(path, format!("row {} column {col}: cannot parse", row + 1));
            ids.push(rec[0].parse().map_err(|_| bad("window_id"))?);
            scores.push(rec[1].parse().map_err(|_| bad("score"))?);
            labels.push(match &rec[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("label")),
            });
        }
        ScoreSet::new(ids, scores, labels).map_err(|e| Error::input(path, e.to_string()))
    }
}

/// Where the decision threshold is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// A labeled calibration split (the validation split by default).
    Calibration,
    /// The test split itself; optimistic, kept for comparison.
    Test,
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calibration" => Ok(ThresholdPolicy::Calibration),
            "test" => Ok(ThresholdPolicy::Test),
            other => Err(Error::Param(format!("unknown threshold policy `{other}`"))),
        }
    }
}

/// A metric with its 95% half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub threshold_g_mean: f64,
    pub threshold_policy: ThresholdPolicy,
    pub precision: Estimate,
    pub recall: Estimate,
    pub balanced_accuracy: Estimate,
    /// AUC with the Hanley–McNeil interval.
    pub auc: Estimate,
    /// Anomalous test windows.
    pub m: usize,
    /// Normal test windows.
    pub n: usize,
    pub confusion: Confusion,
    pub calibration_windows: usize,
    pub config: BTreeMap<String, String>,
}

/// Fit the threshold on `calibration` (or on `test` under
/// [`ThresholdPolicy::Test`]) and report every metric on `test`.
pub fn evaluate(test: &ScoreSet, calibration: &ScoreSet, policy: ThresholdPolicy) -> Result<EvalReport> {
    let fit = match policy {
        ThresholdPolicy::Calibration => calibration,
        ThresholdPolicy::Test => test,
    };
    let choice = select_threshold(&fit.scores, &fit.labels)?;
    let cls = classification_metrics(&test.scores, &test.labels, choice.threshold)?;
    let a = auc(&test.scores, &test.labels)?;
    let m = test.labels.iter().filter(|&&l| l).count();
    let n = test.len() - m;
    let prop = |p: f64| -> Result<Estimate> {
        Ok(Estimate {
            value: p,
            ci95: proportion_ci(p, m, n)?,
        })
    };
    Ok(EvalReport {
        threshold: choice.threshold,
        threshold_g_mean: choice.g_mean,
        threshold_policy: policy,
        precision: prop(cls.precision)?,
        recall: prop(cls.recall)?,
        balanced_accuracy: prop(cls.balanced_accuracy)?,
        auc: Estimate {
            value: a,
            ci95: auc_ci(a, m, n)?,
        },
        m,
        n,
        confusion: cls.confusion,
        calibration_windows: fit.len(),
        config: BTreeMap::new(),
    })
}

/// Serde adapter that writes non-finite floats as the strings `"inf"`,
/// `"-inf"` and `"nan"`, which plain JSON numbers cannot hold.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}
