//! Synthetic end-to-end benchmark: generate, preprocess, train on normal
//! windows, score and evaluate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataprep::{preprocess, synth_generate, PreprocessConfig, Split, SynthSpec, WindowSet};
use crate::error::Result;
use crate::masking::MaskSpec;
use crate::model::ModelConfig;
use crate::scoring::{evaluate, score_windows, EvalReport, ScoreSet, ThresholdPolicy};
use crate::training::{train, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub window_len: usize,
    pub channels: usize,
    pub rate_hz: f64,
    /// Seeds the corpus, the split and the model initialization.
    pub data_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl BenchmarkSpec {
    /// 2000 normal and 400 anomalous windows of 128 samples on 4 channels at
    /// 64 Hz with the default model.
    pub fn standard(mask: MaskSpec, max_epochs: usize, seed: u64) -> Self {
        BenchmarkSpec {
            n_normal: 2000,
            n_anomalous: 400,
            window_len: 128,
            channels: 4,
            rate_hz: 64.0,
            data_seed: seed,
            model: ModelConfig { seed, ..ModelConfig::new(128, 4) },
            train: TrainConfig { mask, max_epochs, seed, ..TrainConfig::default() },
        }
    }

    pub fn windows(&self) -> Result<WindowSet> {
        let recs = synth_generate(&SynthSpec {
            n_normal: self.n_normal,
            n_anomalous: self.n_anomalous,
            segment_len: self.window_len,
            channels: self.channels,
            rate_hz: self.rate_hz,
            seed: self.data_seed,
        })?;
        let mut cfg = PreprocessConfig::new(self.window_len, self.data_seed);
        // The default 50 Hz upper edge sits above Nyquist at low rates.
        if self.rate_hz <= 100.0 {
            cfg.filter = None;
        }
        preprocess(&recs, &cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub eval: EvalReport,
    pub training: TrainReport,
    pub wall_clock_s: f64,
}

/// Score one split of `ws` with `params`.
pub fn score_split(params: &crate::model::ModelParams<f32>, ws: &WindowSet, split: Split) -> Result<ScoreSet> {
    let idx = ws.indices(split);
    let scores = score_windows(params, &ws.gather(&idx))?;
    let labels = idx.iter().map(|&i| ws.labels[i]).collect();
    ScoreSet::new(idx, scores, labels)
}

pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkResult> {
    let start = Instant::now();
    let ws = spec.windows()?;
    let (params, training) = train(&ws, &spec.model, &spec.train)?;
    let test = score_split(&params, &ws, Split::Test)?;
    let val = score_split(&params, &ws, Split::Val)?;
    let eval = evaluate(&test, &val, ThresholdPolicy::Calibration)?;
    Ok(BenchmarkResult {
        eval,
        training,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
