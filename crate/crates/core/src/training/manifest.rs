use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainReport};
use crate::error::Result;
use crate::model::ModelConfig;

/// Everything needed to reproduce or audit a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub threads: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    /// Effective key/value configuration of the invoking command.
    pub config: BTreeMap<String, String>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(
        model: &ModelConfig,
        train: &TrainConfig,
        report: &TrainReport,
        checkpoint: &Path,
        checkpoint_bytes: &[u8],
        config: BTreeMap<String, String>,
    ) -> Self {
        RunManifest {
            model: model.clone(),
            train: train.clone(),
            seed: train.seed,
            threads: rayon::current_num_threads(),
            train_losses: report.train_losses.clone(),
            val_losses: report.val_losses.clone(),
            best_epoch: report.best_epoch,
            stopped_early: report.stopped_early,
            checkpoint: checkpoint.display().to_string(),
            checkpoint_sha256: crate::sha256_hex(checkpoint_bytes),
            config,
            wall_clock_s: report.wall_clock_s,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::Error::input(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| crate::Error::input(path, format!("malformed manifest: {e}")))
    }
}
