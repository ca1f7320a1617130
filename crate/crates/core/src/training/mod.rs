//! Masked-reconstruction training on normal-only windows.
//!
//! Each step draws fresh masks for the windows of a batch, zeroes the
//! masked cells, reconstructs, and minimizes the squared error over the
//! masked cells pooled across the batch. After each epoch the validation
//! loss is measured with masks that depend only on the window index, and
//! the parameters with the lowest validation loss are kept.

mod checkpoint;
mod manifest;
mod optim;

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    CHECKPOINT_VERSION,
};
pub use manifest::RunManifest;
pub use optim::{Adam, AdamConfig};

use crate::dataprep::{Split, WindowSet};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, mix_seed, Mask, MaskSpec};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Float, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Param(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mask: MaskSpec,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// A rate of exactly 0 freezes the model: neither the weights nor the
    /// running normalization statistics change.
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask: MaskSpec::default(),
            batch_size: 32,
            max_epochs: 200,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            patience: 10,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.adam.validate()
    }

    fn frozen(&self) -> bool {
        self.learning_rate == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Zero-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: usize,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.val_losses.len()
    }
}

/// Mean squared error over the masked cells of `T × M` (or batched) tensors.
pub fn masked_mse<T: Float>(x: &Tensor<T>, x_hat: &Tensor<T>, mask: &[bool]) -> Result<T> {
    if x.shape() != x_hat.shape() || mask.len() != x.len() {
        return Err(Error::Shape {
            op: "masked_mse",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let (sum, count) = x
        .data()
        .iter()
        .zip(x_hat.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((T::zero(), 0usize), |(s, c), ((&a, &b), _)| (s + (a - b) * (a - b), c + 1));
    if count == 0 {
        return Err(Error::Param("masked_mse over an empty mask".into()));
    }
    Ok(sum / T::from_usize(count).unwrap())
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;
const VALIDATION_EPOCH: u64 = u64::MAX;

/// Seeds of every random stream in a run, derived from the train seed and
/// the mask seed.
#[derive(Clone, Copy, Debug)]
struct Streams {
    base: u64,
}

impl Streams {
    fn new(cfg: &TrainConfig) -> Self {
        Streams {
            base: mix_seed(cfg.seed, cfg.mask.seed, 0),
        }
    }

    fn mask(&self, spec: &MaskSpec, epoch: u64, window: u64, t: usize, m: usize) -> Result<Mask> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.base, epoch, window));
        spec.generate(t, m, &mut rng)
    }

    fn shuffle(&self, epoch: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.base ^ SHUFFLE_STREAM, epoch, 0))
    }

    fn dropout(&self, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.base ^ DROPOUT_STREAM, step, 0))
    }
}

/// Masked inputs, targets and mask bits for a set of windows.
struct MaskedBatch<T> {
    input: Tensor<T>,
    target: Tensor<T>,
    mask: Vec<bool>,
}

fn masked_batch<T: Float>(
    windows: &Tensor<T>,
    indices: &[usize],
    masks: impl Fn(usize) -> Result<Mask>,
) -> Result<MaskedBatch<T>> {
    let (t, m) = (windows.shape()[1], windows.shape()[2]);
    let size = t * m;
    let mut input = Vec::with_capacity(indices.len() * size);
    let mut target = Vec::with_capacity(indices.len() * size);
    let mut bits = Vec::with_capacity(indices.len() * size);
    for &i in indices {
        let w = Tensor::new(vec![t, m], windows.data()[i * size..(i + 1) * size].to_vec())?;
        let mask = masks(i)?;
        input.extend_from_slice(apply_mask(&w, &mask)?.data());
        target.extend_from_slice(w.data());
        bits.extend_from_slice(mask.bits());
    }
    let shape = vec![indices.len(), t, m];
    Ok(MaskedBatch {
        input: Tensor::new(shape.clone(), input)?,
        target: Tensor::new(shape, target)?,
        mask: bits,
    })
}

/// Pooled masked loss of `params` on `windows` in inference mode.
fn validation_loss<T: Float>(
    params: &ModelParams<T>,
    windows: &Tensor<T>,
    spec: &MaskSpec,
    streams: Streams,
    batch_size: usize,
) -> Result<f64> {
    let (t, m) = (windows.shape()[1], windows.shape()[2]);
    let n = windows.shape()[0];
    let indices: Vec<usize> = (0..n).collect();
    let parts = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let batch = masked_batch(windows, chunk, |i| streams.mask(spec, VALIDATION_EPOCH, i as u64, t, m))?;
            let recon = params.forward(&batch.input, false)?.recon;
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for ((&p, &x), &b) in recon.data().iter().zip(batch.target.data()).zip(&batch.mask) {
                if b {
                    let d = (p - x).to_f64().unwrap();
                    sum += d * d;
                    count += 1;
                }
            }
            Ok((sum, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, count) = parts.into_iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    Ok(sum / count.max(1) as f64)
}

/// Windows used for training and validation, with the labels checked.
pub struct TrainData {
    pub train: Tensor<f32>,
    pub val: Tensor<f32>,
}

impl TrainData {
    /// Training windows from the train split (any anomalous window there is
    /// an error) and validation windows from the normal part of the val
    /// split.
    pub fn from_windows(ws: &WindowSet) -> Result<Self> {
        let train_idx = ws.indices(Split::Train);
        if let Some(&bad) = train_idx.iter().find(|&&i| ws.labels[i]) {
            return Err(Error::Config(format!(
                "training split contains anomalous window {bad}; training must see normal windows only"
            )));
        }
        let val_idx: Vec<usize> = ws.indices(Split::Val).into_iter().filter(|&i| !ws.labels[i]).collect();
        if train_idx.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if val_idx.is_empty() {
            return Err(Error::Config("validation split has no normal windows".into()));
        }
        Ok(TrainData {
            train: ws.gather(&train_idx),
            val: ws.gather(&val_idx),
        })
    }
}

/// Train a fresh model on the train split of `ws`.
pub fn train(ws: &WindowSet, model: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainReport)> {
    let data = TrainData::from_windows(ws)?;
    train_on(&data, model, cfg)
}

/// Train on explicit train/validation tensors of shape `N × T × M`.
pub fn train_on(data: &TrainData, model: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainReport)> {
    model.validate()?;
    cfg.validate()?;
    for (name, t) in [("train", &data.train), ("validation", &data.val)] {
        let s = t.shape();
        if s.len() != 3 || s[1] != model.window_len || s[2] != model.channels || s[0] == 0 {
            return Err(Error::ConfigMismatch(format!(
                "{name} windows have shape {s:?}, model expects N×{}×{}",
                model.window_len, model.channels
            )));
        }
    }
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(data, model, cfg),
        Precision::F64 => {
            let (params, report) = train_impl::<f64>(data, model, cfg)?;
            Ok((params.cast(), report))
        }
    }
}

fn train_impl<T: Float>(
    data: &TrainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    let start = Instant::now();
    let train_x: Tensor<T> = data.train.cast();
    let val_x: Tensor<T> = data.val.cast();
    let (t, m) = (model.window_len, model.channels);
    let n = train_x.shape()[0];
    let streams = Streams::new(cfg);

    let mut params = ModelParams::<T>::init(model)?;
    let mut adam = Adam::new(&params.trainable(), cfg.adam, cfg.learning_rate);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut stopped_early = false;
    let mut step = 0u64;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut streams.shuffle(epoch as u64));
        let (mut sq_sum, mut cells) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = masked_batch(&train_x, chunk, |i| streams.mask(&cfg.mask, epoch as u64, i as u64, t, m))?;
            let masked = batch.mask.iter().filter(|&&b| b).count();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(batch.input);
            let out = params.forward_graph(&mut g, &bound, x, true, &mut streams.dropout(step))?;
            let loss = g.masked_mse(out.recon, &batch.target, Rc::new(batch.mask))?;
            let value = g.value(loss).item().to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} at epoch {epoch}, step {step}; try a lower learning rate"
                )));
            }
            sq_sum += value * masked as f64;
            cells += masked;
            if !cfg.frozen() {
                let mut grads = g.backward(loss)?;
                let grads: Vec<Tensor<T>> = bound
                    .vars
                    .iter()
                    .map(|&v| grads.take(v).expect("every parameter reaches the loss"))
                    .collect();
                let mut values: Vec<Tensor<T>> = params.trainable().into_iter().map(|(_, t)| t).collect();
                adam.step(&mut values, &grads)?;
                params.set_trainable(values)?;
                params.update_running_stats(&out.stats);
            }
            step += 1;
        }
        let train_loss = sq_sum / cells.max(1) as f64;
        let val_loss = validation_loss(&params, &val_x, &cfg.mask, streams, cfg.batch_size.max(64))?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        train_losses.push(train_loss);
        val_losses.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let report = TrainReport {
        train_losses,
        val_losses,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        steps: step as usize,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests;
