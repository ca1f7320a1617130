use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Float, Tensor, NORM_MOMENTUM};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

/// Learnable gain/bias plus running statistics used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// `(H·D_v) × D` aggregation of concatenated head outputs.
    pub w_a: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub norm1: NormParams<T>,
    pub norm2: NormParams<T>,
}

/// All tensors of the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `M × D` input projection.
    pub projection: Tensor<T>,
    /// `T × D` learned positional encoding.
    pub positional: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `D × M` reconstruction head.
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

fn xavier<T: Float>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| T::from_f64_lossy(rng.random_range(-limit..limit)))
}

impl<T: Float> NormParams<T> {
    fn new(d: usize) -> Self {
        NormParams {
            gain: Tensor::ones([d]),
            bias: Tensor::zeros([d]),
            running_mean: Tensor::zeros([d]),
            running_var: Tensor::ones([d]),
        }
    }

    /// Exponential moving average with unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(NORM_MOMENTUM);
        let keep = T::one() - m;
        let n = stats.count as f64;
        let unbias = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

impl<T: Float> ModelParams<T> {
    /// Fresh parameters: Xavier-uniform matrices, N(0, 0.02²) positional
    /// encoding, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let projection = xavier(c.channels, c.d_model, &mut rng);
        let positional = Tensor::from_fn([c.window_len, c.d_model], |_| T::from_f64_lossy(normal.sample(&mut rng)));
        let layers = (0..c.layers)
            .map(|_| LayerParams {
                heads: (0..c.heads)
                    .map(|_| HeadParams {
                        w_q: xavier(c.d_model, c.d_qk, &mut rng),
                        w_k: xavier(c.d_model, c.d_qk, &mut rng),
                        w_v: xavier(c.d_model, c.d_v, &mut rng),
                    })
                    .collect(),
                w_a: xavier(c.heads * c.d_v, c.d_model, &mut rng),
                ffn_w1: xavier(c.d_model, c.ffn_width, &mut rng),
                ffn_b1: Tensor::zeros([c.ffn_width]),
                ffn_w2: xavier(c.ffn_width, c.d_model, &mut rng),
                ffn_b2: Tensor::zeros([c.d_model]),
                norm1: NormParams::new(c.d_model),
                norm2: NormParams::new(c.d_model),
            })
            .collect();
        let out_w = xavier(c.d_model, c.channels, &mut rng);
        Ok(ModelParams {
            config: config.clone(),
            projection,
            positional,
            layers,
            out_w,
            out_b: Tensor::zeros([c.channels]),
        })
    }

    /// Every tensor with its checkpoint name and whether it is trainable,
    /// in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>, bool)> {
        let mut out = vec![
            ("projection".to_string(), &self.projection, true),
            ("positional".to_string(), &self.positional, true),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), &head.w_q, true));
                out.push((format!("layers.{l}.heads.{h}.w_k"), &head.w_k, true));
                out.push((format!("layers.{l}.heads.{h}.w_v"), &head.w_v, true));
            }
            out.push((format!("layers.{l}.w_a"), &layer.w_a, true));
            out.push((format!("layers.{l}.ffn.w1"), &layer.ffn_w1, true));
            out.push((format!("layers.{l}.ffn.b1"), &layer.ffn_b1, true));
            out.push((format!("layers.{l}.ffn.w2"), &layer.ffn_w2, true));
            out.push((format!("layers.{l}.ffn.b2"), &layer.ffn_b2, true));
            for (k, norm) in [(1, &layer.norm1), (2, &layer.norm2)] {
                out.push((format!("layers.{l}.norm{k}.gain"), &norm.gain, true));
                out.push((format!("layers.{l}.norm{k}.bias"), &norm.bias, true));
                out.push((format!("layers.{l}.norm{k}.running_mean"), &norm.running_mean, false));
                out.push((format!("layers.{l}.norm{k}.running_var"), &norm.running_var, false));
            }
        }
        out.push(("output.weight".to_string(), &self.out_w, true));
        out.push(("output.bias".to_string(), &self.out_b, true));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>, bool)> {
        let mut out = vec![
            ("projection".to_string(), &mut self.projection, true),
            ("positional".to_string(), &mut self.positional, true),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), &mut head.w_q, true));
                out.push((format!("layers.{l}.heads.{h}.w_k"), &mut head.w_k, true));
                out.push((format!("layers.{l}.heads.{h}.w_v"), &mut head.w_v, true));
            }
            out.push((format!("layers.{l}.w_a"), &mut layer.w_a, true));
            out.push((format!("layers.{l}.ffn.w1"), &mut layer.ffn_w1, true));
            out.push((format!("layers.{l}.ffn.b1"), &mut layer.ffn_b1, true));
            out.push((format!("layers.{l}.ffn.w2"), &mut layer.ffn_w2, true));
            out.push((format!("layers.{l}.ffn.b2"), &mut layer.ffn_b2, true));
            for (k, norm) in [(1, &mut layer.norm1), (2, &mut layer.norm2)] {
                out.push((format!("layers.{l}.norm{k}.gain"), &mut norm.gain, true));
                out.push((format!("layers.{l}.norm{k}.bias"), &mut norm.bias, true));
                out.push((format!("layers.{l}.norm{k}.running_mean"), &mut norm.running_mean, false));
                out.push((format!("layers.{l}.norm{k}.running_var"), &mut norm.running_var, false));
            }
        }
        out.push(("output.weight".to_string(), &mut self.out_w, true));
        out.push(("output.bias".to_string(), &mut self.out_b, true));
        out
    }

    /// Trainable tensors only, cloned, in binding order.
    pub fn trainable(&self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, t, _)| (n, t.clone()))
            .collect()
    }

    /// Replace trainable tensors (in [`trainable`](Self::trainable) order).
    pub fn set_trainable(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut values = values.into_iter();
        for (name, slot, trainable) in self.named_tensors_mut() {
            if !trainable {
                continue;
            }
            let v = values
                .next()
                .ok_or_else(|| Error::Param(format!("missing value for {name}")))?;
            if v.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "set_trainable",
                    lhs: slot.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            *slot = v;
        }
        if values.next().is_some() {
            return Err(Error::Param("too many trainable values".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, _, t)| *t)
            .map(|(_, t, _)| t.len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        let norm = |n: &NormParams<T>| NormParams {
            gain: n.gain.cast(),
            bias: n.bias.cast(),
            running_mean: n.running_mean.cast(),
            running_var: n.running_var.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            projection: self.projection.cast(),
            positional: self.positional.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            w_q: h.w_q.cast(),
                            w_k: h.w_k.cast(),
                            w_v: h.w_v.cast(),
                        })
                        .collect(),
                    w_a: l.w_a.cast(),
                    ffn_w1: l.ffn_w1.cast(),
                    ffn_b1: l.ffn_b1.cast(),
                    ffn_w2: l.ffn_w2.cast(),
                    ffn_b2: l.ffn_b2.cast(),
                    norm1: norm(&l.norm1),
                    norm2: norm(&l.norm2),
                })
                .collect(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }

    /// Apply training-mode batch statistics, two per layer in forward order.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        for (layer, pair) in self.layers.iter_mut().zip(stats.chunks(2)) {
            layer.norm1.update_running(&pair[0]);
            if let Some(s) = pair.get(1) {
                layer.norm2.update_running(s);
            }
        }
    }
}
