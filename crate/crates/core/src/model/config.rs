use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and regularization hyperparameters of the autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Time points per window (T).
    pub window_len: usize,
    /// Input channels (M).
    pub channels: usize,
    /// Latent width (D).
    pub d_model: usize,
    /// Attention heads (H).
    pub heads: usize,
    /// Query/key width per head.
    pub d_qk: usize,
    /// Value width per head.
    pub d_v: usize,
    pub layers: usize,
    /// Hidden width of the per-layer feed-forward network.
    pub ffn_width: usize,
    pub dropout: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale architecture for windows of `window_len × channels`.
    pub fn new(window_len: usize, channels: usize) -> Self {
        ModelConfig {
            window_len,
            channels,
            d_model: 64,
            heads: 8,
            d_qk: 8,
            d_v: 8,
            layers: 3,
            ffn_width: 256,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// One-layer configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            window_len: 8,
            channels: 2,
            d_model: 8,
            heads: 2,
            d_qk: 4,
            d_v: 4,
            layers: 1,
            ffn_width: 16,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window_len", self.window_len),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_qk", self.d_qk),
            ("d_v", self.d_v),
            ("layers", self.layers),
            ("ffn_width", self.ffn_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (t, m, d, h) = (self.window_len, self.channels, self.d_model, self.heads);
        let (dq, dv, f) = (self.d_qk, self.d_v, self.ffn_width);
        let per_layer = h * (2 * d * dq + d * dv) // query, key, value maps
            + h * dv * d                          // head aggregation
            + d * f + f + f * d + d               // feed-forward
            + 4 * d; // two norms
        m * d + t * d + self.layers * per_layer + d * m + m
    }
}
