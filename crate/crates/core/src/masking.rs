//! Input corruption for masked-reconstruction training.
//!
//! Geometric masking alternates masked and unmasked runs independently in
//! every channel. Run lengths are geometric with means `l_m` (masked) and
//! `l_u = (1 − r)/r · l_m` (unmasked), so the long-run masked fraction is
//! `r`. The Bernoulli baseline masks each cell independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// Redraws attempted before a single masked cell is forced.
pub const MAX_REDRAWS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Geometric,
    Bernoulli,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(MaskStrategy::Geometric),
            "bernoulli" => Ok(MaskStrategy::Bernoulli),
            other => Err(Error::Param(format!("unknown mask strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Geometric => "geometric",
            MaskStrategy::Bernoulli => "bernoulli",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    /// Masking ratio `r` in (0, 1).
    pub ratio: f64,
    /// Mean masked run length `l_m` (geometric only).
    pub mean_masked_len: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            strategy: MaskStrategy::Geometric,
            ratio: 0.15,
            mean_masked_len: 3.0,
            seed: 0,
        }
    }
}

/// `l_u = (1 − r)/r · l_m`.
pub fn unmasked_mean_len(ratio: f64, mean_masked_len: f64) -> f64 {
    (1.0 - ratio) / ratio * mean_masked_len
}

impl MaskSpec {
    pub fn unmasked_mean_len(&self) -> f64 {
        unmasked_mean_len(self.ratio, self.mean_masked_len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Param(format!("masking ratio {} outside (0, 1)", self.ratio)));
        }
        if self.strategy == MaskStrategy::Geometric {
            if !(self.mean_masked_len >= 1.0) {
                return Err(Error::Param(format!(
                    "mean masked length {} must be at least 1",
                    self.mean_masked_len
                )));
            }
            let lu = self.unmasked_mean_len();
            if lu < 1.0 {
                return Err(Error::Param(format!(
                    "ratio {} with mean masked length {} gives mean unmasked length {lu} < 1",
                    self.ratio, self.mean_masked_len
                )));
            }
        }
        Ok(())
    }

    /// Draw a `window_len × channels` mask according to the strategy.
    pub fn generate<R: Rng + ?Sized>(&self, window_len: usize, channels: usize, rng: &mut R) -> Result<Mask> {
        match self.strategy {
            MaskStrategy::Geometric => geometric_mask(window_len, channels, self.ratio, self.mean_masked_len, rng),
            MaskStrategy::Bernoulli => bernoulli_mask(window_len, channels, self.ratio, rng),
        }
    }

    /// Mask for one window, reproducible from `(seed, stream, index)`.
    pub fn generate_for(&self, stream: u64, index: u64, window_len: usize, channels: usize) -> Result<Mask> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, stream, index));
        self.generate(window_len, channels, &mut rng)
    }
}

/// Time × channel mask; `true` marks a masked cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    window_len: usize,
    channels: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(window_len: usize, channels: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != window_len * channels {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![window_len, channels],
                rhs: vec![bits.len()],
            });
        }
        Ok(Mask {
            window_len,
            channels,
            bits,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major (time-major) bits.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    pub fn get(&self, t: usize, m: usize) -> bool {
        self.bits[t * self.channels + m]
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn stats(&self) -> MaskStats {
        let mut masked_runs = Vec::new();
        let mut unmasked_runs = Vec::new();
        for m in 0..self.channels {
            let mut t = 0;
            while t < self.window_len {
                let state = self.get(t, m);
                let start = t;
                while t < self.window_len && self.get(t, m) == state {
                    t += 1;
                }
                if state {
                    masked_runs.push(t - start);
                } else {
                    unmasked_runs.push(t - start);
                }
            }
        }
        let mean = |v: &[usize]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<usize>() as f64 / v.len() as f64
            }
        };
        MaskStats {
            fraction: self.masked_count() as f64 / self.bits.len().max(1) as f64,
            mean_masked_run: mean(&masked_runs),
            mean_unmasked_run: mean(&unmasked_runs),
            masked_runs: masked_runs.len(),
            unmasked_runs: unmasked_runs.len(),
        }
    }
}

/// Summary of a mask. Runs are counted per channel along time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskStats {
    pub fraction: f64,
    pub mean_masked_run: f64,
    pub mean_unmasked_run: f64,
    pub masked_runs: usize,
    pub unmasked_runs: usize,
}

fn run_length<R: Rng + ?Sized>(dist: &Geometric, rng: &mut R) -> usize {
    // `Geometric` counts failures before the first success; runs start at 1.
    1 + dist.sample(rng) as usize
}

fn ensure_nonempty<R: Rng + ?Sized>(
    window_len: usize,
    channels: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Vec<bool>,
) -> Mask {
    for _ in 0..=MAX_REDRAWS {
        let bits = draw(rng);
        if bits.iter().any(|&b| b) {
            return Mask {
                window_len,
                channels,
                bits,
            };
        }
    }
    log::debug!("mask stayed empty after {MAX_REDRAWS} redraws; forcing one cell");
    let mut bits = vec![false; window_len * channels];
    let cell = rng.random_range(0..bits.len());
    bits[cell] = true;
    Mask {
        window_len,
        channels,
        bits,
    }
}

/// Per-channel alternating runs with geometric lengths.
pub fn geometric_mask<R: Rng + ?Sized>(
    window_len: usize,
    channels: usize,
    ratio: f64,
    mean_masked_len: f64,
    rng: &mut R,
) -> Result<Mask> {
    let spec = MaskSpec {
        strategy: MaskStrategy::Geometric,
        ratio,
        mean_masked_len,
        seed: 0,
    };
    spec.validate()?;
    if window_len == 0 || channels == 0 {
        return Err(Error::Param("mask needs at least one cell".into()));
    }
    let masked = Geometric::new(1.0 / mean_masked_len).map_err(|e| Error::Param(e.to_string()))?;
    let unmasked = Geometric::new(1.0 / spec.unmasked_mean_len()).map_err(|e| Error::Param(e.to_string()))?;
    Ok(ensure_nonempty(window_len, channels, rng, |rng| {
        let mut bits = vec![false; window_len * channels];
        for m in 0..channels {
            let mut state = rng.random::<f64>() < ratio;
            let mut t = 0;
            while t < window_len {
                let len = run_length(if state { &masked } else { &unmasked }, rng);
                let end = (t + len).min(window_len);
                if state {
                    for tt in t..end {
                        bits[tt * channels + m] = true;
                    }
                }
                t = end;
                state = !state;
            }
        }
        bits
    }))
}

/// Each cell masked independently with probability `ratio`.
pub fn bernoulli_mask<R: Rng + ?Sized>(window_len: usize, channels: usize, ratio: f64, rng: &mut R) -> Result<Mask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Param(format!("masking ratio {ratio} outside (0, 1)")));
    }
    if window_len == 0 || channels == 0 {
        return Err(Error::Param("mask needs at least one cell".into()));
    }
    Ok(ensure_nonempty(window_len, channels, rng, |rng| {
        (0..window_len * channels).map(|_| rng.random::<f64>() < ratio).collect()
    }))
}

/// Copy of `x` (`T×M`, or `N×T×M` with a mask per item) with masked cells
/// set to zero.
pub fn apply_mask<T: Float>(x: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.window_len || s[s.len() - 1] != mask.channels || s.len() > 2 && s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: s.to_vec(),
            rhs: vec![mask.window_len, mask.channels],
        });
    }
    let data = x
        .data()
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &m)| if m { T::zero() } else { v })
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed from a run seed and two stream coordinates
/// (e.g. epoch and window index).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17))
}
