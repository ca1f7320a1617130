use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Recording;
use crate::error::{Error, Result};
use crate::masking::mix_seed;

/// Parameters of the synthetic EEG-like corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Samples per segment.
    pub segment_len: usize,
    pub channels: usize,
    pub rate_hz: f64,
    pub seed: u64,
}

pub const NOISE_STD: f64 = 0.3;
pub const BACKGROUND_BAND_HZ: (f64, f64) = (8.0, 14.0);
pub const SPIKE_WAVE_BAND_HZ: (f64, f64) = (3.0, 5.0);

/// Background rhythm: 2–3 sinusoids in the alpha band shared by all
/// channels, with a phase offset that grows smoothly across channels, plus
/// white noise.
fn background(len: usize, channels: usize, rate: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let components: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            (
                rng.random_range(BACKGROUND_BAND_HZ.0..BACKGROUND_BAND_HZ.1),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..PI / 2.0),
            )
        })
        .collect();
    let gains: Vec<f64> = (0..channels).map(|_| rng.random_range(0.8..1.2)).collect();
    let mut x = vec![0.0; len * channels];
    for t in 0..len {
        let time = t as f64 / rate;
        for (c, &gain) in gains.iter().enumerate() {
            let v: f64 = components
                .iter()
                .map(|&(f, a, phase, step)| a * (2.0 * PI * f * time + phase + step * c as f64).sin())
                .sum();
            x[t * channels + c] = gain * v + noise.sample(rng);
        }
    }
    let peak = components.iter().map(|c| c.1).fold(0.0, f64::max);
    (x, peak)
}

/// One spike-wave cycle at phase `p ∈ [0, 1)`: a sharp positive spike
/// followed by a broad negative slow wave.
fn spike_wave(p: f64) -> f64 {
    let spike = (-((p - 0.12) / 0.05).powi(2)).exp();
    let wave = (-((p - 0.55) / 0.22).powi(2)).exp();
    spike - wave
}

/// Amplitude of the first harmonic of [`spike_wave`].
fn spike_wave_fundamental() -> f64 {
    let n = 1024;
    let (re, im) = (0..n).fold((0.0, 0.0), |(re, im), i| {
        let p = i as f64 / n as f64;
        let v = spike_wave(p);
        (re + v * (2.0 * PI * p).cos(), im + v * (2.0 * PI * p).sin())
    });
    2.0 * (re * re + im * im).sqrt() / n as f64
}

fn anomaly(len: usize, channels: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut x, peak) = background(len, channels, rate, rng);
    let freq = rng.random_range(SPIKE_WAVE_BAND_HZ.0..SPIKE_WAVE_BAND_HZ.1);
    // The discharge's first harmonic is 2–4× the strongest background rhythm.
    let amplitude = rng.random_range(2.0..4.0) * peak / spike_wave_fundamental();
    let phase = rng.random::<f64>();
    let gains: Vec<f64> = (0..channels).map(|_| rng.random_range(0.9..1.1)).collect();
    for t in 0..len {
        let p = (freq * t as f64 / rate + phase).fract();
        let v = amplitude * spike_wave(p);
        for (c, &g) in gains.iter().enumerate() {
            x[t * channels + c] += g * v;
        }
    }
    x
}

/// Generate `n_normal + n_anomalous` segments, one recording each. Anomalous
/// segments carry a spike-wave discharge over their whole duration and are
/// labeled with the interval `[0, segment_len / rate]`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Recording>> {
    if spec.segment_len == 0 || spec.channels == 0 || !(spec.rate_hz > 0.0) {
        return Err(Error::Param("segment length, channels and rate must be positive".into()));
    }
    let total = spec.n_normal + spec.n_anomalous;
    (0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5717, i as u64));
            let anomalous = i >= spec.n_normal;
            let (samples, intervals, id) = if anomalous {
                let x = anomaly(spec.segment_len, spec.channels, spec.rate_hz, &mut rng);
                let k = i - spec.n_normal;
                (x, vec![(0.0, spec.segment_len as f64 / spec.rate_hz)], format!("seizure_{k:05}"))
            } else {
                let (x, _) = background(spec.segment_len, spec.channels, spec.rate_hz, &mut rng);
                (x, vec![], format!("normal_{i:05}"))
            };
            Recording::unnamed(id, samples, spec.channels, spec.rate_hz, intervals)
        })
        .collect()
}

/// SHA-256 over ids, rates, intervals and sample bits of a corpus.
pub fn corpus_hash(recordings: &[Recording]) -> String {
    let mut h = Sha256::new();
    for r in recordings {
        h.update(r.id.as_bytes());
        h.update(r.rate_hz.to_le_bytes());
        h.update((r.channels() as u64).to_le_bytes());
        for &(s, e) in &r.anomaly_intervals {
            h.update(s.to_le_bytes());
            h.update(e.to_le_bytes());
        }
        for v in r.samples() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
