use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use super::Recording;
use crate::error::{Error, Result};

/// Bandpass built from a second-order Butterworth high-pass and a
/// second-order Butterworth low-pass (total order 4).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Forward-backward filtering; squares the magnitude response and
    /// cancels the phase.
    pub zero_phase: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            order: 4,
            low_hz: 0.5,
            high_hz: 50.0,
            zero_phase: true,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        if self.order != 4 {
            return Err(Error::Param(format!("filter order {} unsupported (only 4)", self.order)));
        }
        let nyquist = rate_hz / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(Error::Param(format!(
                "band {}–{} Hz must satisfy 0 < low < high",
                self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= nyquist {
            return Err(Error::Param(format!(
                "high cutoff {} Hz is not below the Nyquist frequency {nyquist} Hz",
                self.high_hz
            )));
        }
        Ok(())
    }

    /// Analytic power gain `|H(f)|²` of the digital cascade, squared again
    /// in zero-phase mode.
    pub fn power_gain(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        let w = (PI * freq_hz / rate_hz).tan();
        let kl = (PI * self.low_hz / rate_hz).tan();
        let kh = (PI * self.high_hz / rate_hz).tan();
        let hp = 1.0 / (1.0 + (kl / w).powi(4));
        let lp = 1.0 / (1.0 + (w / kh).powi(4));
        let g = hp * lp;
        if self.zero_phase {
            g * g
        } else {
            g
        }
    }

    pub fn sections(&self, rate_hz: f64) -> Result<[Biquad; 2]> {
        self.validate(rate_hz)?;
        Ok([Biquad::highpass(self.low_hz, rate_hz), Biquad::lowpass(self.high_hz, rate_hz)])
    }
}

/// Normalized second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Bilinear transform with the cutoff prewarped.
    pub fn lowpass(cutoff_hz: f64, rate_hz: f64) -> Self {
        let k = (PI * cutoff_hz / rate_hz).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        let b0 = k * k * norm;
        Biquad {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm],
        }
    }

    pub fn highpass(cutoff_hz: f64, rate_hz: f64) -> Self {
        let k = (PI * cutoff_hz / rate_hz).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        Biquad {
            b: [norm, -2.0 * norm, norm],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm],
        }
    }

    /// Transposed direct form II, started in the steady state for a
    /// constant input equal to the first sample.
    pub fn apply(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let dc = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let mut z1 = (dc - b0) * x0;
        let mut z2 = (b2 - a2 * dc) * x0;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z1;
            z1 = b1 * input - a1 * y + z2;
            z2 = b2 * input - a2 * y;
            *v = y;
        }
    }
}

fn cascade(sections: &[Biquad], x: &mut [f64]) {
    for s in sections {
        s.apply(x);
    }
}

/// Filter one series in place.
pub fn filter_series(spec: &FilterSpec, rate_hz: f64, x: &mut [f64]) -> Result<()> {
    let sections = spec.sections(rate_hz)?;
    if !spec.zero_phase {
        cascade(&sections, x);
        return Ok(());
    }
    let n = x.len();
    if n < 2 {
        return Ok(());
    }
    // Odd extension at both ends damps the start-up transients.
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    cascade(&sections, &mut ext);
    ext.reverse();
    cascade(&sections, &mut ext);
    ext.reverse();
    x.copy_from_slice(&ext[pad..pad + n]);
    Ok(())
}

/// Apply the bandpass to every channel; length and metadata are preserved.
pub fn butterworth_bandpass(rec: &Recording, spec: &FilterSpec) -> Result<Recording> {
    spec.validate(rec.rate_hz)?;
    let series = (0..rec.channels())
        .map(|c| {
            let mut s = rec.channel(c);
            filter_series(spec, rec.rate_hz, &mut s).map(|_| s)
        })
        .collect::<Result<Vec<_>>>()?;
    rec.with_channels(&series, rec.rate_hz, rec.channel_names.clone())
}
