use super::Recording;
use crate::error::{Error, Result};

/// Downsample to `target_hz`. Integer rate ratios decimate; other ratios
/// interpolate linearly. Anomaly intervals are in seconds and carry over.
pub fn resample(rec: &Recording, target_hz: f64) -> Result<Recording> {
    if !(target_hz > 0.0) {
        return Err(Error::Param(format!("target rate {target_hz} must be positive")));
    }
    if target_hz > rec.rate_hz * (1.0 + 1e-12) {
        return Err(Error::Param(format!(
            "target rate {target_hz} Hz exceeds source rate {} Hz (no upsampling)",
            rec.rate_hz
        )));
    }
    let ratio = rec.rate_hz / target_hz;
    if (ratio - 1.0).abs() < 1e-9 {
        return Ok(rec.clone());
    }
    let rounded = ratio.round();
    let series: Vec<Vec<f64>> = if (ratio - rounded).abs() < 1e-9 {
        let k = rounded as usize;
        (0..rec.channels())
            .map(|c| rec.channel(c).into_iter().step_by(k).collect())
            .collect()
    } else {
        let len = rec.len();
        let out_len = if len == 0 {
            0
        } else {
            ((len - 1) as f64 / ratio).floor() as usize + 1
        };
        (0..rec.channels())
            .map(|c| {
                let x = rec.channel(c);
                (0..out_len)
                    .map(|j| {
                        let pos = j as f64 * ratio;
                        let i = (pos.floor() as usize).min(len - 1);
                        let frac = pos - i as f64;
                        if i + 1 < len {
                            x[i] + frac * (x[i + 1] - x[i])
                        } else {
                            x[i]
                        }
                    })
                    .collect()
            })
            .collect()
    };
    rec.with_channels(&series, target_hz, rec.channel_names.clone())
}

/// Cycle the existing channels in order until `target` channels exist.
/// Copies are named `<name>#<k>` for the k-th reuse.
pub fn align_channels(rec: &Recording, target: usize) -> Result<Recording> {
    let m = rec.channels();
    if m > target {
        return Err(Error::Param(format!(
            "recording {} has {m} channels, more than the target {target}",
            rec.id
        )));
    }
    if m == target {
        return Ok(rec.clone());
    }
    let series: Vec<Vec<f64>> = (0..target).map(|c| rec.channel(c % m)).collect();
    let names = (0..target)
        .map(|c| {
            let base = &rec.channel_names[c % m];
            match c / m {
                0 => base.clone(),
                k => format!("{base}#{k}"),
            }
        })
        .collect();
    rec.with_channels(&series, rec.rate_hz, names)
}
