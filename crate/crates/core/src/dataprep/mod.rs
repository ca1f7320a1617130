//! Turning raw recordings into normalized, split windows.
//!
//! The pipeline order is fixed: discover the common rate, bandpass each
//! recording at its native rate, resample, align channel counts, cut
//! windows, split, and normalize with statistics from the training split.

mod filter;
mod recording;
mod resample;
mod synth;
mod windows;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use filter::{butterworth_bandpass, filter_series, Biquad, FilterSpec};
pub use recording::{export, ingest, read_recording, write_recording, Recording, RecordingMeta};
pub use resample::{align_channels, resample};
pub use synth::{corpus_hash, synth_generate, SynthSpec, BACKGROUND_BAND_HZ, NOISE_STD, SPIKE_WAVE_BAND_HZ};
pub(crate) use windows::Reader;
pub use windows::{
    decode_windows, encode_windows, extract_windows, load_windows, manifest_path, save_windows, stratified_split,
    ClassCounts, NormScope, NormStats, Provenance, RawWindow, Split, SplitRatios, WindowSet, WindowSpec,
    WindowsManifest, STD_FLOOR, WINDOWS_VERSION,
};

use crate::error::{Error, Result};

/// Every knob of [`preprocess`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub window: WindowSpec,
    /// Common sampling rate; the lowest rate in the corpus when unset.
    pub target_hz: Option<f64>,
    /// Bandpass applied before resampling; skipped when unset.
    pub filter: Option<FilterSpec>,
    /// Channel count after alignment; the largest count in the corpus when unset.
    pub channels: Option<usize>,
    pub ratios: SplitRatios,
    /// Keep anomalous windows out of the training split.
    pub unsupervised: bool,
    pub norm_scope: NormScope,
    pub seed: u64,
}

impl PreprocessConfig {
    pub fn new(window_len: usize, seed: u64) -> Self {
        PreprocessConfig {
            window: WindowSpec::new(window_len),
            target_hz: None,
            filter: Some(FilterSpec::default()),
            channels: None,
            ratios: SplitRatios::default(),
            unsupervised: true,
            norm_scope: NormScope::TrainOnly,
            seed,
        }
    }
}

/// Per-recording half of the pipeline: bandpass, resample, align, window.
pub fn prepare_recording(rec: &Recording, target_hz: f64, channels: usize, cfg: &PreprocessConfig) -> Result<Vec<RawWindow>> {
    let filtered = match &cfg.filter {
        Some(spec) => butterworth_bandpass(rec, spec)?,
        None => rec.clone(),
    };
    let resampled = resample(&filtered, target_hz)?;
    let aligned = align_channels(&resampled, channels)?;
    extract_windows(&aligned, &cfg.window)
}

/// Full pipeline over a corpus.
pub fn preprocess(recordings: &[Recording], cfg: &PreprocessConfig) -> Result<WindowSet> {
    if recordings.is_empty() {
        return Err(Error::Param("no recordings to preprocess".into()));
    }
    let min_rate = recordings.iter().map(|r| r.rate_hz).fold(f64::INFINITY, f64::min);
    let target_hz = cfg.target_hz.unwrap_or(min_rate);
    let channels = cfg
        .channels
        .unwrap_or_else(|| recordings.iter().map(Recording::channels).max().unwrap_or(1));
    let per_recording: Vec<Vec<RawWindow>> = recordings
        .par_iter()
        .map(|r| prepare_recording(r, target_hz, channels, cfg))
        .collect::<Result<_>>()?;
    let items: Vec<(String, RawWindow)> = recordings
        .iter()
        .zip(per_recording)
        .flat_map(|(r, ws)| ws.into_iter().map(move |w| (r.id.clone(), w)))
        .collect();
    if items.is_empty() {
        return Err(Error::Param(format!(
            "no recording is at least {} samples long",
            cfg.window.len
        )));
    }
    let mut ws = WindowSet::from_raw(cfg.window.len, channels, items)?;
    ws.splits = stratified_split(&ws.labels, cfg.ratios, cfg.seed, cfg.unsupervised)?;
    ws.normalize(cfg.norm_scope)?;
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_counts_survive_the_pipeline() {
        let spec = SynthSpec {
            n_normal: 30,
            n_anomalous: 10,
            segment_len: 64,
            channels: 2,
            rate_hz: 64.0,
            seed: 5,
        };
        let recs = synth_generate(&spec).unwrap();
        let mut cfg = PreprocessConfig::new(64, 1);
        cfg.filter = None;
        let ws = preprocess(&recs, &cfg).unwrap();
        assert_eq!(ws.len(), 40);
        assert_eq!(ws.labels.iter().filter(|&&l| l).count(), 10);
        let train = ws.counts(Split::Train);
        assert_eq!((train.normal, train.anomalous), (18, 0));
        let stats = ws.stats.as_ref().unwrap();
        assert_eq!(stats.scope, NormScope::TrainOnly);
    }

    #[test]
    fn filtered_pipeline_with_mixed_rates_and_channels() {
        let mk = |id: &str, rate: f64, m: usize, len: usize| {
            let s = (0..len * m).map(|i| ((i / m) as f64 * 0.2).sin() + (i % m) as f64).collect();
            Recording::unnamed(id, s, m, rate, vec![]).unwrap()
        };
        let recs = vec![mk("a", 256.0, 2, 2048), mk("b", 128.0, 3, 1024)];
        let cfg = PreprocessConfig::new(128, 2);
        let ws = preprocess(&recs, &cfg).unwrap();
        assert_eq!((ws.window_len(), ws.channels()), (128, 3));
        // Both recordings are 8 s at 128 Hz → 15 windows each.
        assert_eq!(ws.len(), 30);
        let coarser = PreprocessConfig {
            target_hz: Some(64.0),
            ..cfg
        };
        assert!(preprocess(&recs, &coarser).is_ok());
    }
}
