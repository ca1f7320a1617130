use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A continuous multichannel signal with labeled anomaly intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    /// Row-major `len × channels`.
    samples: Vec<f64>,
    channels: usize,
    pub rate_hz: f64,
    pub channel_names: Vec<String>,
    /// `(start_s, end_s)` pairs.
    pub anomaly_intervals: Vec<(f64, f64)>,
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        samples: Vec<f64>,
        channels: usize,
        rate_hz: f64,
        channel_names: Vec<String>,
        anomaly_intervals: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let id = id.into();
        if channels == 0 || samples.len() % channels != 0 {
            return Err(Error::Param(format!(
                "recording {id}: {} samples do not fill {channels} channels",
                samples.len()
            )));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::Param(format!("recording {id}: sampling rate {rate_hz} must be positive")));
        }
        if channel_names.len() != channels {
            return Err(Error::Param(format!(
                "recording {id}: {} channel names for {channels} channels",
                channel_names.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Param(format!(
                "recording {id}: non-finite sample at row {} column {}",
                i / channels,
                i % channels
            )));
        }
        let duration = (samples.len() / channels) as f64 / rate_hz;
        for &(s, e) in &anomaly_intervals {
            if !(s < e) || s < 0.0 || e > duration + 1e-9 {
                return Err(Error::Param(format!(
                    "recording {id}: interval ({s}, {e}) invalid for duration {duration} s"
                )));
            }
        }
        Ok(Recording {
            id,
            samples,
            channels,
            rate_hz,
            channel_names,
            anomaly_intervals,
        })
    }

    /// Recording with generated channel names `ch0, ch1, …`.
    pub fn unnamed(
        id: impl Into<String>,
        samples: Vec<f64>,
        channels: usize,
        rate_hz: f64,
        anomaly_intervals: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let names = (0..channels).map(|c| format!("ch{c}")).collect();
        Self::new(id, samples, channels, rate_hz, names, anomaly_intervals)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.rate_hz
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, t: usize, c: usize) -> f64 {
        self.samples[t * self.channels + c]
    }

    /// One channel as a contiguous series.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Rebuild from per-channel series of equal length, keeping metadata.
    pub(crate) fn with_channels(&self, series: &[Vec<f64>], rate_hz: f64, names: Vec<String>) -> Result<Self> {
        let len = series.first().map_or(0, Vec::len);
        let m = series.len();
        let mut samples = vec![0.0; len * m];
        for (c, s) in series.iter().enumerate() {
            for (t, &v) in s.iter().enumerate() {
                samples[t * m + c] = v;
            }
        }
        let duration = len as f64 / rate_hz;
        let intervals = self
            .anomaly_intervals
            .iter()
            .map(|&(s, e)| (s.min(duration), e.min(duration)))
            .filter(|(s, e)| s < e)
            .collect();
        Recording::new(self.id.clone(), samples, m, rate_hz, names, intervals)
    }
}

/// Sidecar metadata stored next to each CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingMeta {
    pub sampling_rate_hz: f64,
    #[serde(default)]
    pub anomaly_intervals: Vec<(f64, f64)>,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Read one `<name>.csv` plus `<name>.meta.json`.
pub fn read_recording(csv_path: &Path) -> Result<Recording> {
    let meta_path = sidecar_path(csv_path);
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::input(&meta_path, format!("cannot read sidecar: {e}")))?;
    let meta: RecordingMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::input(&meta_path, format!("malformed sidecar: {e}")))?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::input(csv_path, e.to_string()))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::input(csv_path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(Error::input(csv_path, "missing header row"));
    }
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::input(csv_path, format!("row {}: {e}", row + 1)))?;
        if record.len() != names.len() {
            return Err(Error::input(
                csv_path,
                format!("row {}: {} columns, header has {}", row + 1, record.len(), names.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::input(csv_path, format!("row {} column {}: non-numeric cell `{cell}`", row + 1, names[col]))
            })?;
            if !v.is_finite() {
                return Err(Error::input(
                    csv_path,
                    format!("row {} column {}: non-finite value", row + 1, names[col]),
                ));
            }
            samples.push(v);
        }
    }
    let id = csv_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("recording")
        .to_string();
    let channels = names.len();
    Recording::new(id, samples, channels, meta.sampling_rate_hz, names, meta.anomaly_intervals)
        .map_err(|e| match e {
            Error::Param(msg) => Error::input(csv_path, msg),
            other => other,
        })
}

/// Every `*.csv` in `dir` (sorted by file name), with its sidecar.
pub fn ingest(dir: &Path) -> Result<Vec<Recording>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::input(dir, format!("cannot list directory: {e}")))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::input(dir, e.to_string()))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::input(dir, "no CSV recordings found"));
    }
    paths.iter().map(|p| read_recording(p)).collect()
}

/// Write `<id>.csv` and `<id>.meta.json`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_recording(dir: &Path, rec: &Recording) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", rec.id));
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::input(&csv_path, e.to_string()))?;
    let io = |e: csv::Error| Error::input(&csv_path, e.to_string());
    writer.write_record(&rec.channel_names).map_err(io)?;
    for row in rec.samples.chunks(rec.channels) {
        writer.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    writer.flush()?;
    let meta = RecordingMeta {
        sampling_rate_hz: rec.rate_hz,
        anomaly_intervals: rec.anomaly_intervals.clone(),
    };
    fs::write(sidecar_path(&csv_path), serde_json::to_string_pretty(&meta)?)?;
    Ok(csv_path)
}

pub fn export(dir: &Path, recordings: &[Recording]) -> Result<()> {
    for rec in recordings {
        write_recording(dir, rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, csv: &str, meta: &str) -> PathBuf {
        let p = dir.join(format!("{name}.csv"));
        fs::write(&p, csv).unwrap();
        fs::write(dir.join(format!("{name}.meta.json")), meta).unwrap();
        p
    }

    #[test]
    fn reads_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a",
            "c3,c4\n1,2\n3,4\n5,6\n7,8\n",
            r#"{"sampling_rate_hz": 2.0, "anomaly_intervals": [[0.5, 1.0]]}"#,
        );
        let rec = read_recording(&p).unwrap();
        assert_eq!((rec.len(), rec.channels()), (4, 2));
        assert_eq!(rec.channel_names, ["c3", "c4"]);
        assert_eq!(rec.channel(1), [2.0, 4.0, 6.0, 8.0]);
        assert_eq!(rec.anomaly_intervals, [(0.5, 1.0)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let ok_meta = r#"{"sampling_rate_hz": 2.0}"#;
        let cases = [
            ("interval", "a\n1\n2\n", r#"{"sampling_rate_hz": 2.0, "anomaly_intervals": [[1.0, 0.5]]}"#, "interval"),
            ("rate", "a\n1\n", r#"{"sampling_rate_hz": 0.0}"#, "rate"),
            ("nan", "a,b\n1,2\n3,NaN\n", ok_meta, "row 2 column b"),
            ("text", "a,b\n1,x\n", ok_meta, "row 1 column b"),
        ];
        for (name, csv, meta, needle) in cases {
            let p = write(dir.path(), name, csv, meta);
            let err = read_recording(&p).unwrap_err();
            assert!(err.to_string().contains(needle), "{name}: {err}");
            assert_eq!(err.category().exit_code(), 2);
        }
        let p = dir.path().join("lonely.csv");
        fs::write(&p, "a\n1\n").unwrap();
        let err = read_recording(&p).unwrap_err();
        assert!(err.to_string().contains("lonely.meta.json"), "{err}");
    }

    #[test]
    fn export_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() / 3.0 + 1e-9 * i as f64).collect();
        let a = Recording::unnamed("a", samples.clone(), 3, 128.0, vec![(0.01, 0.05)]).unwrap();
        let b = Recording::unnamed("b", samples, 2, 64.0, vec![]).unwrap();
        export(dir.path(), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(ingest(dir.path()).unwrap(), vec![a, b]);
    }
}
