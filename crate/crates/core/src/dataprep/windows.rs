use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Recording;
use crate::error::{Error, Result};
use crate::masking::mix_seed;
use crate::numerics::Tensor;

/// One fixed-length slice of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWindow {
    /// Row-major `T × M`.
    pub data: Vec<f32>,
    pub label: bool,
    pub start: usize,
}

/// Windowing parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub len: usize,
    /// Fraction of a window shared with its successor.
    pub overlap: f64,
    /// A window is anomalous when its overlap with an anomaly interval
    /// exceeds this fraction of its duration.
    pub label_fraction: f64,
}

impl WindowSpec {
    pub fn new(len: usize) -> Self {
        WindowSpec {
            len,
            overlap: 0.5,
            label_fraction: 0.5,
        }
    }

    pub fn stride(&self) -> Result<usize> {
        if self.len == 0 {
            return Err(Error::Param("window length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Param(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(0.0..1.0).contains(&self.label_fraction) {
            return Err(Error::Param(format!("label fraction {} outside [0, 1)", self.label_fraction)));
        }
        let stride = self.len as f64 * (1.0 - self.overlap);
        if (stride - stride.round()).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "overlap {} does not give an integer stride for window length {}",
                self.overlap, self.len
            )));
        }
        Ok(stride.round() as usize)
    }
}

/// Slide a window over `rec`. Starts at 0 and advances by the stride while
/// the window fits.
pub fn extract_windows(rec: &Recording, spec: &WindowSpec) -> Result<Vec<RawWindow>> {
    let stride = spec.stride()?;
    let t = spec.len;
    if rec.len() < t {
        log::warn!("recording {} has {} samples, shorter than window length {t}", rec.id, rec.len());
        return Ok(Vec::new());
    }
    let m = rec.channels();
    let duration = t as f64 / rec.rate_hz;
    let mut out = Vec::with_capacity((rec.len() - t) / stride + 1);
    let mut start = 0;
    while start + t <= rec.len() {
        let t0 = start as f64 / rec.rate_hz;
        let t1 = t0 + duration;
        let label = rec
            .anomaly_intervals
            .iter()
            .any(|&(s, e)| (t1.min(e) - t0.max(s)).max(0.0) > spec.label_fraction * duration);
        let data = rec.samples()[start * m..(start + t) * m].iter().map(|&v| v as f32).collect();
        out.push(RawWindow { data, label, start });
        start += stride;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Split> {
        Split::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown split `{s}`")))
    }
}

/// Which windows the normalization statistics come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    TrainOnly,
    AllWindows,
}

impl std::str::FromStr for NormScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "train_only" => Ok(NormScope::TrainOnly),
            "all_windows" => Ok(NormScope::AllWindows),
            _ => Err(Error::Param(format!("unknown normalization scope `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub scope: NormScope,
}

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub recording: String,
    pub start: usize,
}

/// `N` windows of shape `T × M` with labels, split assignment and
/// normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    /// `N × T × M`.
    pub windows: Tensor<f32>,
    pub labels: Vec<bool>,
    pub splits: Vec<Split>,
    pub stats: Option<NormStats>,
    pub provenance: Vec<Provenance>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub anomalous: usize,
}

impl WindowSet {
    pub fn new(windows: Tensor<f32>, labels: Vec<bool>, splits: Vec<Split>, provenance: Vec<Provenance>) -> Result<Self> {
        let s = windows.shape();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "window_set",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        let n = s[0];
        if labels.len() != n || splits.len() != n || provenance.len() != n {
            return Err(Error::Param(format!(
                "{n} windows but {} labels, {} split codes, {} provenance records",
                labels.len(),
                splits.len(),
                provenance.len()
            )));
        }
        Ok(WindowSet {
            windows,
            labels,
            splits,
            stats: None,
            provenance,
        })
    }

    /// Windows from several recordings, all assigned to the training split
    /// until [`stratified_split`] runs.
    pub fn from_raw(window_len: usize, channels: usize, items: Vec<(String, RawWindow)>) -> Result<Self> {
        let n = items.len();
        let mut data = Vec::with_capacity(n * window_len * channels);
        let mut labels = Vec::with_capacity(n);
        let mut provenance = Vec::with_capacity(n);
        for (rec, w) in items {
            if w.data.len() != window_len * channels {
                return Err(Error::Shape {
                    op: "window_set",
                    lhs: vec![window_len, channels],
                    rhs: vec![w.data.len()],
                });
            }
            data.extend_from_slice(&w.data);
            labels.push(w.label);
            provenance.push(Provenance {
                recording: rec,
                start: w.start,
            });
        }
        let windows = Tensor::new(vec![n, window_len, channels], data)?;
        WindowSet::new(windows, labels, vec![Split::Train; n], provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let size = self.window_len() * self.channels();
        &self.windows.data()[i * size..(i + 1) * size]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Stack the given windows into a `k × T × M` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.window_len() * self.channels());
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Tensor::new(vec![indices.len(), self.window_len(), self.channels()], data).expect("consistent window size")
    }

    pub fn counts(&self, split: Split) -> ClassCounts {
        let mut c = ClassCounts::default();
        for i in self.indices(split) {
            if self.labels[i] {
                c.anomalous += 1;
            } else {
                c.normal += 1;
            }
        }
        c
    }

    /// Standardize every window with one scalar mean and standard deviation
    /// computed over the chosen scope.
    pub fn normalize(&mut self, scope: NormScope) -> Result<NormStats> {
        let source: Vec<usize> = match scope {
            NormScope::TrainOnly => self.indices(Split::Train),
            NormScope::AllWindows => (0..self.len()).collect(),
        };
        if source.is_empty() {
            return Err(Error::Param("normalization source split is empty".into()));
        }
        let (mut sum, mut count) = (0.0f64, 0usize);
        for &i in &source {
            sum += self.window(i).iter().map(|&v| v as f64).sum::<f64>();
            count += self.window(i).len();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0f64;
        for &i in &source {
            sq += self.window(i).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        }
        let std = (sq / count as f64).sqrt().max(STD_FLOOR);
        for v in self.windows.data_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
        let stats = NormStats { mean, std, scope };
        self.stats = Some(stats.clone());
        Ok(stats)
    }
}

/// Fractions of each class assigned to train/val/test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("split ratios {parts:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

/// Shuffle each class separately and cut it by `ratios`. With
/// `unsupervised`, the training share of anomalous windows is moved to
/// validation and test in equal parts, so training stays normal-only.
pub fn stratified_split(labels: &[bool], ratios: SplitRatios, seed: u64, unsupervised: bool) -> Result<Vec<Split>> {
    ratios.validate()?;
    let mut out = vec![Split::Train; labels.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            log::warn!("class {} has only {n} windows; split is best effort", class as u8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e11, class as u64));
        idx.shuffle(&mut rng);
        let mut n_train = ((n as f64 * ratios.train).round() as usize).min(n);
        let mut n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
        if class && unsupervised {
            n_val += n_train / 2;
            n_train = 0;
        }
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

const WINDOWS_MAGIC: &[u8; 4] = b"MVTW";
pub const WINDOWS_VERSION: u16 = 1;

/// JSON companion of a windows container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowsManifest {
    pub n: usize,
    pub window_len: usize,
    pub channels: usize,
    pub stats: Option<NormStats>,
    pub counts: BTreeMap<String, ClassCounts>,
    pub provenance: Vec<Provenance>,
    pub config: BTreeMap<String, String>,
    pub data_sha256: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_windows(ws: &WindowSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 2 + 24 + 2 * ws.len() + 4 * ws.windows.len());
    buf.extend_from_slice(WINDOWS_MAGIC);
    buf.extend_from_slice(&WINDOWS_VERSION.to_le_bytes());
    for d in ws.windows.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    buf.extend(ws.labels.iter().map(|&l| l as u8));
    buf.extend(ws.splits.iter().map(|s| s.code()));
    for v in ws.windows.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.offset(), "size overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(0, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(magic).unwrap())));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.offset(), format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parse a windows container. Provenance and statistics live in the
/// manifest and are left empty here.
pub fn decode_windows(bytes: &[u8]) -> Result<WindowSet> {
    let mut r = Reader::new(bytes);
    r.magic(WINDOWS_MAGIC)?;
    let version = r.u16("version")?;
    if version != WINDOWS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (d, what) in dims.iter_mut().zip(["N", "T", "M"]) {
        let off = r.offset();
        *d = usize::try_from(r.u64(what)?).map_err(|_| Error::format(off, format!("{what} too large")))?;
    }
    let [n, t, m] = dims;
    let cells = n
        .checked_mul(t)
        .and_then(|x| x.checked_mul(m))
        .ok_or_else(|| Error::format(6, "dimension product overflows"))?;
    let label_off = r.offset();
    let labels = r
        .take(n, "labels")?
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::format(label_off + i as u64, format!("label byte {b} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let split_off = r.offset();
    let splits = r
        .take(n, "split codes")?
        .iter()
        .enumerate()
        .map(|(i, &b)| Split::from_code(b).ok_or_else(|| Error::format(split_off + i as u64, format!("bad split code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let data = r.f32s(cells, "window data")?;
    r.finish()?;
    let provenance = (0..n)
        .map(|i| Provenance {
            recording: String::new(),
            start: i,
        })
        .collect();
    WindowSet::new(Tensor::new(vec![n, t, m], data)?, labels, splits, provenance)
}

/// Write the container and its `<path>.json` manifest.
pub fn save_windows(ws: &WindowSet, path: &Path, config: &BTreeMap<String, String>) -> Result<WindowsManifest> {
    let bytes = encode_windows(ws);
    fs::write(path, &bytes)?;
    let manifest = WindowsManifest {
        n: ws.len(),
        window_len: ws.window_len(),
        channels: ws.channels(),
        stats: ws.stats.clone(),
        counts: Split::ALL.iter().map(|&s| (s.name().to_string(), ws.counts(s))).collect(),
        provenance: ws.provenance.clone(),
        config: config.clone(),
        data_sha256: crate::sha256_hex(&bytes),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Read a container; statistics and provenance are restored from the
/// manifest when it is present.
pub fn load_windows(path: &Path) -> Result<WindowSet> {
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    let mut ws = decode_windows(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::input(path, format!("format error at byte offset {offset}: {msg}")),
        other => other,
    })?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath)?;
        let manifest: WindowsManifest =
            serde_json::from_str(&text).map_err(|e| Error::input(&mpath, format!("malformed manifest: {e}")))?;
        if manifest.provenance.len() == ws.len() {
            ws.provenance = manifest.provenance;
        }
        ws.stats = manifest.stats;
    }
    Ok(ws)
}
