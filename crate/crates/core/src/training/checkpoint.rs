use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataprep::Reader;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"MVTS";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serialize every tensor (including running norm statistics) as
/// `MVTS | version u16 | config length u32 | config JSON | count u32 |`
/// then per tensor `name length u32 | name | rank u32 | dims u64… | f32 LE…`.
pub fn encode_checkpoint(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&params.config)?;
    let tensors = params.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t, _) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config_off = r.offset();
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config block")?)
        .map_err(|e| Error::format(config_off, format!("malformed config block: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::format(config_off, format!("invalid config block: {e}")))?;
    let mut params = ModelParams::<f32>::init(&config)?;

    let count_off = r.offset();
    let count = r.u32("tensor count")? as usize;
    let mut arrays: HashMap<String, (u64, Tensor<f32>)> = HashMap::new();
    for _ in 0..count {
        let entry_off = r.offset();
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(entry_off + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(r.offset() - 4, format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let off = r.offset();
            let d = usize::try_from(r.u64("dimension")?).map_err(|_| Error::format(off, "dimension too large"))?;
            shape.push(d);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(r.offset(), "tensor size overflows"))?;
        let data = r.f32s(len, &format!("data of `{name}`"))?;
        let tensor = Tensor::new(shape, data)?;
        if arrays.insert(name.clone(), (entry_off, tensor)).is_some() {
            return Err(Error::format(entry_off, format!("duplicate tensor `{name}`")));
        }
    }
    r.finish()?;

    let expected = params.named_tensors().len();
    if count != expected {
        return Err(Error::format(count_off, format!("{count} tensors, config implies {expected}")));
    }
    for (name, slot, _) in params.named_tensors_mut() {
        let (off, t) = arrays
            .remove(&name)
            .ok_or_else(|| Error::format(count_off, format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::format(
                off,
                format!("tensor `{name}` has shape {:?}, config implies {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    if let Some((name, (off, _))) = arrays.into_iter().next() {
        return Err(Error::format(off, format!("unexpected tensor `{name}`")));
    }
    Ok(params)
}

/// Write the checkpoint and return its bytes (for hashing).
pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::input(path, format!("format error at byte offset {offset}: {msg}")),
        other => other,
    })
}

/// Load and require the stored architecture to equal `expected` (the
/// initialization seed is not compared).
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(path)?;
    let got = serde_json::to_value(&params.config)?;
    let want = serde_json::to_value(expected)?;
    let (got, want) = (got.as_object().unwrap(), want.as_object().unwrap());
    let diffs: Vec<String> = want
        .iter()
        .filter(|(k, v)| k.as_str() != "seed" && got.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: file has {}, expected {v}", got.get(k).cloned().unwrap_or_default()))
        .collect();
    if !diffs.is_empty() {
        return Err(Error::ConfigMismatch(format!("{}: {}", path.display(), diffs.join("; "))));
    }
    Ok(params)
}
