//! Corpus to windows: resample, align channels, slide 50%-overlapping
//! windows, stratified split and train-only normalization; then a container
//! round trip.

use std::collections::BTreeMap;

use mvts::dataprep::{load_windows, preprocess, save_windows, synth_generate, PreprocessConfig, Split, SynthSpec};

fn main() -> mvts::Result<()> {
    let recs = synth_generate(&SynthSpec {
        n_normal: 30,
        n_anomalous: 10,
        segment_len: 512,
        channels: 3,
        rate_hz: 256.0,
        seed: 1,
    })?;
    let cfg = PreprocessConfig::new(64, 1);
    let ws = preprocess(&recs, &cfg)?;
    println!("{} windows of {}x{}", ws.len(), ws.window_len(), ws.channels());
    for split in Split::ALL {
        let c = ws.counts(split);
        println!("  {:<5} normal {:>4}  anomalous {:>4}", split.name(), c.normal, c.anomalous);
    }
    println!("normalization {:?}", ws.stats);

    let path = std::env::temp_dir().join("mvts-example.windows");
    let manifest = save_windows(&ws, &path, &BTreeMap::new())?;
    let back = load_windows(&path)?;
    assert_eq!(back.windows, ws.windows);
    println!("container {} ({} bytes hashed to {})", path.display(), std::fs::metadata(&path)?.len(), manifest.data_sha256);
    Ok(())
}
