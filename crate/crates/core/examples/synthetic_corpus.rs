//! Generate a small synthetic EEG-like corpus and write it as a dataset
//! directory (CSV plus `.meta.json` sidecars).

use mvts::dataprep::{corpus_hash, export, ingest, synth_generate, SynthSpec};

fn main() -> mvts::Result<()> {
    let spec = SynthSpec {
        n_normal: 8,
        n_anomalous: 2,
        segment_len: 512,
        channels: 4,
        rate_hz: 256.0,
        seed: 7,
    };
    let recs = synth_generate(&spec)?;
    for r in &recs {
        let rms = (r.samples().iter().map(|v| v * v).sum::<f64>() / r.samples().len() as f64).sqrt();
        println!("{:<16} {:>5} samples  rms {:.3}  anomalies {:?}", r.id, r.len(), rms, r.anomaly_intervals);
    }
    let dir = std::env::temp_dir().join("mvts-synthetic-corpus");
    export(&dir, &recs)?;
    let back = ingest(&dir)?;
    println!("wrote {} and read back {} recordings", dir.display(), back.len());
    println!("corpus sha256 {}", corpus_hash(&recs));
    Ok(())
}
