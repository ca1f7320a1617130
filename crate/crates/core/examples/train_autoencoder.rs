//! Train a small autoencoder on normal windows and save a checkpoint.

use mvts::dataprep::{preprocess, synth_generate, PreprocessConfig, SynthSpec};
use mvts::model::ModelConfig;
use mvts::training::{load_checkpoint, save_checkpoint, train, TrainConfig};

fn main() -> mvts::Result<()> {
    let recs = synth_generate(&SynthSpec {
        n_normal: 200,
        n_anomalous: 0,
        segment_len: 32,
        channels: 4,
        rate_hz: 64.0,
        seed: 3,
    })?;
    let mut pre = PreprocessConfig::new(32, 3);
    pre.filter = None;
    let ws = preprocess(&recs, &pre)?;

    let model = ModelConfig { d_model: 16, heads: 2, d_qk: 8, d_v: 8, layers: 2, ffn_width: 32, ..ModelConfig::new(32, 4) };
    let cfg = TrainConfig { max_epochs: 5, seed: 3, ..TrainConfig::default() };
    let (params, report) = train(&ws, &model, &cfg)?;
    for (e, (t, v)) in report.train_losses.iter().zip(&report.val_losses).enumerate() {
        println!("epoch {e}: train {t:.4}  val {v:.4}");
    }
    let path = std::env::temp_dir().join("mvts-example.ckpt");
    let bytes = save_checkpoint(&params, &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(back, params);
    println!("saved {} parameters ({} bytes) to {}", params.param_count(), bytes.len(), path.display());
    Ok(())
}
