//! Anomaly scores, G-mean threshold on the validation split and test metrics
//! with 95% intervals.

use mvts::benchmark::score_split;
use mvts::dataprep::{preprocess, synth_generate, PreprocessConfig, Split, SynthSpec};
use mvts::model::ModelConfig;
use mvts::scoring::{evaluate, ThresholdPolicy};
use mvts::training::{train, TrainConfig};

fn main() -> mvts::Result<()> {
    let recs = synth_generate(&SynthSpec {
        n_normal: 300,
        n_anomalous: 60,
        segment_len: 32,
        channels: 4,
        rate_hz: 64.0,
        seed: 5,
    })?;
    let mut pre = PreprocessConfig::new(32, 5);
    pre.filter = None;
    let ws = preprocess(&recs, &pre)?;
    let model = ModelConfig { d_model: 16, heads: 2, d_qk: 8, d_v: 8, layers: 1, ffn_width: 32, ..ModelConfig::new(32, 4) };
    let (params, _) = train(&ws, &model, &TrainConfig { max_epochs: 4, seed: 5, ..TrainConfig::default() })?;

    let test = score_split(&params, &ws, Split::Test)?;
    let val = score_split(&params, &ws, Split::Val)?;
    for policy in [ThresholdPolicy::Calibration, ThresholdPolicy::Test] {
        let r = evaluate(&test, &val, policy)?;
        println!("{policy:?} threshold {:.4}", r.threshold);
        println!("  AUC               {:.3} ± {:.3}", r.auc.value, r.auc.ci95);
        println!("  balanced accuracy {:.3} ± {:.3}", r.balanced_accuracy.value, r.balanced_accuracy.ci95);
        println!("  precision         {:.3} ± {:.3}", r.precision.value, r.precision.ci95);
        println!("  recall            {:.3} ± {:.3}", r.recall.value, r.recall.ci95);
    }
    Ok(())
}
