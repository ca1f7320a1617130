//! Attention matrices of an untrained model for one window, printed as
//! coarse text heatmaps.

use mvts::model::{ModelConfig, ModelParams};
use mvts::numerics::Tensor;

fn main() -> mvts::Result<()> {
    let cfg = ModelConfig { layers: 2, heads: 2, ..ModelConfig::new(16, 3) };
    let params = ModelParams::<f32>::init(&cfg)?;
    let x = Tensor::from_fn([1, 16, 3], |i| ((i / 3) as f32 * 0.7).sin() * (1 + i % 3) as f32);
    let out = params.forward(&x, true)?;
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for (layer, a) in out.attentions.iter().enumerate() {
        for h in 0..cfg.heads {
            println!("layer {layer} head {h}");
            let block = &a.data()[h * 256..(h + 1) * 256];
            let max = block.iter().copied().fold(0.0f32, f32::max);
            for row in block.chunks(16) {
                let line: String = row.iter().map(|&v| shades[((v / max) * 9.0).round() as usize]).collect();
                println!("  |{line}|  row sum {:.6}", row.iter().sum::<f32>());
            }
        }
    }
    Ok(())
}
