//! Synthetic end-to-end benchmark for one seed and masking strategy.
//!
//! `cargo run --release --example benchmark -- [geometric|bernoulli] [seed] [epochs]`

use mvts::benchmark::{run_benchmark, BenchmarkSpec};
use mvts::masking::{MaskSpec, MaskStrategy};

fn main() -> mvts::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy: MaskStrategy = args.next().as_deref().unwrap_or("geometric").parse()?;
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let mask = MaskSpec { strategy, ..MaskSpec::default() };
    let r = run_benchmark(&BenchmarkSpec::standard(mask, epochs, seed))?;
    println!("{strategy} seed {seed}: AUC {:.4} ± {:.4}", r.eval.auc.value, r.eval.auc.ci95);
    println!("balanced accuracy {:.4}, threshold {:.4}", r.eval.balanced_accuracy.value, r.eval.threshold);
    println!("validation losses {:?}", r.training.val_losses);
    println!("{:.0} s", r.wall_clock_s);
    Ok(())
}
