//! Geometric span masks next to Bernoulli masks at the same ratio.

use mvts::masking::{MaskSpec, MaskStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvts::Result<()> {
    for strategy in [MaskStrategy::Geometric, MaskStrategy::Bernoulli] {
        let spec = MaskSpec { strategy, ratio: 0.25, ..MaskSpec::default() };
        let mask = spec.generate(64, 3, &mut ChaCha8Rng::seed_from_u64(1))?;
        println!("{strategy}:");
        for m in 0..3 {
            let row: String = (0..64).map(|t| if mask.get(t, m) { '#' } else { '.' }).collect();
            println!("  {row}");
        }
        let st = mask.stats();
        println!(
            "  fraction {:.3}, mean masked run {:.2}, mean unmasked run {:.2}",
            st.fraction, st.mean_masked_run, st.mean_unmasked_run
        );
    }
    let spec = MaskSpec { ratio: 0.25, ..MaskSpec::default() };
    println!("geometric target unmasked run length: {:.2}", spec.unmasked_mean_len());
    Ok(())
}
