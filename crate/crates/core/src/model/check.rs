use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BoundParams, ModelConfig, ModelParams};
use crate::error::Result;
use crate::numerics::{measure_gradients, GradCheckReport, Tensor, Var};

/// Finite-difference check of the masked reconstruction loss with respect to
/// every trainable tensor, in 64-bit arithmetic on a random batch with a
/// random mask (about 40% of cells masked). Judge the result with
/// [`GradCheckReport::ensure`].
pub fn check_model_gradients(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<GradCheckReport> {
    let params = ModelParams::<f64>::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([batch, cfg.window_len, cfg.channels], |_| rng.random_range(-2.0..2.0f64));
    let mut mask: Vec<bool> = (0..x.len()).map(|_| rng.random_bool(0.4)).collect();
    mask[0] = true;
    let mask = Rc::new(mask);
    let masked = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(mask.iter()).map(|(&v, &m)| if m { 0.0 } else { v }).collect(),
    )?;
    measure_gradients(
        &params.trainable(),
        |g, vars: &[Var]| {
            let bound = BoundParams::from_vars(vars, cfg.heads, cfg.layers)?;
            let xv = g.constant(masked.clone());
            // Same dropout draws on every evaluation.
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let out = params.forward_graph(g, &bound, xv, true, &mut drop_rng)?;
            g.masked_mse(out.recon, &x, mask.clone())
        },
    )
}
