//! Finite-difference check of every parameter gradient of the masked loss
//! on the one-layer configuration, in 64-bit arithmetic.

use mvts::model::{check_model_gradients, ModelConfig};

fn main() -> mvts::Result<()> {
    let report = check_model_gradients(&ModelConfig::tiny(), 2, 0)?;
    for e in &report.entries {
        println!("{:<28} rel {:.2e}  abs {:.2e}", e.name, e.max_rel_error, e.max_abs_error);
    }
    report.ensure(1e-4)?;
    println!("ok");
    Ok(())
}
