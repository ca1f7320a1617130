//! Reverse-mode differentiation on a small graph, checked against finite
//! differences.

use mvts::numerics::{gradient_check, Graph, Tensor};

fn main() -> mvts::Result<()> {
    let w = Tensor::from_fn([3, 2], |i| 0.1 * i as f64 - 0.2);
    let x = Tensor::from_fn([4, 3], |i| (i as f64).sin());

    let mut g = Graph::new();
    let wv = g.param(w.clone());
    let xv = g.constant(x.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.gelu(h);
    let p = g.softmax_rows(h)?;
    let sq = g.mul(p, p)?;
    let loss = g.sum(sq);
    let grads = g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).item());
    println!("dloss/dw = {:?}", grads.get(wv).map(|t| t.data().to_vec()));

    let report = gradient_check(
        &[("w".to_string(), w)],
        |g, vars| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, vars[0])?;
            let h = g.gelu(h);
            let sq = g.mul(h, h)?;
            Ok(g.sum(sq))
        },
        1e-6,
    )?;
    println!("finite-difference agreement: {:.2e}", report.entries[0].max_rel_error);
    Ok(())
}
