//! Dense tensors, a reverse-mode autodiff tape, and gradient checking.

mod float;
pub mod gradcheck;
mod graph;
mod tensor;

pub use float::Float;
pub use gradcheck::{gradient_check, measure_gradients, GradCheckEntry, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, NormMode, Var};
pub use tensor::Tensor;

/// Variance epsilon used by batch normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum used by batch normalization.
pub const NORM_MOMENTUM: f64 = 0.1;

/// Exact GELU on a scalar.
pub fn gelu_scalar<T: Float>(x: T) -> T {
    graph::gelu(x)
}

/// Row-wise softmax of a plain tensor (no tape).
pub fn softmax_rows<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    if let Some(&cols) = t.shape().last() {
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                graph::softmax_in_place(row);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
