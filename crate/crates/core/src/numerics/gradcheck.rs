//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used in 64-bit precision.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Fails with the name of the worst tensor if it exceeds `tolerance`.
    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        match self.worst() {
            Some(w) if !(w.max_rel_error <= tolerance) => Err(Error::GradCheck {
                tensor: w.name.clone(),
                error: w.max_rel_error,
                tolerance,
            }),
            _ => Ok(()),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the reverse-mode gradient of `f` against central differences for
/// every element of every parameter, without judging the result.
///
/// `f` receives a fresh graph and one [`Var`] per parameter (in order) and
/// must return a scalar; it must be deterministic.
pub fn measure_gradients<F>(params: &[(String, Tensor<f64>)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; tensor.len()]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            values[pi].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[pi].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic[i], numeric));
            max_abs = max_abs.max((analytic[i] - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { entries })
}

/// [`measure_gradients`], failing with the worst tensor's name when any
/// relative error exceeds `tolerance`.
pub fn gradient_check<F>(params: &[(String, Tensor<f64>)], f: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = measure_gradients(params, f)?;
    report.ensure(tolerance)?;
    Ok(report)
}
