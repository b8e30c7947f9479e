//! Central finite-difference gradient checking in `f64`.
//!
//! The check only ever calls the forward closure, so it stays independent of
//! the backward rules it validates.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare backward against central differences of `f` with step `h`.
///
/// `f` receives a fresh tape and leaf handles for `inputs` (all requiring
/// gradients) and must return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        rel_errors: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = input.data()[j];
            work[i].data_mut()[j] = base + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = base - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = base;
            *slot = (plus - minus) / (2.0 * h);
        }
        let numeric = Tensor::new(input.shape().to_vec(), numeric)?;
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.data())
            .fold(1e-8f64, |m, v| m.max(v.abs()));
        report.rel_errors.push(analytic.max_abs_diff(&numeric)? / scale);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
