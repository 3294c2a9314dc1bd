//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::optim::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
///
/// `f` builds the graph on a fresh tape from leaf vars and returns the root.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, floor));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`check`], but also differentiates every trainable parameter in
/// `store`. `f` reads parameters through the store it is handed, so each
/// perturbed evaluation sees a modified copy.
pub fn check_with_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>, vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, s, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let root = f(&mut tape, store, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut record = |a: f64, numeric: f64| {
        report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, floor));
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.checked += 1;
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(store, &work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(store, &work)?;
            work[k].data_mut()[i] = x0;
            record(analytic.data()[i], (up - down) / (2.0 * h));
        }
    }

    let mut perturbed = store.clone();
    for id in store.ids().filter(|&id| !store.is_frozen(id)) {
        let analytic = grads
            .param(id)
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        for i in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[i];
            perturbed.get_mut(id).data_mut()[i] = x0 + h;
            let up = eval(&perturbed, inputs)?;
            perturbed.get_mut(id).data_mut()[i] = x0 - h;
            let down = eval(&perturbed, inputs)?;
            perturbed.get_mut(id).data_mut()[i] = x0;
            record(analytic.data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
