//! Central finite-difference checks for graph-built scalar functions.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error between autodiff and central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compare the tape gradient of `f` against central differences with step
/// `h` for every entry of every input. Relative error uses
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
