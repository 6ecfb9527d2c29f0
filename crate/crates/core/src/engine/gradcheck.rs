//! Central finite-difference verification of analytic gradients.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Evaluate `f` on a fresh tape with `x` as its only gradient-carrying leaf.
fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let out = f(&mut tape, xv)?;
    Ok(tape.value(out).item())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Elementwise `|a - n| / max(|a|, |n|, 1e-8)`, maximised over all entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compare the tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);
    let numeric = numeric_gradient(&f, x, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
