use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |analytic|)` over every checked element.
    pub max_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + eps·e) - f(x - eps·e)) / (2·eps)` for every element of
/// every input.
///
/// `f` receives a fresh tape and one leaf per input and must return a
/// 1-element node.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_error: f64 = 0.0;
    let mut checked = 0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !(err <= max_error) {
                max_error = if err.is_nan() { f64::INFINITY } else { err };
            }
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_error,
        tolerance,
        checked,
    })
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarRoot(t.shape().clone()));
    }
    Ok(t.data()[0])
}
