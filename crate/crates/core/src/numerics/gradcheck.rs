//! Central finite-difference gradient checks in 64-bit precision.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `value` around `x`.
///
/// `value` must be deterministic: it is evaluated twice at `x` first and an
/// error is returned if the results differ.
pub fn compare_gradients<F>(mut value: F, analytic: &Tensor<f64>, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let first = value(x)?;
    let second = value(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            lhs: analytic.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Maximum relative error between the tape gradient of a scalar function
/// and its central-difference estimate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    compare_gradients(
        |p| {
            let mut tape = Tape::inference();
            let xv = tape.constant(p.clone());
            let out = f(&mut tape, xv)?;
            Ok(tape.value(out).item())
        },
        &analytic,
        x,
        eps,
    )
}
