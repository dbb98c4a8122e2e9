use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One-sided slopes differing by more than this (relative) mark a kink.
const KINK_TOLERANCE: f64 = 1e-3;

/// Compares the tape gradient of `f` at `x` with central differences of step `eps`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. Coordinates where the forward
/// and backward one-sided slopes disagree are reported as [`Error::Kink`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(xv).expect("parameter gradient").data().to_vec();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("grad_check probe".into()))
        }
    };

    let f0 = eval(x.clone())?;
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let central = (fp - fm) / (2.0 * eps);
        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        if (forward - backward).abs() > KINK_TOLERANCE * central.abs().max(1.0) {
            return Err(Error::Kink(i));
        }
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
