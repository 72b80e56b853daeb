use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("grad_check step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true))?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::new(point.shape().to_vec(), data)?)?;
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check function must be scalar".into()));
        }
        if !v[0].is_finite() {
            return Err(Error::Numeric { op: "grad_check" });
        }
        Ok(v[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
