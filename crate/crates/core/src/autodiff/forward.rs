use super::dual::Dual;
use crate::error::{Error, Result};

/// Evaluates `program` at `z` seeded with unit tangent and returns the value
/// together with its exact derivative in `z`.
///
/// The program may run reverse-mode tapes internally; over [`Dual`] those
/// produce gradients that carry their own `z`-derivative, so a program that
/// takes an optimizer step on such a gradient and then evaluates a loss is
/// differentiated forward-over-reverse.
pub fn directional_derivative<F>(program: F, z: f64) -> Result<(f64, f64)>
where
    F: FnOnce(Dual) -> Result<Dual>,
{
    let out = program(Dual::variable(z))?;
    if !(out.re.is_finite() && out.eps.is_finite()) {
        return Err(Error::Numerical(format!(
            "program returned non-finite ({}, {})",
            out.re, out.eps
        )));
    }
    Ok((out.re, out.eps))
}
