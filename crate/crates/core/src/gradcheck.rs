//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::params::{Gradients, ParamSet};

/// Gradient magnitude added to the relative-error denominator. Below it,
/// central differences of an O(1) loss are dominated by roundoff.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Maximum over all parameter scalars of
/// `|analytic - central| / (|analytic| + |central| + MAGNITUDE_FLOOR)`.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, analytic: &Gradients, step: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        bail!(Contract, "finite-difference step must be positive, got {step}");
    }
    let base = f(params)?;
    if !base.is_finite() {
        bail!(Numeric, "loss is not finite at the probe point: {base}");
    }
    let mut worst: f64 = 0.0;
    for (name, tensor) in params.iter() {
        let Some(g) = analytic.get(name) else {
            bail!(Contract, "no analytic gradient for {name:?}");
        };
        for i in 0..tensor.numel() {
            let up = f(&params.perturbed(name, i, step))?;
            let down = f(&params.perturbed(name, i, -step))?;
            if !up.is_finite() || !down.is_finite() {
                bail!(Numeric, "loss is not finite near {name}[{i}]");
            }
            let numeric = (up - down) / (2.0 * step);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + MAGNITUDE_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Builds the scalar returned by `build` on a fresh tape, differentiates it,
/// and compares against central differences of the same builder.
pub fn gradient_check<B>(params: &ParamSet, step: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let l = build(&mut tape, p)?;
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let analytic = tape.grad(loss, params)?;
    finite_diff_check(eval, params, &analytic, step)
}
