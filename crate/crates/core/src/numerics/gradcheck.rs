//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::par;

/// Agreement between analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max |analytic − numeric| / (|numeric| + 1e-8)`
    pub max_rel_err: Real,
    pub worst_index: usize,
}

/// Relative error used by every gradient check in the crate.
pub fn rel_err(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    Central,
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`; truncation error
    /// `O(h⁴)` allows a larger step and so less rounding noise. Where the
    /// inner central difference disagrees with it, the stencil straddles a
    /// non-smooth point and the step is shrunk (down to `h/64`).
    FivePoint,
}

impl Stencil {
    fn taps(self) -> &'static [(Real, Real)] {
        match self {
            Self::Central => &[(1.0, 0.5), (-1.0, -0.5)],
            Self::FivePoint => &[
                (-2.0, 1.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (2.0, -1.0 / 12.0),
            ],
        }
    }
}

/// Compares the gradients of the scalar `f(inputs)` against central
/// differences with the given step, one report per input.
pub fn check<F>(inputs: &[Tensor], step: Real, f: F) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    check_with(inputs, step, Stencil::Central, f)
}

/// [`check`] with a chosen stencil.
pub fn check_with<F>(inputs: &[Tensor], step: Real, stencil: Stencil, f: F) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = par::map_indexed(inputs[k].len(), |e| {
            let mut probe = inputs.to_vec();
            let orig = inputs[k].data()[e];
            let mut h = step;
            loop {
                let mut at = |offset: Real| -> Result<Real> {
                    probe[k].data_mut()[e] = orig + offset * h;
                    eval(&probe, &f)
                };
                let values = stencil
                    .taps()
                    .iter()
                    .map(|&(offset, _)| at(offset))
                    .collect::<Result<Vec<Real>>>()?;
                let estimate = |taps: &[(Real, Real)]| -> Real {
                    taps.iter().zip(&values).map(|((_, w), v)| w * v).sum::<Real>() / h
                };
                let value = estimate(stencil.taps());
                if stencil == Stencil::Central {
                    return Ok(value);
                }
                // A ReLU kink inside the stencil shows up as disagreement
                // between the inner central difference and the full estimate.
                let inner = (values[2] - values[1]) / (2.0 * h);
                if (inner - value).abs() <= 1e-3 * (value.abs() + 1e-8) || h <= step / 64.0 {
                    return Ok(value);
                }
                h /= 4.0;
            }
        })
        .into_iter()
        .collect::<Result<Vec<Real>>>()?;
        let numeric = Tensor::new(inputs[k].shape(), numeric)?;
        let (worst_index, max_rel_err) = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| rel_err(*a, *n))
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        reports.push(InputReport {
            analytic,
            numeric,
            max_rel_err,
            worst_index,
        });
    }
    Ok(reports)
}
