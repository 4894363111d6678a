use super::tape::Gates;
use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks every coordinate of `input`. See [`grad_check_coords`].
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let all: Vec<usize> = (0..input.numel()).collect();
    grad_check_coords(f, input, eps, &all)
}

/// Compares the tape gradient of the scalar function `f` at `input` with the
/// fourth-order central difference
/// `(f(x − 2h) − 8f(x − h) + 8f(x + h) − f(x + 2h)) / 12h`, `h = eps·e_j`, on
/// the listed coordinates.
///
/// The shifted evaluations reuse the ReLU active sets of the evaluation at
/// `x`, so the quotient differentiates the linear piece the tape gradient
/// belongs to even when `eps` reaches across a kink.
pub fn grad_check_coords<F>(
    f: F,
    input: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::with_gates(Gates::Record(Vec::new()));
    let x = tape.leaf(input.clone());
    let loss = f(x)?;
    tape.backward(loss)?;
    let gates = tape.take_gates();
    let analytic = x
        .grad()
        .ok_or_else(|| Error::Contract("function does not depend on its input".into()))?;

    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::with_gates(Gates::Replay { masks: gates.clone(), next: 0, broken: false });
        let v = tape.constant(point);
        let y = f(v)?.value().item() as f64;
        if tape.replay_broken() {
            return Err(Error::Contract("function takes a different path away from the input".into()));
        }
        Ok(y)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &j in coords {
        if j >= input.numel() {
            return Err(Error::Contract(format!("coordinate {j} out of range")));
        }
        let at = |k: f64| -> Result<(f64, f64)> {
            let mut p = input.clone();
            p.data_mut()[j] += (k * eps) as Real;
            let x = p.data()[j] as f64;
            Ok((x, eval(p)?))
        };
        let (x2m, f2m) = at(-2.0)?;
        let (x1m, f1m) = at(-1.0)?;
        let (x1p, f1p) = at(1.0)?;
        let (x2p, f2p) = at(2.0)?;
        // Use the actually representable steps so rounding of x ± k·eps does
        // not bias the quotient.
        let h = ((x1p - x1m) / 2.0 + (x2p - x2m) / 4.0) / 2.0;
        let numeric = (f2m - 8.0 * f1m + 8.0 * f1p - f2p) / (12.0 * h);
        let a = analytic.data()[j] as f64;
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = j;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
