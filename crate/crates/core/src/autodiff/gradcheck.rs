//! Central finite-difference gradient checking.
//!
//! The numeric side only re-runs forward passes with perturbed leaf values, so
//! it shares no code with the reverse pass it checks.

use super::{AutodiffError, Tape, Tensor, Var};

/// Perturbation used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error of tiny gradient entries.
pub const REL_FLOOR: f64 = 1e-4;

/// Elementwise `|a - n| / max(|a|, |n|, REL_FLOOR)`, maximized.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of the scalar `f` with respect to every element of
/// every input.
pub fn central_differences<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Vec<f64>>, AutodiffError>
where
    F: FnMut(&[Tensor]) -> Result<f64, AutodiffError>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grads = vec![0.0; inputs[t].numel()];
        for (i, g) in grads.iter_mut().enumerate() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Builds `build(tape, leaves)` once for the reverse pass and repeatedly for
/// finite differences; returns the max relative error across all inputs.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let root = build(&mut tape, &vars)?;
        Ok((tape, vars, root))
    };
    let (tape, vars, root) = run(inputs)?;
    let mut grads = tape.backward(root)?;
    let numeric = central_differences(inputs, FD_STEP, |values| {
        let (tape, _, root) = run(values)?;
        Ok(tape.value(root).item())
    })?;
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        let analytic = grads.take(*v).expect("leaf gradient");
        worst = worst.max(max_relative_error(analytic.data(), n));
    }
    Ok(worst)
}
