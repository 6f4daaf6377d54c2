//! Central finite-difference gradient checker.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Result, StepError};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms; central differences cannot resolve them any better.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CoordFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(StepError::invalid("gradient check needs a scalar function"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(StepError::Numerical(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Compares the tape's gradients of `f` against central differences with
/// the given `step` at every coordinate of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(StepError::invalid("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(StepError::Numerical("function value is not finite".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut probe = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut failures = Vec::new();
    let mut coordinates = 0;
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..inputs[input].numel() {
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + step;
            let plus = eval(&f, &probe)?;
            probe[input].data_mut()[index] = orig - step;
            let minus = eval(&f, &probe)?;
            probe[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[index];
            let rel_err = relative_error(a, numeric);
            max_rel_err = max_rel_err.max(rel_err);
            coordinates += 1;
            if rel_err >= tolerance {
                failures.push(CoordFailure {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        coordinates,
        failures,
    })
}
