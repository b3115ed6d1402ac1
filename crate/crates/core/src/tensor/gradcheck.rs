use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep over every parameter coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares tape gradients against central differences
/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of every parameter.
///
/// `loss` records a fresh forward pass against the given parameters and
/// returns the tape with the scalar loss node. Parameter gradients are reset
/// before the analytic pass and left holding the analytic gradient.
pub fn finite_diff_check<F>(
    params: &mut ParamStore<f64>,
    h: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Usage(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    params.zero_grads();
    {
        let (tape, out) = loss(params)?;
        if !tape.value(out).item().is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        tape.backward(out, params)?;
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for i in 0..params.value(id).numel() {
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + h;
            let plus = evaluate(&mut loss, params)?;
            params.value_mut(id).data_mut()[i] = original - h;
            let minus = evaluate(&mut loss, params)?;
            params.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = params.grad(id).data()[i];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(loss: &mut F, params: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    let (tape, out) = loss(params)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}
