//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is independent of
//! every backward rule it is used to verify.

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over compared elements.
    pub max_rel_error: f64,
    /// Elements whose magnitude exceeded the comparison floor.
    pub compared: usize,
    pub total: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compare the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh tape and one variable per entry of `inputs` and must return
/// a scalar. Elements with magnitude at most `floor` in both estimates are skipped.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, compared: 0, total: 0 };
    let mut probe = inputs.to_vec();
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[slot].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let original = probe[slot].data()[i];
            probe[slot].data_mut()[i] = original + step;
            let plus = eval(&probe)?;
            probe[slot].data_mut()[i] = original - step;
            let minus = eval(&probe)?;
            probe[slot].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            report.total += 1;
            let scale = a.abs().max(numeric.abs());
            if scale > floor {
                report.compared += 1;
                report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(report)
}
