use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Per-input maximum of the same quantity.
    pub per_input: Vec<f64>,
    /// `(input, component)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks the gradient of the scalar function `f` with respect to each of
/// `inputs`.
///
/// `f` must be deterministic; it is evaluated twice at the base point and a
/// bitwise difference between the two is reported as a contract error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Contract("grad_check function must return a scalar".into()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    tape.backward(out)?;
    let again = eval(inputs)?;
    if base.map(f64::to_bits) != Some(again.to_bits()) {
        return Err(Error::Contract(
            "function under grad_check is not deterministic".into(),
        ));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: None,
        tolerance,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("leaf requires grad").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let err = relative_error(a, (up - down) / (2.0 * step));
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
