//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever calls the forward function, so it shares no
//! code with the reverse pass it checks. ReLU kinks are handled by shrinking
//! the step until both probes stay in the same linear region as the base
//! point; a step that cannot be made kink-free is reported as skipped.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::streams::FusionNetwork;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked entries.
    pub max_rel_error: f64,
    /// `"<input name>[<flat index>]"` of the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Entries where no kink-free step was found.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a fresh tape from
/// leaves holding `inputs`.
pub fn check<F>(inputs: &[Tensor], names: &[String], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Usage(format!(
                "gradient check needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        Ok((v.data()[0], tape.kink_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_pattern = tape.kink_pattern();
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()).unwrap()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut values = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            let mut step = eps;
            let mut numeric = None;
            for _ in 0..6 {
                values[i].data_mut()[j] = orig + step;
                let (fp, pp) = eval(&values)?;
                values[i].data_mut()[j] = orig - step;
                let (fm, pm) = eval(&values)?;
                if pp == base_pattern && pm == base_pattern {
                    numeric = Some((fp - fm) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            values[i].data_mut()[j] = orig;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let err = relative_error(grad.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                let name = names.get(i).map_or_else(|| format!("input{i}"), Clone::clone);
                report.worst = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}

/// Checks every parameter of `store` for a loss built from bound parameters.
pub fn check_store<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let values: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    check(&values, &names, eps, |tape, vars| {
        f(tape, &Bound::from_vars(vars.to_vec()))
    })
}

/// Gradient check of the full training loss of `net` on one labelled sample.
pub fn check_network(
    net: &FusionNetwork,
    inputs: &[Tensor],
    label: usize,
    excitation_decay: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    check_store(&net.store, eps, |tape, p| {
        let (loss, _) = net.loss_on_tape(tape, p, inputs, label, excitation_decay)?;
        Ok(loss)
    })
}
