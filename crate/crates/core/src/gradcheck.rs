//! Central finite-difference gradient checking in 64-bit precision.

use crate::autograd::{Rule, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A named set of leaf tensors checked together (e.g. one layer's kernels).
#[derive(Debug, Clone)]
pub struct Group {
    pub name: String,
    pub value: Tensor<f64>,
}

impl Group {
    pub fn new(name: impl Into<String>, value: Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    /// max over elements of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error measure used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compare backprop gradients of a scalar function of `groups` against
/// central differences `(f(x+h) − f(x−h)) / 2h`.
///
/// `build` must create the loss on the given tape from the leaf vars (one per
/// group, in order). `fault` is forwarded to the analytic tape only.
pub fn check<F>(
    groups: &[Group],
    step: f64,
    fault: Option<(Rule, f64)>,
    build: F,
) -> Result<Vec<GroupReport>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    if let Some((rule, factor)) = fault {
        tape = tape.with_fault(rule, factor);
    }
    let vars: Vec<Var> = groups.iter().map(|g| tape.param(g.value.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let mut grads = tape.backward(root)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };

    let mut values: Vec<Tensor<f64>> = groups.iter().map(|g| g.value.clone()).collect();
    let mut reports = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let analytic = grads
            .take(vars[gi])
            .unwrap_or_else(|| Tensor::zeros(group.value.shape()));
        let mut max_rel_error = 0.0f64;
        for i in 0..group.value.numel() {
            let orig = values[gi].data()[i];
            values[gi].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[gi].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[gi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel_error = max_rel_error.max(relative_error(analytic.data()[i], numeric));
        }
        reports.push(GroupReport {
            name: group.name.clone(),
            max_rel_error,
            checked: group.value.numel(),
        });
    }
    Ok(reports)
}
