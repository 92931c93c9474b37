//! Central finite-difference gradient checking in 64-bit.

use std::fmt;

use crate::error::Result;
use crate::layers::{Param, Parameterized};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Denominator floor for the relative error, so that tensors whose true
/// gradient is zero are compared in absolute terms.
const ERROR_FLOOR: f64 = 1e-6;

/// Fraction of all coordinates in a report allowed to be skipped because the
/// difference step crossed a ReLU kink.
const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub label: String,
    pub shape: Vec<usize>,
    /// `max |analytic - numeric|` over the checked coordinates, divided by the
    /// largest gradient magnitude of either kind in this tensor.
    pub max_rel_error: f64,
    /// Largest absolute difference seen so far.
    pub max_abs_error: f64,
    /// Largest `|analytic|` or `|numeric|` seen so far.
    pub scale: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates where `f(x ± h)` changed the ReLU activation pattern.
    pub skipped: usize,
}

impl InputReport {
    fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<InputReport>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed(self.tol))
            && self.skipped_fraction() <= MAX_SKIPPED_FRACTION
    }

    /// Skipped coordinates over all coordinates.
    pub fn skipped_fraction(&self) -> f64 {
        let total: usize = self.entries.iter().map(|e| e.checked + e.skipped).sum();
        self.skipped() as f64 / total.max(1) as f64
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().map(|e| e.skipped).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "  {:<12} {:<16} max_rel_err={:.3e} checked={} skipped={} {}",
                e.label,
                format!("{:?}", e.shape),
                e.max_rel_error,
                e.checked,
                e.skipped,
                if e.passed(self.tol) { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

struct NoParams;

impl Parameterized<f64> for NoParams {
    fn parameters(&self) -> Vec<&Param<f64>> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_module(&mut NoParams, inputs, |_, tape, vars| f(tape, vars), h, tol)
}

/// Like [`grad_check`], but also checks every parameter of `module`.
///
/// `f` must bind the module parameters on the tape it is given (the layer
/// `forward` methods do this).
pub fn grad_check_module<M, F>(
    module: &mut M,
    inputs: &[Tensor<f64>],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: FnMut(&mut M, &Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let tape = Tape::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(module, &tape, &vars)?;
    let base_signs = tape.relu_signs().map(|s| s.clone()).unwrap_or_default();
    let grads = tape.backward(loss)?;
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();
    let param_grads: Vec<Tensor<f64>> = module
        .parameters()
        .iter()
        .map(|p| {
            p.bound()
                .and_then(|v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();

    let mut eval = |module: &mut M, inputs: &[Tensor<f64>]| -> Result<(f64, bool)> {
        let tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(module, &tape, &vars)?;
        let same_pattern = tape.relu_signs().is_some_and(|s| *s == base_signs);
        Ok((tape.value(loss).data()[0], same_pattern))
    };

    let mut entries = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        let mut entry = InputReport {
            label: format!("input[{i}]"),
            shape: inputs[i].shape().to_vec(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            scale: 0.0,
            checked: 0,
            skipped: 0,
        };
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let (plus, ok_plus) = eval(module, &work)?;
            work[i].data_mut()[j] = x0 - h;
            let (minus, ok_minus) = eval(module, &work)?;
            work[i].data_mut()[j] = x0;
            entry.record(
                analytic.data()[j],
                (plus - minus) / (2.0 * h),
                ok_plus && ok_minus,
                tol,
            );
        }
        entries.push(entry);
    }

    let param_count = param_grads.len();
    for (p, analytic) in param_grads.iter().enumerate() {
        let shape = module.parameters()[p].value.shape().to_vec();
        let mut entry = InputReport {
            label: format!("param[{p}]"),
            shape,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            scale: 0.0,
            checked: 0,
            skipped: 0,
        };
        for j in 0..analytic.len() {
            let x0 = module.parameters()[p].value.data()[j];
            set_param(module, p, j, x0 + h);
            let (plus, ok_plus) = eval(module, &work)?;
            set_param(module, p, j, x0 - h);
            let (minus, ok_minus) = eval(module, &work)?;
            set_param(module, p, j, x0);
            entry.record(
                analytic.data()[j],
                (plus - minus) / (2.0 * h),
                ok_plus && ok_minus,
                tol,
            );
        }
        entries.push(entry);
    }
    debug_assert_eq!(entries.len(), inputs.len() + param_count);

    Ok(GradCheckReport {
        entries,
        tol,
        step: h,
    })
}

fn set_param<M: Parameterized<f64>>(module: &mut M, index: usize, element: usize, value: f64) {
    module.parameters_mut()[index].value.data_mut()[element] = value;
}

impl InputReport {
    /// A coordinate whose step changed the ReLU pattern is skipped only when
    /// its difference quotient disagrees with the analytic value; a crossing
    /// close enough to the step edge leaves the estimate intact.
    fn record(&mut self, analytic: f64, numeric: f64, differentiable: bool, tol: f64) {
        let diff = (analytic - numeric).abs();
        let agrees = diff <= tol * analytic.abs().max(numeric.abs()).max(ERROR_FLOOR);
        if !differentiable && !agrees {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        if diff.is_nan() {
            self.max_abs_error = f64::INFINITY;
        } else {
            self.max_abs_error = self.max_abs_error.max(diff);
            self.scale = self.scale.max(analytic.abs()).max(numeric.abs());
        }
        self.max_rel_error = self.max_abs_error / self.scale.max(ERROR_FLOOR);
    }
}
