//! Central finite-difference verification of tape gradients (f64 only).

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-input worst-case agreement between autodiff and finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<f64>,
    pub max_abs_error: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Settings for [`gradient_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates whose gradient is small relative to the largest gradient
    /// of the same input are compared against `rel_floor * max|grad|`
    /// instead of their own magnitude, so round-off on near-zero entries
    /// does not dominate the report.
    pub rel_floor: f64,
    /// Absolute denominator floor; gradients that are identically zero (a
    /// key bias under softmax, for instance) are compared against this.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            rel_floor: 1e-3,
            abs_floor: 1e-5,
        }
    }
}

/// Check the gradient of scalar `f` at `inputs` with step `h`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    gradient_check_with(
        f,
        inputs,
        GradCheck {
            h,
            ..GradCheck::default()
        },
    )
}

pub fn gradient_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    cfg: GradCheck,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Oracle(format!(
                "function output has shape {:?}",
                v.shape()
            )));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::Oracle("function value is not finite".into()));
        }
        Ok(y)
    };
    eval(inputs)?;

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: Vec::with_capacity(inputs.len()),
        max_abs_error: Vec::with_capacity(inputs.len()),
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            plus[j] += cfg.h;
            work[i] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = input.to_vec();
            minus[j] -= cfg.h;
            work[i] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            *slot = (fp - fm) / (2.0 * cfg.h);
        }
        work[i] = input.clone();
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let floor = (cfg.rel_floor * scale).max(cfg.abs_floor);
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            let e = (a - n).abs();
            abs = abs.max(e);
            rel = rel.max(e / a.abs().max(n.abs()).max(floor));
        }
        report.max_rel_error.push(rel);
        report.max_abs_error.push(abs);
        report.coords_checked += input.numel();
    }
    Ok(report)
}
