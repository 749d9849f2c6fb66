//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation size for the central difference.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients near zero
    /// are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences in every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs.iter().map(Tensor::to_parameter).collect();
    let loss = f(&params)?;
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    loss.backward()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for j in 0..p.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = p.to_vec();
                data[j] += delta;
                let shifted = Tensor::new(data, p.shape())?;
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[i] = shifted;
                no_grad(|| f(&args)).map(|t| t.item())
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let abs = (analytic[j] - numeric).abs();
            let rel = relative_error(analytic[j], numeric, cfg.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    input: i,
                    index: j,
                    analytic: analytic[j],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
