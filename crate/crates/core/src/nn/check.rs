//! Numeric gradient verification.
//!
//! Central finite differences over the scalar training loss, one parameter
//! at a time. This is deliberately independent of the backward pass: it
//! only calls the forward pass and reads the loss value, so it serves as
//! an oracle for the analytic gradient. Evaluation mode is used throughout
//! because a stochastic forward pass has no well-defined derivative.

use crate::error::Result;
use crate::nn::loss::cross_entropy;
use crate::nn::model::NetworkModel;
use crate::nn::run::{infer, Mode};
use crate::nn::tensor::ModelInput;

/// Mean cross-entropy of the model on a batch, eval mode.
pub fn loss_value(model: &NetworkModel, inputs: &[ModelInput], labels: &[usize]) -> Result<f64> {
    let out = infer(model, inputs, Mode::Eval, None)?;
    Ok(cross_entropy(&out, labels)?.0)
}

/// Central-difference gradient of the mean cross-entropy.
pub fn numeric_gradient(
    model: &NetworkModel,
    inputs: &[ModelInput],
    labels: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let n = probe.n_params();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = loss_value(&probe, inputs, labels)?;
        probe.params_mut()[i] = orig - eps;
        let minus = loss_value(&probe, inputs, labels)?;
        probe.params_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst-case elementwise relative error between two gradients.
///
/// The denominator is floored so that entries that are zero on both sides
/// compare as equal instead of dividing by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
