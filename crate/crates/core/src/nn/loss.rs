//! Loss terms and penalty terms, all expressed so the network part of the
//! gradient lands on logits and the penalty part lands directly on
//! parameters.
//!
//! Batch convention: every sample carries weight 1/B and every step within
//! a sample carries 1/T_s, so single-step and sequence models share one
//! code path and loss magnitudes stay comparable across flow lengths.

use crate::error::{Error, Result};
use crate::nn::run::{log_softmax2, softmax2, BatchOutput};

/// Per-sample, per-step logit gradients, the shape [`crate::nn::backward`]
/// consumes.
pub type LogitGrads = Vec<Vec<[f64; 2]>>;

/// Mean cross-entropy against hard labels and its logit gradient.
///
/// Sequence models apply the same flow label to every step.
pub fn cross_entropy(outputs: &BatchOutput, labels: &[usize]) -> Result<(f64, LogitGrads)> {
    if labels.len() != outputs.logits.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", outputs.logits.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let b = outputs.logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.logits.len());
    for (s, steps) in outputs.logits.iter().enumerate() {
        let y = labels[s];
        debug_assert!(y < 2);
        let wt = 1.0 / (b * steps.len() as f64);
        let mut g = Vec::with_capacity(steps.len());
        for &z in steps {
            loss -= wt * log_softmax2(z, y);
            let p = softmax2(z);
            let mut d = [wt * p[0], wt * p[1]];
            d[y] -= wt;
            g.push(d);
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Softened-label distillation toward a teacher's logits.
///
/// Both sides are tempered by `temperature` and the value is scaled by
/// temperature squared, which keeps its gradient magnitude comparable to
/// the hard-label term as the temperature grows.
pub fn distillation(
    outputs: &BatchOutput,
    teacher_logits: &[Vec<[f64; 2]>],
    temperature: f64,
) -> Result<(f64, LogitGrads)> {
    if teacher_logits.len() != outputs.logits.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} teacher entries", outputs.logits.len()),
            actual: format!("{}", teacher_logits.len()),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let t = temperature;
    let b = outputs.logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.logits.len());
    for (s, steps) in outputs.logits.iter().enumerate() {
        if teacher_logits[s].len() != steps.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} teacher steps for sample {s}", steps.len()),
                actual: format!("{}", teacher_logits[s].len()),
            });
        }
        let wt = 1.0 / (b * steps.len() as f64);
        let mut g = Vec::with_capacity(steps.len());
        for (step, &z) in steps.iter().enumerate() {
            let zt = teacher_logits[s][step];
            let q = softmax2([zt[0] / t, zt[1] / t]);
            let zs = [z[0] / t, z[1] / t];
            let p = softmax2(zs);
            let step_loss =
                -(q[0] * log_softmax2(zs, 0) + q[1] * log_softmax2(zs, 1));
            loss += wt * t * t * step_loss;
            g.push([wt * t * (p[0] - q[0]), wt * t * (p[1] - q[1])]);
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Sums a second set of logit gradients into the first.
pub fn add_logit_grads(into: &mut LogitGrads, other: &LogitGrads) {
    debug_assert_eq!(into.len(), other.len());
    for (a, b) in into.iter_mut().zip(other) {
        debug_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter_mut().zip(b) {
            x[0] += y[0];
            x[1] += y[1];
        }
    }
}

/// How parameter drift is charged against importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftForm {
    /// `weight * sum_i F_i * (theta_i - ref_i)^2`, the usual quadratic well.
    Squared,
    /// `weight * sum_i F_i * |theta_i - ref_i|`, a literal absolute-drift
    /// variant kept behind a switch; its gradient is the sign times F_i.
    Linear,
}

/// Importance-weighted drift penalty anchoring `params` to `reference`.
///
/// `map[i]` gives the position in `params` of reference entry `i`; pass
/// `None` when both vectors share the full parameter space. Adds the
/// penalty gradient into `grad` and returns the penalty value.
pub fn importance_drift(
    params: &[f64],
    reference: &[f64],
    fisher: &[f64],
    map: Option<&[usize]>,
    weight: f64,
    form: DriftForm,
    grad: &mut [f64],
) -> Result<f64> {
    if reference.len() != fisher.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} importance entries", reference.len()),
            actual: format!("{}", fisher.len()),
        });
    }
    if let Some(map) = map {
        if map.len() != reference.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} mapped indices", reference.len()),
                actual: format!("{}", map.len()),
            });
        }
    }
    let mut value = 0.0;
    for i in 0..reference.len() {
        let pi = map.map_or(i, |m| m[i]);
        let d = params[pi] - reference[i];
        match form {
            DriftForm::Squared => {
                value += weight * fisher[i] * d * d;
                grad[pi] += 2.0 * weight * fisher[i] * d;
            }
            DriftForm::Linear => {
                value += weight * fisher[i] * d.abs();
                grad[pi] += weight * fisher[i] * d.signum();
            }
        }
    }
    Ok(value)
}

/// Unsquared L2 norm over one index group: `weight * ||theta_G||_2`.
///
/// Treating each group as a unit pushes whole groups toward zero together;
/// the gradient at the origin is taken as zero.
pub fn group_l2(params: &[f64], group: &[usize], weight: f64, grad: &mut [f64]) -> f64 {
    let norm_sq: f64 = group.iter().map(|&i| params[i] * params[i]).sum();
    let norm = norm_sq.sqrt();
    if norm > 0.0 {
        let scale = weight / norm;
        for &i in group {
            grad[i] += scale * params[i];
        }
    }
    weight * norm
}

/// L1 penalty over one index group: `weight * sum |theta_i|`, subgradient
/// zero at zero.
pub fn group_l1(params: &[f64], group: &[usize], weight: f64, grad: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for &i in group {
        value += params[i].abs();
        if params[i] != 0.0 {
            grad[i] += weight * params[i].signum();
        }
    }
    weight * value
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_step(logits: [f64; 2]) -> BatchOutput {
        BatchOutput { probs: vec![vec![softmax2(logits)]], logits: vec![vec![logits]] }
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let out = single_step([0.3, -0.2]);
        let (loss, grads) = cross_entropy(&out, &[1]).unwrap();
        let p = softmax2([0.3, -0.2]);
        assert!((loss + p[1].ln()).abs() < 1e-12);
        assert!((grads[0][0][0] - p[0]).abs() < 1e-12);
        assert!((grads[0][0][1] - (p[1] - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_step_weighting_is_uniform_per_flow() {
        // one flow with 4 steps and one with 1 step: each flow counts 1/2
        let out = BatchOutput {
            logits: vec![vec![[0.0, 0.0]; 4], vec![[0.0, 0.0]]],
            probs: vec![vec![[0.5, 0.5]; 4], vec![[0.5, 0.5]]],
        };
        let (loss, grads) = cross_entropy(&out, &[0, 0]).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        assert!((grads[0][0][0] - (0.5 - 1.0) / 8.0).abs() < 1e-12);
        assert!((grads[1][0][0] - (0.5 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn distillation_is_zero_at_matching_logits_shifted_or_not() {
        // student logits equal teacher logits plus a constant: same softmax
        let out = single_step([1.0, -1.0]);
        let teacher = vec![vec![[2.0, 0.0]]];
        let (loss, grads) = distillation(&out, &teacher, 2.0).unwrap();
        let q = softmax2([1.0, 0.0]);
        let entropy = -(q[0] * q[0].ln() + q[1] * q[1].ln());
        assert!((loss - 4.0 * entropy).abs() < 1e-12, "value is T^2 times soft entropy");
        assert!(grads[0][0][0].abs() < 1e-12 && grads[0][0][1].abs() < 1e-12);
    }

    #[test]
    fn distillation_gradient_pushes_toward_teacher() {
        let out = single_step([0.0, 0.0]);
        let teacher = vec![vec![[4.0, 0.0]]];
        let (_, grads) = distillation(&out, &teacher, 2.0).unwrap();
        // teacher prefers class 0, so its logit gradient must be negative
        assert!(grads[0][0][0] < 0.0 && grads[0][0][1] > 0.0);
        assert!((grads[0][0][0] + grads[0][0][1]).abs() < 1e-12);
    }

    #[test]
    fn drift_penalty_squared_and_linear() {
        let params = [1.0, -2.0, 0.5];
        let reference = [0.0, -1.0];
        let fisher = [2.0, 3.0];
        let map = [0usize, 1];
        let mut grad = [0.0; 3];
        let v = importance_drift(
            &params,
            &reference,
            &fisher,
            Some(&map),
            0.5,
            DriftForm::Squared,
            &mut grad,
        )
        .unwrap();
        assert!((v - 0.5 * (2.0 * 1.0 + 3.0 * 1.0)).abs() < 1e-12);
        assert!((grad[0] - 2.0 * 0.5 * 2.0 * 1.0).abs() < 1e-12);
        assert!((grad[1] - 2.0 * 0.5 * 3.0 * -1.0).abs() < 1e-12);
        assert_eq!(grad[2], 0.0);

        let mut grad = [0.0; 3];
        let v = importance_drift(
            &params,
            &reference,
            &fisher,
            Some(&map),
            1.0,
            DriftForm::Linear,
            &mut grad,
        )
        .unwrap();
        assert!((v - (2.0 + 3.0)).abs() < 1e-12);
        assert!((grad[0] - 2.0).abs() < 1e-12);
        assert!((grad[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn group_norms() {
        let params = [3.0, 4.0, -2.0, 0.0];
        let mut grad = [0.0; 4];
        let v = group_l2(&params, &[0, 1], 2.0, &mut grad);
        assert!((v - 10.0).abs() < 1e-12);
        assert!((grad[0] - 2.0 * 3.0 / 5.0).abs() < 1e-12);
        assert!((grad[1] - 2.0 * 4.0 / 5.0).abs() < 1e-12);

        let mut grad = [0.0; 4];
        let v = group_l1(&params, &[2, 3], 0.5, &mut grad);
        assert!((v - 1.0).abs() < 1e-12);
        assert!((grad[2] + 0.5).abs() < 1e-12);
        assert_eq!(grad[3], 0.0, "subgradient at zero is zero");
    }

    #[test]
    fn zero_group_l2_has_zero_gradient() {
        let params = [0.0, 0.0];
        let mut grad = [0.0; 2];
        let v = group_l2(&params, &[0, 1], 1.0, &mut grad);
        assert_eq!(v, 0.0);
        assert_eq!(grad, [0.0, 0.0]);
    }
}
