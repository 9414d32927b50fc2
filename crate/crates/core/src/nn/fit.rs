//! Mini-batch training driver.
//!
//! One function owns the epoch loop so every trainer in the workspace
//! shuffles, batches, and applies penalties the same way. The objective is
//! always mean cross-entropy plus whatever [`Penalties`] the caller
//! attaches; penalty gradients act directly on parameters and are added to
//! the backpropagated gradient before each step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy, group_l1, group_l2, importance_drift, DriftForm};
use crate::nn::model::NetworkModel;
use crate::nn::optim::{Sgd, TrainMask};
use crate::nn::run::{backward, forward, infer, Mode};
use crate::nn::tensor::ModelInput;

/// Anchor term pulling parameters toward a reference, weighted by
/// per-parameter importance. `map[i]` locates reference entry `i` in the
/// trained model's parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Drift<'a> {
    pub reference: &'a [f64],
    pub fisher: &'a [f64],
    pub map: Option<&'a [usize]>,
    pub weight: f64,
    pub form: DriftForm,
}

/// Parameter-space penalty terms added to the data loss.
#[derive(Default)]
pub struct Penalties<'a> {
    pub drift: Option<Drift<'a>>,
    /// Each group contributes `weight * ||theta_group||_2` (unsquared).
    pub l2_groups: Vec<(&'a [usize], f64)>,
    pub l1_group: Option<(&'a [usize], f64)>,
}

impl Penalties<'_> {
    pub fn none() -> Penalties<'static> {
        Penalties::default()
    }

    /// Total penalty value; gradients are accumulated into `grad`.
    pub fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut value = 0.0;
        if let Some(d) = &self.drift {
            value +=
                importance_drift(params, d.reference, d.fisher, d.map, d.weight, d.form, grad)?;
        }
        for (group, weight) in &self.l2_groups {
            value += group_l2(params, group, *weight, grad);
        }
        if let Some((group, weight)) = &self.l1_group {
            value += group_l1(params, group, *weight, grad);
        }
        Ok(value)
    }
}

/// Epoch loop settings. Shuffling and dropout use rngs derived from
/// `seed`, so a fit is reproducible given the same model and data order.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig { epochs: 20, batch_size: 16, learning_rate: 0.01, momentum: 0.0, seed: 0 }
    }
}

/// Mean objective value per epoch, in epoch order.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains `model` in place and reports the mean objective per epoch.
pub fn fit(
    model: &mut NetworkModel,
    mask: &TrainMask,
    inputs: &[ModelInput],
    labels: &[usize],
    penalties: &Penalties,
    cfg: &FitConfig,
) -> Result<Vec<EpochStats>> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", inputs.len()),
            actual: format!("{}", labels.len()),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = if cfg.momentum == 0.0 {
        Sgd::new(cfg.learning_rate)
    } else {
        Sgd::with_momentum(cfg.learning_rate, cfg.momentum)
    };
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_inputs: Vec<ModelInput> =
                chunk.iter().map(|&i| inputs[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (out, trace) = forward(model, &batch_inputs, Mode::Train, Some(&mut dropout_rng))?;
            let (ce, dlogits) = cross_entropy(&out, &batch_labels)?;
            let mut grad = backward(model, &trace, &dlogits)?;
            let penalty = penalties.value_and_grad(model.params(), &mut grad)?;
            opt.step(model, &grad, mask)?;
            loss_sum += ce + penalty;
            batches += 1;
        }
        stats.push(EpochStats { epoch, loss: loss_sum / batches as f64 });
    }
    Ok(stats)
}

/// The objective [`fit`] descends, evaluated without dropout; used by
/// gradient checks and loss-composition tests.
pub fn objective_value(
    model: &NetworkModel,
    inputs: &[ModelInput],
    labels: &[usize],
    penalties: &Penalties,
) -> Result<f64> {
    let out = infer(model, inputs, Mode::Eval, None)?;
    let (ce, _) = cross_entropy(&out, labels)?;
    let mut sink = vec![0.0; model.n_params()];
    let penalty = penalties.value_and_grad(model.params(), &mut sink)?;
    Ok(ce + penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::Architecture;
    use crate::nn::tensor::Tensor;
    use rand::Rng;

    fn toy_batch(n: usize, seed: u64) -> (Vec<ModelInput>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let a = rng.random::<f64>();
            let b = rng.random::<f64>();
            inputs.push(ModelInput::Grid(Tensor::new(vec![1, 2], vec![a, b]).unwrap()));
            labels.push(usize::from(a + b > 1.0));
        }
        (inputs, labels)
    }

    #[test]
    fn fit_is_deterministic_for_a_fixed_seed() {
        let arch = Architecture::mlp(2, &[6, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = NetworkModel::init(arch, &mut rng).unwrap();
        let (inputs, labels) = toy_batch(24, 2);
        let cfg = FitConfig { epochs: 5, batch_size: 8, ..FitConfig::default() };
        let mask = TrainMask::all(base.n_params());

        let mut a = base.clone();
        let stats_a = fit(&mut a, &mask, &inputs, &labels, &Penalties::none(), &cfg).unwrap();
        let mut b = base.clone();
        let stats_b = fit(&mut b, &mask, &inputs, &labels, &Penalties::none(), &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(stats_a, stats_b);

        let mut c = base.clone();
        let other = FitConfig { seed: 9, ..cfg };
        fit(&mut c, &mask, &inputs, &labels, &Penalties::none(), &other).unwrap();
        assert_ne!(a.params(), c.params(), "different seed, different shuffles and masks");
    }

    #[test]
    fn penalties_change_the_objective_and_its_gradient() {
        let arch = Architecture::mlp(2, &[4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = NetworkModel::init(arch, &mut rng).unwrap();
        let (inputs, labels) = toy_batch(8, 4);
        let reference = vec![0.0; model.n_params()];
        let fisher = vec![1.0; model.n_params()];
        let group: Vec<usize> = (0..model.n_params()).collect();
        let penalties = Penalties {
            drift: Some(Drift {
                reference: &reference,
                fisher: &fisher,
                map: None,
                weight: 0.5,
                form: DriftForm::Squared,
            }),
            l2_groups: vec![(&group, 0.1)],
            l1_group: Some((&group, 0.01)),
        };
        let plain = objective_value(&model, &inputs, &labels, &Penalties::none()).unwrap();
        let with = objective_value(&model, &inputs, &labels, &penalties).unwrap();
        let norm_sq: f64 = model.params().iter().map(|p| p * p).sum();
        let l1: f64 = model.params().iter().map(|p| p.abs()).sum();
        let expected = plain + 0.5 * norm_sq + 0.1 * norm_sq.sqrt() + 0.01 * l1;
        assert!((with - expected).abs() < 1e-9, "{with} vs {expected}");
    }

    #[test]
    fn penalized_objective_matches_finite_differences() {
        // the analytic penalty gradient agrees with numeric differentiation
        // of the composed objective
        let arch = Architecture::mlp(2, &[4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = NetworkModel::init(arch, &mut rng).unwrap();
        let (inputs, labels) = toy_batch(6, 6);
        let reference: Vec<f64> = (0..model.n_params()).map(|i| i as f64 * 0.01).collect();
        let fisher: Vec<f64> = (0..model.n_params()).map(|i| 1.0 + (i % 3) as f64).collect();
        let group: Vec<usize> = (0..model.n_params()).step_by(2).collect();
        let penalties = Penalties {
            drift: Some(Drift {
                reference: &reference,
                fisher: &fisher,
                map: None,
                weight: 0.7,
                form: DriftForm::Squared,
            }),
            l2_groups: vec![(&group, 0.2)],
            l1_group: None,
        };

        let (out, trace) = forward(&model, &inputs, Mode::Eval, None).unwrap();
        let (_, dlogits) = cross_entropy(&out, &labels).unwrap();
        let mut analytic = backward(&model, &trace, &dlogits).unwrap();
        penalties.value_and_grad(model.params(), &mut analytic).unwrap();

        let mut probe = model.clone();
        let eps = 1e-5;
        for i in 0..probe.n_params() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let plus = objective_value(&probe, &inputs, &labels, &penalties).unwrap();
            probe.params_mut()[i] = orig - eps;
            let minus = objective_value(&probe, &inputs, &labels, &penalties).unwrap();
            probe.params_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic[i] - numeric) / denom).abs() < 1e-4,
                "param {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let arch = Architecture::mlp(2, &[4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = NetworkModel::init(arch, &mut rng).unwrap();
        let (inputs, labels) = toy_batch(4, 8);
        let mask = TrainMask::all(model.n_params());
        let bad_batch = FitConfig { batch_size: 0, ..FitConfig::default() };
        assert!(fit(&mut model, &mask, &inputs, &labels, &Penalties::none(), &bad_batch).is_err());
        let bad_lr = FitConfig { learning_rate: 0.0, ..FitConfig::default() };
        assert!(fit(&mut model, &mask, &inputs, &labels, &Penalties::none(), &bad_lr).is_err());
        assert!(fit(
            &mut model,
            &mask,
            &[],
            &[],
            &Penalties::none(),
            &FitConfig::default()
        )
        .is_err());
    }
}
