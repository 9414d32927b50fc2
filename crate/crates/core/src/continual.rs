//! Network expansion and anchored retraining for newly observed attacks.
//!
//! When a detector meets traffic it cannot classify, it grows: every
//! hidden dense layer gains `k` fresh units. A fresh unit reads from all
//! units of the previous layer, but its output feeds only the fresh units
//! of the next layer; in the last hidden layer the fresh units connect to
//! the two output neurons through zero-initialized weights. At the moment
//! of expansion the model therefore computes exactly what it computed
//! before, and the convolutional or recurrent base stays frozen forever.
//!
//! Training then runs in up to two phases. Phase one fits only the added
//! weights on the new task. If the validation detection rate still falls
//! short of the `tau` threshold, phase two retrains all dense weights
//! under three penalties: an importance-weighted drift anchor toward the
//! previous parameters, an unsquared L2 norm over the expanded and the
//! previous dense weights, and an L1 push keeping the added weights
//! sparse.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::Sample;
use crate::nn::fit::{fit, Drift, EpochStats, FitConfig, Penalties};
use crate::nn::loss::DriftForm;
use crate::nn::metrics::{binary_label, evaluate, input_for};
use crate::nn::model::{glorot, Architecture, LayerSpec, NetworkModel};
use crate::nn::optim::TrainMask;
use crate::nn::run::{backward, forward, softmax2, Mode};
use crate::nn::tensor::ModelInput;

/// A model after expansion, with the bookkeeping linking it to the model
/// it grew from.
#[derive(Debug, Clone)]
pub struct ExpandedNetwork {
    model: NetworkModel,
    prv_map: Vec<usize>,
    added: Vec<usize>,
    structural_zero: Vec<usize>,
}

impl ExpandedNetwork {
    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut NetworkModel {
        &mut self.model
    }

    pub fn into_model(self) -> NetworkModel {
        self.model
    }

    /// For old parameter index `i`, its position in the expanded vector.
    pub fn prv_map(&self) -> &[usize] {
        &self.prv_map
    }

    /// Indices of the added, trainable parameters.
    pub fn added_indices(&self) -> &[usize] {
        &self.added
    }

    /// Indices that encode "no connection": fresh-unit outputs into old
    /// units. They are zero and no phase may train them.
    pub fn structural_zeros(&self) -> &[usize] {
        &self.structural_zero
    }

    /// Phase one: only the added parameters move.
    pub fn phase1_mask(&self) -> TrainMask {
        TrainMask::from_indices(self.model.n_params(), &self.added)
    }

    /// Phase two: every dense parameter moves except structural zeros;
    /// the base stays frozen.
    pub fn phase2_mask(&self) -> TrainMask {
        let mut mask =
            TrainMask::from_indices(self.model.n_params(), &self.model.dense_param_indices());
        for &i in &self.structural_zero {
            mask.set(i, false);
        }
        mask
    }

    /// Previous dense parameters at their new positions.
    pub fn prv_dense_indices(&self, old: &NetworkModel) -> Vec<usize> {
        old.dense_param_indices().iter().map(|&i| self.prv_map[i]).collect()
    }
}

/// Grows every hidden dense layer of `old` by `k` units.
///
/// Added input weights are initialized like a fresh layer of the new
/// width; added biases and the last hidden layer's links into the output
/// neurons start at zero. `k = 0` yields an identical copy.
pub fn expand(old: &NetworkModel, k: usize, rng: &mut ChaCha8Rng) -> Result<ExpandedNetwork> {
    let arch = old.arch();
    let dense_layers: Vec<usize> = arch
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    if k > 0 && dense_layers.len() < 2 {
        return Err(Error::Config(
            "expansion needs at least one hidden dense layer before the output layer".into(),
        ));
    }

    let n_dense = dense_layers.len();
    let mut new_layers = arch.layers.clone();
    for (pos, &li) in dense_layers.iter().enumerate() {
        let LayerSpec::Dense { inputs, units } = new_layers[li] else { unreachable!() };
        let grow_in = if pos == 0 { 0 } else { k };
        let grow_out = if pos + 1 == n_dense { 0 } else { k };
        new_layers[li] = LayerSpec::Dense { inputs: inputs + grow_in, units: units + grow_out };
    }
    let new_arch = Architecture {
        input: arch.input,
        layers: new_layers,
        dense_start: arch.dense_start,
    };
    let mut model = NetworkModel::zeroed(new_arch)?;
    let mut prv_map = vec![usize::MAX; old.n_params()];
    let mut added = Vec::new();
    let mut structural_zero = Vec::new();

    let pairs: Vec<_> = old.blocks().iter().copied().zip(model.blocks().iter().copied()).collect();
    for (ob, nb) in pairs {
        debug_assert_eq!(ob.layer, nb.layer);
        match (arch.layers[ob.layer], model.arch().layers[nb.layer]) {
            (
                LayerSpec::Dense { inputs: a_old, units: u_old },
                LayerSpec::Dense { inputs: a_new, units: u_new },
            ) => {
                let is_output = ob.layer == *dense_layers.last().expect("dense layer exists");
                let scale = glorot(a_new, u_new);
                let mut fresh = Vec::new();
                for i in 0..a_new {
                    for u in 0..u_new {
                        let ni = nb.offset + i * u_new + u;
                        if i < a_old && u < u_old {
                            fresh.push(old.params()[ob.offset + i * u_old + u]);
                            prv_map[ob.offset + i * u_old + u] = ni;
                        } else if u < u_old {
                            // a fresh unit feeding an existing one
                            fresh.push(0.0);
                            if is_output {
                                added.push(ni);
                            } else {
                                structural_zero.push(ni);
                            }
                        } else {
                            fresh.push(rng.random_range(-scale..=scale));
                            added.push(ni);
                        }
                    }
                }
                for u in 0..u_old {
                    let oi = ob.offset + a_old * u_old + u;
                    let ni = nb.offset + a_new * u_new + u;
                    fresh.push(old.params()[oi]);
                    prv_map[oi] = ni;
                }
                for u in u_old..u_new {
                    fresh.push(0.0);
                    added.push(nb.offset + a_new * u_new + u);
                }
                model.params_mut()[nb.offset..nb.offset + nb.len].copy_from_slice(&fresh);
            }
            _ => {
                debug_assert_eq!(ob.len, nb.len);
                model.params_mut()[nb.offset..nb.offset + nb.len]
                    .copy_from_slice(&old.params()[ob.offset..ob.offset + ob.len]);
                for j in 0..ob.len {
                    prv_map[ob.offset + j] = nb.offset + j;
                }
            }
        }
    }
    debug_assert!(prv_map.iter().all(|&i| i != usize::MAX));
    Ok(ExpandedNetwork { model, prv_map, added, structural_zero })
}

/// Settings for one expansion update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    /// Units added to each hidden dense layer.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Validation detection rate below which phase two runs. Above 1 it
    /// always runs; zero disables it.
    pub tau: f64,
    /// Weight of the importance drift anchor.
    pub lambda_drift: f64,
    /// Weight of the two unsquared L2 norms.
    pub lambda_group: f64,
    /// Weight of the L1 penalty on added weights.
    pub lambda_sparse: f64,
    pub drift_form: DriftForm,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ContinualConfig {
    fn default() -> ContinualConfig {
        ContinualConfig {
            k: 10,
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.0,
            tau: 0.9,
            lambda_drift: 1.0,
            lambda_group: 1e-3,
            lambda_sparse: 1e-3,
            drift_form: DriftForm::Squared,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Result of one expansion update.
#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub network: ExpandedNetwork,
    pub phase2_used: bool,
    /// Validation detection rate measured between the phases.
    pub detection_after_phase1: f64,
    pub phase1_stats: Vec<EpochStats>,
    pub phase2_stats: Vec<EpochStats>,
}

impl ContinualOutcome {
    pub fn model(&self) -> &NetworkModel {
        self.network.model()
    }
}

/// Expands `prev` and trains it on `task`, falling back to fully
/// regularized retraining when the light first phase is not enough.
///
/// `prev_fisher` carries per-parameter importance over `prev`'s parameter
/// space; it anchors phase two. The task is split into train and
/// validation parts, stratified by benign/attack.
pub fn continual_learn(
    prev: &NetworkModel,
    prev_fisher: &[f64],
    task: &[Sample],
    cfg: &ContinualConfig,
) -> Result<ContinualOutcome> {
    if prev_fisher.len() != prev.n_params() {
        return Err(Error::ParamCountMismatch { model: prev.n_params(), message: prev_fisher.len() });
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.val_fraction == 0.0 {
        return Err(Error::Config(format!(
            "validation fraction must be in (0, 1), got {}",
            cfg.val_fraction
        )));
    }
    if task.is_empty() {
        return Err(Error::EmptyDataset("continual update without task data".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = stratified_split(task, cfg.val_fraction, &mut rng);
    let mut network = expand(prev, cfg.k, &mut rng)?;

    let inputs: Vec<ModelInput> =
        train_idx.iter().map(|&i| input_for(network.model().arch(), &task[i].matrix)).collect();
    let labels: Vec<usize> = train_idx.iter().map(|&i| binary_label(task[i].label)).collect();
    let val: Vec<Sample> = val_idx.iter().map(|&i| task[i].clone()).collect();

    let phase1_cfg = FitConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        seed: rng.random::<u64>(),
    };
    let mask1 = network.phase1_mask();
    let phase1_stats =
        fit(network.model_mut(), &mask1, &inputs, &labels, &Penalties::none(), &phase1_cfg)?;

    let detection_after_phase1 = if val.is_empty() {
        1.0
    } else {
        evaluate(network.model(), &val)?.detection_rate
    };

    let mut phase2_stats = Vec::new();
    let phase2_used = detection_after_phase1 < cfg.tau;
    if phase2_used {
        let exp_group = network.phase2_mask().indices();
        let prv_group = network.prv_dense_indices(prev);
        let prv_map = network.prv_map().to_vec();
        let added = network.added_indices().to_vec();
        let penalties = Penalties {
            drift: Some(Drift {
                reference: prev.params(),
                fisher: prev_fisher,
                map: Some(&prv_map),
                weight: cfg.lambda_drift,
                form: cfg.drift_form,
            }),
            l2_groups: vec![(&exp_group, cfg.lambda_group), (&prv_group, cfg.lambda_group)],
            l1_group: Some((&added, cfg.lambda_sparse)),
        };
        let phase2_cfg = FitConfig { seed: rng.random::<u64>(), ..phase1_cfg };
        let mask2 = network.phase2_mask();
        phase2_stats =
            fit(network.model_mut(), &mask2, &inputs, &labels, &penalties, &phase2_cfg)?;
    }

    Ok(ContinualOutcome {
        network,
        phase2_used,
        detection_after_phase1,
        phase1_stats,
        phase2_stats,
    })
}

/// Mean squared score gradient per parameter, the importance estimate the
/// drift anchor consumes.
///
/// For each sample the gradient of `log p(labeled class | input)` is
/// computed exactly, squared elementwise, and averaged with compensated
/// summation so the result does not depend on sample order beyond
/// rounding.
pub fn fisher_diagonal(model: &NetworkModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let inputs: Vec<ModelInput> =
        samples.iter().map(|s| input_for(model.arch(), &s.matrix)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| binary_label(s.label)).collect();
    fisher_diagonal_inputs(model, &inputs, &labels)
}

/// [`fisher_diagonal`] over pre-built inputs.
pub fn fisher_diagonal_inputs(
    model: &NetworkModel,
    inputs: &[ModelInput],
    labels: &[usize],
) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("importance estimate without samples".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", inputs.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let n = model.n_params();
    let mut sum = vec![0.0f64; n];
    let mut comp = vec![0.0f64; n];
    for (input, &y) in inputs.iter().zip(labels) {
        let (out, trace) = forward(model, std::slice::from_ref(input), Mode::Eval, None)?;
        let steps = out.logits[0].len();
        let wt = 1.0 / steps as f64;
        let dlogits: Vec<[f64; 2]> = out.logits[0]
            .iter()
            .map(|&z| {
                let p = softmax2(z);
                let mut d = [wt * p[0], wt * p[1]];
                d[y] -= wt;
                d
            })
            .collect();
        let g = backward(model, &trace, &[dlogits])?;
        for i in 0..n {
            let v = g[i] * g[i];
            let y_k = v - comp[i];
            let t = sum[i] + y_k;
            comp[i] = (t - sum[i]) - y_k;
            sum[i] = t;
        }
    }
    let inv = 1.0 / inputs.len() as f64;
    for v in &mut sum {
        *v *= inv;
    }
    Ok(sum)
}

/// Seeded stratified split; each label group keeps at least one training
/// sample, and groups with two or more samples contribute at least one
/// validation sample.
fn stratified_split(
    task: &[Sample],
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in task.iter().enumerate() {
        groups[binary_label(s.label)].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for g in &mut groups {
        g.shuffle(rng);
        let n_val = if g.len() < 2 {
            0
        } else {
            (((g.len() as f64) * val_fraction).round() as usize).clamp(1, g.len() - 1)
        };
        val.extend_from_slice(&g[..n_val]);
        train.extend_from_slice(&g[n_val..]);
    }
    (train, val)
}
