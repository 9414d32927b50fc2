//! Distills an expanded detector back into its original architecture.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::ExpandedNetwork;
use crate::error::{Error, Result};
use crate::ingest::Sample;
use crate::nn::{
    add_logit_grads, backward, binary_label, cross_entropy, distillation, forward, infer,
    input_for, Architecture, Mode, ModelInput, NetworkModel, Sgd, TrainMask,
};

/// Student training settings for compression.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Softening temperature for the teacher-matching term.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for CompressConfig {
    fn default() -> CompressConfig {
        CompressConfig { epochs: 20, batch_size: 16, learning_rate: 0.01, temperature: 2.0, seed: 0 }
    }
}

/// Trains a student of `target_arch` against the expanded teacher.
///
/// The student starts from `warm_start` when given (its architecture must
/// be `target_arch`), otherwise from fresh seeded initialization. The
/// objective is hard-label cross entropy plus tempered distillation
/// toward the teacher's logits; no parameter anchor applies because the
/// student lives in the smaller pre-expansion parameter space.
pub fn compress_model(
    teacher: &ExpandedNetwork,
    target_arch: &Architecture,
    warm_start: Option<&NetworkModel>,
    dataset: &[Sample],
    cfg: &CompressConfig,
) -> Result<NetworkModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("distillation set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config(
            "compression needs epochs >= 1, batch >= 1 and a positive learning rate".into(),
        ));
    }
    if target_arch.n_params() != teacher.prv_map().len() {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{} parameters, the teacher's pre-expansion count",
                teacher.prv_map().len()
            ),
            actual: format!("{} in the target architecture", target_arch.n_params()),
        });
    }
    if target_arch.input != teacher.model().arch().input {
        return Err(Error::ShapeMismatch {
            expected: format!("input {:?}", teacher.model().arch().input),
            actual: format!("input {:?}", target_arch.input),
        });
    }
    let mut student = match warm_start {
        Some(m) => {
            if m.arch() != target_arch {
                return Err(Error::ShapeMismatch {
                    expected: "a warm start of the target architecture".into(),
                    actual: format!("{} parameters", m.n_params()),
                });
            }
            m.clone()
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            NetworkModel::init(target_arch.clone(), &mut init_rng)?
        }
    };

    let inputs: Vec<ModelInput> =
        dataset.iter().map(|s| input_for(target_arch, &s.matrix)).collect();
    let labels: Vec<usize> = dataset.iter().map(|s| binary_label(s.label)).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut opt = Sgd::new(cfg.learning_rate);
    let mask = TrainMask::all(student.n_params());

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b_inputs: Vec<ModelInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let b_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let teacher_out = infer(teacher.model(), &b_inputs, Mode::Eval, None)?;
            let (out, trace) = forward(&student, &b_inputs, Mode::Train, Some(&mut dropout_rng))?;
            let (_, mut logit_grads) = cross_entropy(&out, &b_labels)?;
            let (_, kd_grads) = distillation(&out, &teacher_out.logits, cfg.temperature)?;
            add_logit_grads(&mut logit_grads, &kd_grads);
            let grad = backward(&student, &trace, &logit_grads)?;
            opt.step(&mut student, &grad, &mask)?;
        }
    }
    Ok(student)
}

/// Fraction of samples on which two detectors pick the same class.
pub fn argmax_agreement(a: &NetworkModel, b: &NetworkModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("agreement needs at least one sample".into()));
    }
    let mut agree = 0usize;
    for chunk in samples.chunks(64) {
        let ia: Vec<ModelInput> = chunk.iter().map(|s| input_for(a.arch(), &s.matrix)).collect();
        let ib: Vec<ModelInput> = chunk.iter().map(|s| input_for(b.arch(), &s.matrix)).collect();
        let oa = infer(a, &ia, Mode::Eval, None)?;
        let ob = infer(b, &ib, Mode::Eval, None)?;
        for i in 0..chunk.len() {
            let pa = oa.final_probs(i);
            let pb = ob.final_probs(i);
            if (pa[1] > pa[0]) == (pb[1] > pb[0]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / samples.len() as f64)
}
