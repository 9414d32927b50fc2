//! Detection metrics over labeled flow matrices.
//!
//! Evaluation is always binary: class 0 is benign, anything else counts as
//! attack. Multi-class datasets collapse onto that axis, which is how a
//! two-output detector is scored against a catalog with several attack
//! families.

use crate::error::Result;
use crate::ingest::{LabelId, Sample};
use crate::nn::model::{Architecture, InputSpec, NetworkModel};
use crate::nn::run::{infer, Mode};
use crate::nn::tensor::ModelInput;

/// Evaluation batch size; bounds peak memory without changing results.
const EVAL_CHUNK: usize = 128;

/// Confusion-derived summary of a detector on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Attack recall: attacks flagged as attacks.
    pub detection_rate: f64,
    /// Benign flows flagged as attacks.
    pub false_alarm_rate: f64,
    pub n: usize,
    pub n_attack: usize,
    /// Indexed `[true class][predicted class]`.
    pub confusion: [[usize; 2]; 2],
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Metrics {
        let n: usize = confusion.iter().flatten().sum();
        let n_attack = confusion[1][0] + confusion[1][1];
        let n_benign = n - n_attack;
        let correct = confusion[0][0] + confusion[1][1];
        Metrics {
            accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
            detection_rate: if n_attack > 0 { confusion[1][1] as f64 / n_attack as f64 } else { 1.0 },
            false_alarm_rate: if n_benign > 0 { confusion[0][1] as f64 / n_benign as f64 } else { 0.0 },
            n,
            n_attack,
            confusion,
        }
    }
}

/// Collapses a catalog label onto the benign/attack axis.
pub fn binary_label(label: LabelId) -> usize {
    usize::from(label != 0)
}

/// Builds the input representation a given architecture consumes.
pub fn input_for(arch: &Architecture, matrix: &crate::ingest::FlowMatrix) -> ModelInput {
    match arch.input {
        InputSpec::Grid { .. } => ModelInput::grid_from_matrix(matrix),
        InputSpec::Sequence { .. } => ModelInput::sequence_from_matrix(matrix),
    }
}

/// Scores `model` on labeled samples; the flow-level prediction is the
/// argmax of the final step.
pub fn evaluate(model: &NetworkModel, samples: &[Sample]) -> Result<Metrics> {
    let mut confusion = [[0usize; 2]; 2];
    for chunk in samples.chunks(EVAL_CHUNK) {
        let inputs: Vec<ModelInput> =
            chunk.iter().map(|s| input_for(model.arch(), &s.matrix)).collect();
        let out = infer(model, &inputs, Mode::Eval, None)?;
        for (i, sample) in chunk.iter().enumerate() {
            let p = out.final_probs(i);
            let pred = usize::from(p[1] > p[0]);
            confusion[binary_label(sample.label)][pred] += 1;
        }
    }
    Ok(Metrics::from_confusion(confusion))
}

/// Scores pre-built inputs against binary labels.
pub fn evaluate_inputs(
    model: &NetworkModel,
    inputs: &[ModelInput],
    labels: &[usize],
) -> Result<Metrics> {
    let mut confusion = [[0usize; 2]; 2];
    for (chunk, label_chunk) in inputs.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let out = infer(model, chunk, Mode::Eval, None)?;
        for (i, &y) in label_chunk.iter().enumerate() {
            let p = out.final_probs(i);
            let pred = usize::from(p[1] > p[0]);
            confusion[y][pred] += 1;
        }
    }
    Ok(Metrics::from_confusion(confusion))
}
