//! Packet-by-packet labeling of flows in progress.
//!
//! A recurrent detector emits a verdict distribution after every packet,
//! so a flow can be flagged long before it ends. This module wraps the
//! streaming evaluator with a decision rule and aggregates how detection
//! quality grows with the number of packets seen.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FlowMatrix, Sample};
use crate::nn::{binary_label, LstmStream, NetworkModel};

/// When to raise the alarm on a flow in progress.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionRule {
    /// Attack probability needed to flag; must be above one half so a
    /// flagged packet is always the argmax too.
    pub threshold: f64,
    /// Packets to observe before any verdict counts.
    pub min_packets: usize,
}

impl Default for DecisionRule {
    fn default() -> DecisionRule {
        DecisionRule { threshold: 0.9, min_packets: 1 }
    }
}

impl DecisionRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "decision threshold must lie in (0.5, 1], got {}",
                self.threshold
            )));
        }
        if self.min_packets == 0 {
            return Err(Error::Config("min_packets must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of labeling one flow packet by packet.
#[derive(Debug, Clone, Serialize)]
pub struct FlowDecision {
    /// Binary verdict at the final observed packet.
    pub verdict: usize,
    /// 1-based packet count at which the rule first fired, if it did.
    pub flagged_at: Option<usize>,
    /// Per-packet class probabilities, one entry per observed packet.
    pub probs: Vec<[f64; 2]>,
}

/// Streams a flow through a recurrent model, one packet row per step.
///
/// Flows recorded with zero packets still produce one step over the empty
/// row, matching batch evaluation.
pub fn stream_probabilities(model: &NetworkModel, matrix: &FlowMatrix) -> Result<Vec<[f64; 2]>> {
    let steps = (matrix.n_real_packets() as usize).max(1);
    let mut stream = LstmStream::new(model)?;
    let mut probs = Vec::with_capacity(steps);
    let mut x = Vec::new();
    for s in 0..steps {
        x.clear();
        x.extend(matrix.row(s).iter().map(|&v| v as f64));
        let (_, p) = stream.step(&x)?;
        probs.push(p);
    }
    Ok(probs)
}

/// First 1-based packet count at which the rule fires, if any.
///
/// Raising the threshold or the packet floor can only delay the flag.
pub fn decide(probs: &[[f64; 2]], rule: &DecisionRule) -> Result<Option<usize>> {
    rule.validate()?;
    for (i, p) in probs.iter().enumerate() {
        if i + 1 >= rule.min_packets && p[1] >= rule.threshold {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

/// Streams a flow and applies the decision rule to it.
pub fn label_flow(
    model: &NetworkModel,
    matrix: &FlowMatrix,
    rule: &DecisionRule,
) -> Result<FlowDecision> {
    let probs = stream_probabilities(model, matrix)?;
    let flagged_at = decide(&probs, rule)?;
    let last = probs.last().expect("at least one step");
    Ok(FlowDecision { verdict: usize::from(last[1] > last[0]), flagged_at, probs })
}

/// Detection quality as a function of packets observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetectionPoint {
    /// 1-based number of packets observed.
    pub packet: usize,
    /// Flows that are at least this long.
    pub n_flows: usize,
    /// Mean probability assigned to the true class at this point.
    pub mean_true_prob: f64,
    /// Fraction of flows whose argmax verdict is right at this point.
    pub accuracy: f64,
}

/// Per-packet aggregate quality over a labeled set.
///
/// A flow with `k` observed packets contributes to points `1..=k` only,
/// so later points average over the surviving longer flows.
pub fn early_detection_curve(
    model: &NetworkModel,
    samples: &[Sample],
) -> Result<Vec<EarlyDetectionPoint>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("early detection curve".into()));
    }
    let mut n_flows: Vec<usize> = Vec::new();
    let mut prob_sum: Vec<f64> = Vec::new();
    let mut hits: Vec<usize> = Vec::new();
    for sample in samples {
        let probs = stream_probabilities(model, &sample.matrix)?;
        let y = binary_label(sample.label);
        if probs.len() > n_flows.len() {
            n_flows.resize(probs.len(), 0);
            prob_sum.resize(probs.len(), 0.0);
            hits.resize(probs.len(), 0);
        }
        for (s, p) in probs.iter().enumerate() {
            n_flows[s] += 1;
            prob_sum[s] += p[y];
            let pred = usize::from(p[1] > p[0]);
            hits[s] += usize::from(pred == y);
        }
    }
    Ok((0..n_flows.len())
        .map(|s| EarlyDetectionPoint {
            packet: s + 1,
            n_flows: n_flows[s],
            mean_true_prob: prob_sum[s] / n_flows[s] as f64,
            accuracy: hits[s] as f64 / n_flows[s] as f64,
        })
        .collect())
}

/// Writes a curve as CSV with a fixed header.
pub fn curve_to_csv<W: Write>(points: &[EarlyDetectionPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["packet", "n_flows", "mean_true_prob", "accuracy"])?;
    for p in points {
        w.write_record([
            p.packet.to_string(),
            p.n_flows.to_string(),
            format!("{:.6}", p.mean_true_prob),
            format!("{:.6}", p.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{MATRIX_COLS, MATRIX_ROWS};
    use crate::nn::{forward, input_for, Architecture, Mode, ModelInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flow(seed: u64, packets: u8) -> FlowMatrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0f32; MATRIX_ROWS * MATRIX_COLS];
        for row in 0..packets as usize {
            for col in 0..MATRIX_COLS {
                data[row * MATRIX_COLS + col] = r.random::<f32>();
            }
        }
        FlowMatrix::new(data, packets).unwrap()
    }

    fn lstm_model(seed: u64) -> NetworkModel {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        NetworkModel::init(Architecture::lstm(MATRIX_COLS, 12, &[8, 2]), &mut r).unwrap()
    }

    #[test]
    fn streamed_probabilities_match_batch_prefixes() {
        let model = lstm_model(3);
        for (i, packets) in [1u8, 4, 9].into_iter().enumerate() {
            let m = flow(10 + i as u64, packets);
            let streamed = stream_probabilities(&model, &m).unwrap();
            assert_eq!(streamed.len(), packets as usize);
            let input = input_for(model.arch(), &m);
            let (out, _) = forward(&model, &[input], Mode::Eval, None).unwrap();
            for (s, p) in streamed.iter().enumerate() {
                for c in 0..2 {
                    assert!(
                        (p[c] - out.probs[0][s][c]).abs() <= 1e-10,
                        "step {s} class {c}: {} vs {}",
                        p[c],
                        out.probs[0][s][c]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_packet_flows_still_get_one_verdict() {
        let model = lstm_model(4);
        let m = FlowMatrix::zeroed();
        let probs = stream_probabilities(&model, &m).unwrap();
        assert_eq!(probs.len(), 1);
    }

    #[test]
    fn grid_models_cannot_stream() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let model =
            NetworkModel::init(Architecture::cnn(100, 200, &[1], &[4, 2]), &mut r).unwrap();
        let m = flow(6, 3);
        assert!(stream_probabilities(&model, &m).is_err());
    }

    #[test]
    fn decide_fires_at_the_first_qualifying_packet() {
        let probs = vec![[0.4, 0.6], [0.05, 0.95], [0.02, 0.98], [0.6, 0.4]];
        let rule = DecisionRule { threshold: 0.9, min_packets: 1 };
        assert_eq!(decide(&probs, &rule).unwrap(), Some(2));
        // the packet floor pushes the flag past an early crossing
        let rule = DecisionRule { threshold: 0.9, min_packets: 3 };
        assert_eq!(decide(&probs, &rule).unwrap(), Some(3));
        let rule = DecisionRule { threshold: 0.99, min_packets: 1 };
        assert_eq!(decide(&probs, &rule).unwrap(), None);
    }

    #[test]
    fn stricter_rules_never_flag_earlier() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = r.random_range(1..=30);
            let probs: Vec<[f64; 2]> = (0..n)
                .map(|_| {
                    let p = r.random::<f64>();
                    [1.0 - p, p]
                })
                .collect();
            let mut t1 = 0.5 + 0.5 * r.random::<f64>();
            let mut t2 = 0.5 + 0.5 * r.random::<f64>();
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            let (t1, t2) = (t1.clamp(0.501, 1.0), t2.clamp(0.501, 1.0));
            let m1 = r.random_range(1..=10);
            let m2 = m1 + r.random_range(0..=10);
            let loose = decide(&probs, &DecisionRule { threshold: t1, min_packets: m1 }).unwrap();
            let strict = decide(&probs, &DecisionRule { threshold: t2, min_packets: m2 }).unwrap();
            match (loose, strict) {
                (None, Some(_)) => panic!("stricter rule flagged where looser did not"),
                (Some(a), Some(b)) => assert!(a <= b, "loose flagged at {a}, strict at {b}"),
                _ => {}
            }
        }
    }

    #[test]
    fn invalid_rules_are_rejected() {
        let probs = vec![[0.5, 0.5]];
        for threshold in [0.5, 0.3, 1.1] {
            let rule = DecisionRule { threshold, min_packets: 1 };
            assert!(decide(&probs, &rule).is_err(), "threshold {threshold}");
        }
        let rule = DecisionRule { threshold: 0.9, min_packets: 0 };
        assert!(decide(&probs, &rule).is_err());
    }

    #[test]
    fn label_flow_reports_last_step_verdict() {
        let model = lstm_model(11);
        let m = flow(12, 5);
        let rule = DecisionRule { threshold: 0.501, min_packets: 1 };
        let decision = label_flow(&model, &m, &rule).unwrap();
        assert_eq!(decision.probs.len(), 5);
        let last = decision.probs[4];
        assert_eq!(decision.verdict, usize::from(last[1] > last[0]));
        if let Some(at) = decision.flagged_at {
            assert!(decision.probs[at - 1][1] >= rule.threshold);
            for p in &decision.probs[..at - 1] {
                assert!(p[1] < rule.threshold);
            }
        }
    }

    #[test]
    fn curve_counts_only_flows_long_enough() {
        // all-zero parameters give exactly even verdicts everywhere, so the
        // curve reduces to countable quantities
        let model = NetworkModel::zeroed(Architecture::lstm(MATRIX_COLS, 4, &[3, 2])).unwrap();
        let samples = vec![
            Sample { matrix: flow(20, 2), label: 0 },
            Sample { matrix: flow(21, 4), label: 1 },
            Sample { matrix: flow(22, 4), label: 1 },
        ];
        let curve = early_detection_curve(&model, &samples).unwrap();
        assert_eq!(curve.len(), 4);
        assert_eq!(curve[0].n_flows, 3);
        assert_eq!(curve[1].n_flows, 3);
        assert_eq!(curve[2].n_flows, 2);
        assert_eq!(curve[3].n_flows, 2);
        for point in &curve {
            assert!((point.mean_true_prob - 0.5).abs() < 1e-12);
        }
        // even probabilities predict benign, so accuracy is the benign share
        assert!((curve[0].accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(curve[2].accuracy, 0.0);
    }

    #[test]
    fn curve_serializes_to_csv() {
        let points = vec![
            EarlyDetectionPoint { packet: 1, n_flows: 3, mean_true_prob: 0.5, accuracy: 1.0 / 3.0 },
            EarlyDetectionPoint { packet: 2, n_flows: 2, mean_true_prob: 0.25, accuracy: 0.0 },
        ];
        let mut buf = Vec::new();
        curve_to_csv(&points, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "packet,n_flows,mean_true_prob,accuracy\n\
             1,3,0.500000,0.333333\n\
             2,2,0.250000,0.000000\n"
        );
    }

    #[test]
    fn empty_curve_input_is_rejected() {
        let model = lstm_model(30);
        assert!(matches!(
            early_detection_curve(&model, &[]),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn streamed_and_input_builder_step_counts_agree() {
        let model = lstm_model(31);
        for packets in [0u8, 1, 7] {
            let mut m = flow(40 + packets as u64, packets.max(1));
            if packets == 0 {
                m = FlowMatrix::zeroed();
            }
            let streamed = stream_probabilities(&model, &m).unwrap();
            match input_for(model.arch(), &m) {
                ModelInput::Sequence(t) => assert_eq!(t.shape()[0], streamed.len()),
                _ => panic!("expected a sequence input"),
            }
        }
    }
}
