//! Trains the recurrent detector and measures how detection quality
//! grows with the number of packets seen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{evaluate, Metrics, NetworkModel};
use crate::seqlabel::{early_detection_curve, EarlyDetectionPoint};

use super::{arch_for, subseed, train_initial, ClassBank, ModelKind, ScenarioConfig};

/// Results of the early-detection scenario.
#[derive(Debug, serde::Serialize)]
pub struct EarlyDetectionReport {
    /// Per-prefix-length quality over the whole eval split.
    pub curve: Vec<EarlyDetectionPoint>,
    /// Whole-flow metrics on the same eval split.
    pub full_flow: Metrics,
    pub n_train: usize,
    pub n_eval: usize,
    #[serde(skip)]
    pub model: NetworkModel,
}

/// Mean accuracy over flows with at least `packet` packets, if any flow
/// is that long.
pub fn accuracy_at(curve: &[EarlyDetectionPoint], packet: usize) -> Option<f64> {
    curve.iter().find(|p| p.packet == packet).map(|p| p.accuracy)
}

/// Trains the recurrent detector on every class at once (benign against
/// all attacks) and evaluates it packet by packet on the held-out split.
pub fn scenario_early_detection(cfg: &ScenarioConfig) -> Result<EarlyDetectionReport> {
    cfg.validate()?;
    if cfg.model != ModelKind::Lstm {
        return Err(Error::Config(
            "early detection labels flows packet by packet and needs the lstm model".into(),
        ));
    }
    let data = cfg.data.load()?;
    let bank = ClassBank::new(&data, cfg.eval_per_class, subseed(cfg.seed, "bank"))?;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "init-draw"));
    let train = bank.full_train_set(&mut draw_rng);
    let eval = bank.full_eval_set();

    let model = train_initial(
        arch_for(cfg.model, cfg.preset),
        &train,
        cfg.initial_epochs,
        cfg.initial_batch,
        subseed(cfg.seed, "init"),
    )?;
    let curve = early_detection_curve(&model, &eval)?;
    let full_flow = evaluate(&model, &eval)?;
    Ok(EarlyDetectionReport {
        curve,
        full_flow,
        n_train: train.len(),
        n_eval: eval.len(),
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SyntheticSpec;
    use crate::scenario::{DataSource, ScenarioKind};

    fn tiny_cfg(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            kind: ScenarioKind::EarlyDetection,
            model: ModelKind::Lstm,
            data: DataSource::Synthetic(SyntheticSpec {
                classes: 2,
                flows_per_class: 30,
                seed: seed ^ 0x77,
                ..SyntheticSpec::default()
            }),
            eval_per_class: 6,
            initial_epochs: 2,
            initial_batch: 16,
            seed,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn curve_covers_the_eval_packet_range() {
        let report = scenario_early_detection(&tiny_cfg(1)).unwrap();
        assert_eq!(report.n_eval, 12);
        assert!(!report.curve.is_empty());
        // flows carry 8..=20 real packets, so the first point sees all of
        // them and the curve never extends past the longest flow
        assert_eq!(report.curve[0].packet, 1);
        assert_eq!(report.curve[0].n_flows, 12);
        assert!(report.curve.len() <= 20);
        assert!(accuracy_at(&report.curve, 1).is_some());
        assert!(accuracy_at(&report.curve, 99).is_none());
    }

    #[test]
    fn the_grid_detector_is_rejected() {
        let mut cfg = tiny_cfg(2);
        cfg.model = ModelKind::Cnn;
        assert!(matches!(scenario_early_detection(&cfg), Err(Error::Config(_))));
    }
}
