//! End-to-end experiment harness.
//!
//! Each scenario starts from a labeled dataset (a container file or a
//! synthetic spec), carves out per-class train and eval splits, trains an
//! initial detector on one known attack class, and then exercises one of
//! the update paths:
//!
//! * [`scenario_pairwise`]: for every other class, measure it as a
//!   zero-day, run one expansion update on a small batch, and measure
//!   both the zero-day and the original known class afterwards.
//! * [`scenario_sequential`]: feed the remaining classes one at a time,
//!   compressing the expanded model back to its original architecture
//!   after every step, averaged over several class orders.
//! * [`scenario_federated`]: one agent per remaining class distills into
//!   a shared main model through the asynchronous server.
//! * [`scenario_early_detection`]: train the recurrent detector and
//!   measure how accuracy grows with the number of packets seen.
//!
//! All randomness descends from one base seed through [`subseed`], so a
//! fixed seed reproduces a run bit for bit (the federated scenario needs
//! deterministic scheduling turned on as well). Input dataset files are
//! never modified.

mod compress;
mod earlydet;
mod federated;
mod pairwise;
mod report;
mod sequential;

pub use compress::{argmax_agreement, compress_model, CompressConfig};
pub use earlydet::{accuracy_at, scenario_early_detection, EarlyDetectionReport};
pub use federated::{scenario_federated, FederatedReport};
pub use pairwise::{scenario_pairwise, PairwiseCell, PairwiseReport};
pub use report::{
    federated_csv, pairwise_csv, sequential_csv, write_report_files, ReportEnvelope,
    METRICS_SCHEMA_VERSION,
};
pub use sequential::{scenario_sequential, SequentialReport, SequentialRun, SequentialStep};

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::ContinualConfig;
use crate::error::{Error, Result};
use crate::federated::FederatedConfig;
use crate::ingest::{
    dataset_from_path, generate_synthetic, LabelCatalog, LabelId, LabeledDataset, Sample,
    SyntheticSpec,
};
use crate::nn::{binary_label, fit, input_for, Architecture, FitConfig, NetworkModel, Penalties, TrainMask};

/// Which experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Pairwise,
    Sequential,
    Federated,
    EarlyDetection,
}

/// Detector family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    Lstm,
}

/// Network size. `Compact` keeps full scenario suites in the minutes
/// range on one core; `Full` mirrors the production-scale layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Compact,
    Full,
}

/// The architecture a scenario trains from scratch.
pub fn arch_for(kind: ModelKind, preset: ArchPreset) -> Architecture {
    use crate::ingest::{MATRIX_COLS, MATRIX_ROWS};
    match (kind, preset) {
        (ModelKind::Cnn, ArchPreset::Compact) => {
            Architecture::cnn(MATRIX_ROWS, MATRIX_COLS, &[2], &[16, 2])
        }
        (ModelKind::Cnn, ArchPreset::Full) => {
            Architecture::cnn(MATRIX_ROWS, MATRIX_COLS, &[8, 16], &[256, 128, 64, 2])
        }
        (ModelKind::Lstm, ArchPreset::Compact) => Architecture::lstm(MATRIX_COLS, 32, &[16, 2]),
        (ModelKind::Lstm, ArchPreset::Full) => {
            Architecture::lstm(MATRIX_COLS, 1024, &[512, 256, 128, 64, 2])
        }
    }
}

/// Where the flows come from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File { path: PathBuf },
}

impl DataSource {
    /// Loads or generates the dataset. Never writes anything.
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::File { path } => dataset_from_path(path),
        }
    }
}

/// Everything a scenario run needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub data: DataSource,
    pub model: ModelKind,
    pub preset: ArchPreset,
    /// Known attack class the initial model is trained on; `None` picks
    /// the first attack class in the catalog. Ignored by early-detection,
    /// which trains on every class at once.
    pub known: Option<String>,
    /// Fresh flows of the new class per update.
    pub update_flows: usize,
    /// Held-out flows per class in every evaluation set.
    pub eval_per_class: usize,
    /// Class orders averaged by the sequential scenario.
    pub permutations: usize,
    /// Reservoir capacity per class in the update-sampling pools.
    pub pool_cap: usize,
    pub initial_epochs: usize,
    pub initial_batch: usize,
    pub continual: ContinualConfig,
    pub federated: FederatedConfig,
    pub compress: CompressConfig,
    /// Serializes federated scheduling so reruns are bit-identical.
    pub deterministic: bool,
    pub seed: u64,
    /// Metric and checkpoint files land here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            kind: ScenarioKind::Pairwise,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            model: ModelKind::Cnn,
            preset: ArchPreset::Compact,
            known: None,
            update_flows: 128,
            eval_per_class: 60,
            permutations: 3,
            pool_cap: 1000,
            initial_epochs: 50,
            initial_batch: 32,
            continual: ContinualConfig::default(),
            federated: FederatedConfig::default(),
            compress: CompressConfig::default(),
            deterministic: true,
            seed: 0,
            out_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if let DataSource::File { path } = &self.data {
            if !path.exists() {
                return Err(Error::Config(format!("dataset file {} not found", path.display())));
            }
        }
        if self.update_flows == 0 {
            return Err(Error::Config("update_flows must be at least 1".into()));
        }
        if self.eval_per_class == 0 {
            return Err(Error::Config("eval_per_class must be at least 1".into()));
        }
        if self.permutations == 0 {
            return Err(Error::Config("permutations must be at least 1".into()));
        }
        if self.initial_epochs == 0 || self.initial_batch == 0 {
            return Err(Error::Config("initial training needs epochs >= 1 and batch >= 1".into()));
        }
        Ok(())
    }
}

/// Derives an independent stream seed from the base seed and a role tag
/// (FNV-1a over the tag bytes, folded into the base).
pub fn subseed(base: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-class train and eval splits over one dataset.
///
/// Every class keeps `eval_per_class` held-out flows, except benign which
/// keeps `eval_per_class` times the attack-class count so that union
/// zero-day sets stay balanced without reusing attack flows. Held-out
/// flows never enter training sets.
#[derive(Debug, Clone)]
pub struct ClassBank {
    catalog: LabelCatalog,
    train: BTreeMap<LabelId, Vec<Sample>>,
    eval: BTreeMap<LabelId, Vec<Sample>>,
    eval_per_class: usize,
}

impl ClassBank {
    pub fn new(dataset: &LabeledDataset, eval_per_class: usize, seed: u64) -> Result<ClassBank> {
        dataset.validate_labels()?;
        let mut by_class: BTreeMap<LabelId, Vec<Sample>> = BTreeMap::new();
        for s in &dataset.samples {
            by_class.entry(s.label).or_default().push(s.clone());
        }
        let n_attacks = by_class.keys().filter(|&&c| c != 0).count();
        if n_attacks == 0 {
            return Err(Error::EmptyDataset("dataset has no attack classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = BTreeMap::new();
        let mut eval = BTreeMap::new();
        for (class, mut flows) in by_class {
            let reserve = if class == 0 { eval_per_class * n_attacks } else { eval_per_class };
            if flows.len() <= reserve {
                let name = dataset.catalog.name(class).unwrap_or("?");
                return Err(Error::EmptyDataset(format!(
                    "class {name} has {} flows but needs more than {reserve} \
                     to hold out an eval split",
                    flows.len()
                )));
            }
            flows.shuffle(&mut rng);
            let held: Vec<Sample> = flows.split_off(flows.len() - reserve);
            eval.insert(class, held);
            train.insert(class, flows);
        }
        Ok(ClassBank { catalog: dataset.catalog.clone(), train, eval, eval_per_class })
    }

    pub fn catalog(&self) -> &LabelCatalog {
        &self.catalog
    }

    /// Attack class ids in catalog order.
    pub fn attack_ids(&self) -> Vec<LabelId> {
        self.train.keys().copied().filter(|&c| c != 0).collect()
    }

    pub fn class_name(&self, class: LabelId) -> &str {
        self.catalog.name(class).unwrap_or("?")
    }

    /// Resolves a class name, or picks the first attack class.
    pub fn resolve_known(&self, known: &Option<String>) -> Result<LabelId> {
        match known {
            Some(name) => {
                let id = self
                    .catalog
                    .id(name)
                    .ok_or_else(|| Error::Config(format!("unknown class name {name:?}")))?;
                if id == 0 {
                    return Err(Error::Config("the known class must be an attack class".into()));
                }
                Ok(id)
            }
            None => self
                .attack_ids()
                .first()
                .copied()
                .ok_or_else(|| Error::EmptyDataset("no attack classes".into())),
        }
    }

    fn train_pool(&self, class: LabelId) -> Result<&[Sample]> {
        self.train
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no flows for class id {class}")))
    }

    /// `n` training flows of `class`, sampled without replacement.
    pub fn draw_train(&self, class: LabelId, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let pool = self.train_pool(class)?;
        if pool.len() < n {
            return Err(Error::EmptyPool {
                pool: self.class_name(class).to_string(),
                needed: n - pool.len(),
            });
        }
        let idx = rand::seq::index::sample(rng, pool.len(), n);
        Ok(idx.iter().map(|i| pool[i].clone()).collect())
    }

    /// All training flows of `class`.
    pub fn train_flows(&self, class: LabelId) -> Result<Vec<Sample>> {
        Ok(self.train_pool(class)?.to_vec())
    }

    /// Balanced initial training set: every training flow of the known
    /// class plus as many benign training flows.
    pub fn initial_train_set(&self, known: LabelId, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let mut set = self.train_flows(known)?;
        let benign = self.draw_train(0, set.len(), rng)?;
        set.extend(benign);
        set.shuffle(rng);
        Ok(set)
    }

    /// Balanced eval set for one attack class: its held-out flows plus an
    /// equal number of held-out benign flows.
    pub fn eval_set(&self, class: LabelId) -> Result<Vec<Sample>> {
        let attacks = self
            .eval
            .get(&class)
            .ok_or_else(|| Error::Config(format!("no eval split for class id {class}")))?;
        let benign = &self.eval[&0];
        let mut set = attacks.clone();
        set.extend_from_slice(&benign[..attacks.len().min(benign.len())]);
        Ok(set)
    }

    /// Balanced union eval set: the held-out flows of every listed class
    /// plus an equal number of held-out benign flows.
    pub fn union_eval_set(&self, classes: &[LabelId]) -> Result<Vec<Sample>> {
        let mut set = Vec::new();
        for &c in classes {
            if c == 0 {
                return Err(Error::Config("union eval sets take attack classes only".into()));
            }
            set.extend_from_slice(
                self.eval
                    .get(&c)
                    .ok_or_else(|| Error::Config(format!("no eval split for class id {c}")))?,
            );
        }
        let benign = &self.eval[&0];
        let want = set.len();
        if benign.len() < want {
            return Err(Error::EmptyPool { pool: "benign eval".into(), needed: want - benign.len() });
        }
        set.extend_from_slice(&benign[..want]);
        Ok(set)
    }

    /// Every held-out flow of every class, the whole-corpus eval set.
    pub fn full_eval_set(&self) -> Vec<Sample> {
        self.eval.values().flatten().cloned().collect()
    }

    /// Every training flow of every class.
    pub fn full_train_set(&self, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut set: Vec<Sample> = self.train.values().flatten().cloned().collect();
        set.shuffle(rng);
        set
    }

    pub fn eval_per_class(&self) -> usize {
        self.eval_per_class
    }
}

/// Trains a fresh model of `arch` on `set` with plain cross entropy.
pub fn train_initial(
    arch: Architecture,
    set: &[Sample],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<NetworkModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NetworkModel::init(arch, &mut rng)?;
    let inputs: Vec<_> = set.iter().map(|s| input_for(model.arch(), &s.matrix)).collect();
    let labels: Vec<usize> = set.iter().map(|s| binary_label(s.label)).collect();
    let cfg = FitConfig {
        epochs,
        batch_size,
        seed: seed.wrapping_add(1),
        ..FitConfig::default()
    };
    let mask = TrainMask::all(model.n_params());
    fit(&mut model, &mask, &inputs, &labels, &Penalties::none(), &cfg)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(classes: u32, flows: u32, seed: u64) -> LabeledDataset {
        generate_synthetic(&SyntheticSpec {
            classes,
            flows_per_class: flows,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn subseed_streams_differ_by_tag_and_base() {
        let a = subseed(7, "bank");
        let b = subseed(7, "init");
        let c = subseed(8, "bank");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, subseed(7, "bank"));
    }

    #[test]
    fn bank_holds_out_eval_flows_and_keeps_balance() {
        let data = tiny_dataset(3, 40, 1);
        let bank = ClassBank::new(&data, 10, 9).unwrap();
        assert_eq!(bank.attack_ids(), vec![1, 2]);
        // benign reserve scales with the attack count
        assert_eq!(bank.eval[&0].len(), 20);
        assert_eq!(bank.eval[&1].len(), 10);
        assert_eq!(bank.train[&1].len(), 30);

        let set = bank.eval_set(1).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(set.iter().filter(|s| s.label == 0).count(), 10);

        let union = bank.union_eval_set(&[1, 2]).unwrap();
        assert_eq!(union.len(), 40);
        assert_eq!(union.iter().filter(|s| s.label == 0).count(), 20);
    }

    #[test]
    fn eval_and_train_splits_are_disjoint() {
        let data = tiny_dataset(2, 30, 2);
        let bank = ClassBank::new(&data, 8, 3).unwrap();
        for class in [0u32, 1] {
            for held in &bank.eval[&class] {
                assert!(
                    !bank.train[&class].iter().any(|t| t.matrix.data() == held.matrix.data()),
                    "held-out flow found in the training split"
                );
            }
        }
    }

    #[test]
    fn draw_train_is_without_replacement() {
        let data = tiny_dataset(2, 30, 4);
        let bank = ClassBank::new(&data, 5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let drawn = bank.draw_train(1, 25, &mut rng).unwrap();
        assert_eq!(drawn.len(), 25);
        for i in 0..drawn.len() {
            for j in i + 1..drawn.len() {
                assert_ne!(drawn[i].matrix.data(), drawn[j].matrix.data());
            }
        }
        assert!(matches!(
            bank.draw_train(1, 26, &mut rng),
            Err(Error::EmptyPool { needed: 1, .. })
        ));
    }

    #[test]
    fn small_classes_are_rejected_with_counts() {
        let data = tiny_dataset(2, 10, 6);
        let err = ClassBank::new(&data, 10, 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)), "got {err:?}");
    }

    #[test]
    fn resolve_known_accepts_names_and_defaults() {
        let data = tiny_dataset(3, 30, 7);
        let bank = ClassBank::new(&data, 5, 1).unwrap();
        assert_eq!(bank.resolve_known(&None).unwrap(), 1);
        assert_eq!(bank.resolve_known(&Some("attack-2".into())).unwrap(), 2);
        assert!(bank.resolve_known(&Some("benign".into())).is_err());
        assert!(bank.resolve_known(&Some("nope".into())).is_err());
    }

    #[test]
    fn initial_training_separates_an_easy_pair() {
        let data = tiny_dataset(2, 60, 8);
        let bank = ClassBank::new(&data, 15, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(8, "init-draw"));
        let set = bank.initial_train_set(1, &mut rng).unwrap();
        assert_eq!(set.len(), 90);
        let arch = Architecture::cnn(crate::ingest::MATRIX_ROWS, crate::ingest::MATRIX_COLS, &[1], &[8, 2]);
        let model = train_initial(arch, &set, 8, 16, 11).unwrap();
        let m = crate::nn::evaluate(&model, &bank.eval_set(1).unwrap()).unwrap();
        assert!(m.accuracy > 0.8, "initial model should separate the pair, got {}", m.accuracy);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = ScenarioConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.update_flows = 0;
        assert!(cfg.validate().is_err());
        cfg = ScenarioConfig::default();
        cfg.data = DataSource::File { path: PathBuf::from("/no/such/file.flwm") };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scenario_config_roundtrips_through_json() {
        let cfg = ScenarioConfig {
            kind: ScenarioKind::EarlyDetection,
            model: ModelKind::Lstm,
            known: Some("attack-1".into()),
            ..ScenarioConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("early-detection"), "kebab-case kind tag: {text}");
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // defaults fill gaps
        let sparse: ScenarioConfig = serde_json::from_str(r#"{"kind":"federated"}"#).unwrap();
        assert_eq!(sparse.kind, ScenarioKind::Federated);
        assert_eq!(sparse.update_flows, 128);
    }
}
