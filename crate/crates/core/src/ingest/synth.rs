//! Seeded synthetic traffic corpora.
//!
//! Every attack class plants a byte pattern at class-specific columns of
//! each real packet row. Benign rows carry the same background plus the
//! same number of high bytes at random positions, so total byte energy is
//! uninformative and a detector has to key on the pattern locations. No
//! single byte separates the classes reliably: pattern bytes only appear
//! with probability [`SyntheticSpec::presence`] and benign distractors can
//! land anywhere.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{
    FlowMatrix, LabelCatalog, LabeledDataset, Provenance, Sample, MATRIX_COLS, MATRIX_ROWS,
};

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Total classes including benign (so `2` = benign + one attack).
    pub classes: u32,
    /// Flows generated for every class.
    pub flows_per_class: u32,
    /// Benign flow count when it should exceed the per-class count, as in
    /// captures where benign traffic dominates; `None` means
    /// `flows_per_class`.
    pub benign_flows: Option<u32>,
    /// Real packets per flow, drawn uniformly from this inclusive range.
    pub packets_min: u8,
    pub packets_max: u8,
    /// Columns carrying each attack pattern.
    pub signature_cols: usize,
    /// Probability that a given pattern byte is written on a given row.
    pub presence: f64,
    /// High-amplitude bytes placed at random columns of every real row.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            flows_per_class: 100,
            benign_flows: None,
            packets_min: 8,
            packets_max: 20,
            signature_cols: 40,
            presence: 0.8,
            distractors: 24,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.flows_per_class == 0 {
            return Err(Error::Config("flows_per_class must be positive".into()));
        }
        if self.benign_flows == Some(0) {
            return Err(Error::Config("benign_flows must be positive when set".into()));
        }
        if self.packets_min == 0
            || self.packets_min > self.packets_max
            || self.packets_max as usize > MATRIX_ROWS
        {
            return Err(Error::Config(format!(
                "packet range {}..={} invalid (need 1..=100, min <= max)",
                self.packets_min, self.packets_max
            )));
        }
        if self.signature_cols == 0 || self.signature_cols > MATRIX_COLS {
            return Err(Error::Config("signature_cols must be in 1..=200".into()));
        }
        if !(0.0..=1.0).contains(&self.presence) {
            return Err(Error::Config("presence must be in [0, 1]".into()));
        }
        if self.distractors > MATRIX_COLS {
            return Err(Error::Config("distractors must be at most 200".into()));
        }
        Ok(())
    }
}

/// Generates a balanced labeled corpus: `flows_per_class` matrices for
/// benign and for each attack class, fully determined by the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // class signatures are drawn first so they depend only on the seed
    let signatures: Vec<Vec<(usize, u8)>> = (1..spec.classes)
        .map(|_| {
            index_sample(&mut rng, MATRIX_COLS, spec.signature_cols)
                .into_iter()
                .map(|col| (col, rng.random_range(160..=255u16) as u8))
                .collect()
        })
        .collect();

    let mut catalog = LabelCatalog::benign_only();
    for c in 1..spec.classes {
        catalog.intern(&format!("attack-{c}"));
    }

    let mut samples = Vec::with_capacity((spec.classes * spec.flows_per_class) as usize);
    for class in 0..spec.classes {
        let signature = if class == 0 { None } else { Some(&signatures[class as usize - 1]) };
        let count =
            if class == 0 { spec.benign_flows.unwrap_or(spec.flows_per_class) } else { spec.flows_per_class };
        for _ in 0..count {
            samples.push(Sample {
                matrix: synth_matrix(spec, signature, &mut rng),
                label: class,
            });
        }
    }

    Ok(LabeledDataset {
        samples,
        catalog,
        provenance: Provenance::seeded(
            format!(
                "synthetic classes={} flows_per_class={}",
                spec.classes, spec.flows_per_class
            ),
            spec.seed,
        ),
    })
}

fn synth_matrix(
    spec: &SyntheticSpec,
    signature: Option<&Vec<(usize, u8)>>,
    rng: &mut ChaCha8Rng,
) -> FlowMatrix {
    let n_pkts = rng.random_range(spec.packets_min..=spec.packets_max);
    // distractors stay off the pattern columns, and benign rows draw an
    // extra bright count from the same presence process the pattern uses,
    // so the bright-byte count per row is distributed identically across
    // classes and only the pattern positions carry signal
    let free_cols: Vec<usize> = match signature {
        Some(sig) => {
            let mut used = [false; MATRIX_COLS];
            for &(col, _) in sig {
                used[col] = true;
            }
            (0..MATRIX_COLS).filter(|&c| !used[c]).collect()
        }
        None => (0..MATRIX_COLS).collect(),
    };
    let mut m = FlowMatrix::zeroed();
    for r in 0..n_pkts as usize {
        let mut row = [0u8; MATRIX_COLS];
        rng.fill(&mut row[..]);
        for b in row.iter_mut() {
            *b %= 49; // low background noise
        }
        let bright = match signature {
            None => {
                let compensation = (0..spec.signature_cols)
                    .filter(|_| rng.random::<f64>() < spec.presence)
                    .count();
                (spec.distractors + compensation).min(free_cols.len())
            }
            Some(_) => spec.distractors.min(free_cols.len()),
        };
        for idx in index_sample(rng, free_cols.len(), bright) {
            row[free_cols[idx]] = rng.random_range(128..=255u16) as u8;
        }
        if let Some(sig) = signature {
            for &(col, byte) in sig {
                if rng.random::<f64>() < spec.presence {
                    let jitter = rng.random_range(-16i16..=16);
                    row[col] = (byte as i16 + jitter).clamp(0, 255) as u8;
                }
            }
        }
        let cells = m.row_mut(r);
        for (j, &b) in row.iter().enumerate() {
            cells[j] = b as f32 / 255.0;
        }
    }
    m.set_n_real_packets(n_pkts);
    m
}
