//! Balanced task construction from capped sample pools.
//!
//! Past traffic is kept in per-class pools with a fixed capacity; once a
//! pool is full, reservoir eviction keeps a uniform subsample of
//! everything ever inserted. When a new attack class arrives, the task
//! dataset mixes the fresh attack flows with an equal number of flows
//! drawn from every old attack pool and exactly as many benign flows as
//! attack flows in total. Training on such a mix rehearses old classes
//! while the new class is learned, without growing memory over time.
//!
//! On disk a pool set is a directory: one flow-matrix container per pool
//! plus `manifest.json` recording capacity and per-pool insert counters,
//! so eviction statistics survive a reload.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    dataset_from_path, dataset_to_path, LabelCatalog, LabelId, LabeledDataset, Provenance, Sample,
};

/// Default per-pool capacity.
pub const DEFAULT_POOL_CAP: usize = 5000;

#[derive(Debug, Clone, Default)]
struct Pool {
    samples: Vec<Sample>,
    /// Total inserts ever, drives reservoir eviction.
    seen: u64,
}

impl Pool {
    fn insert(&mut self, sample: Sample, cap: usize, rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.samples.len() < cap {
            self.samples.push(sample);
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < cap {
                self.samples[j as usize] = sample;
            }
        }
    }

    /// `n` samples: distinct ones when the pool is large enough, otherwise
    /// independent draws with replacement.
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        if n == 0 {
            return Vec::new();
        }
        if self.samples.len() >= n {
            rand::seq::index::sample(rng, self.samples.len(), n)
                .iter()
                .map(|i| self.samples[i].clone())
                .collect()
        } else {
            (0..n)
                .map(|_| self.samples[rng.random_range(0..self.samples.len())].clone())
                .collect()
        }
    }
}

/// Capped per-class history of labeled flows.
#[derive(Debug, Clone)]
pub struct SamplePools {
    benign: Pool,
    attacks: BTreeMap<LabelId, Pool>,
    cap: usize,
}

impl SamplePools {
    pub fn new(cap: usize) -> SamplePools {
        SamplePools { benign: Pool::default(), attacks: BTreeMap::new(), cap }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn insert(&mut self, sample: Sample, rng: &mut ChaCha8Rng) {
        let cap = self.cap;
        if sample.label == 0 {
            self.benign.insert(sample, cap, rng);
        } else {
            self.attacks.entry(sample.label).or_default().insert(sample, cap, rng);
        }
    }

    pub fn insert_all(&mut self, samples: &[Sample], rng: &mut ChaCha8Rng) {
        for s in samples {
            self.insert(s.clone(), rng);
        }
    }

    pub fn benign_len(&self) -> usize {
        self.benign.samples.len()
    }

    pub fn benign_seen(&self) -> u64 {
        self.benign.seen
    }

    /// Attack classes with at least one stored sample, ascending.
    pub fn attack_classes(&self) -> Vec<LabelId> {
        self.attacks.keys().copied().collect()
    }

    pub fn class_len(&self, class: LabelId) -> usize {
        if class == 0 {
            self.benign_len()
        } else {
            self.attacks.get(&class).map_or(0, |p| p.samples.len())
        }
    }

    pub fn total_len(&self) -> usize {
        self.benign_len() + self.attacks.values().map(|p| p.samples.len()).sum::<usize>()
    }
}

/// A balanced training mix for one new attack class.
#[derive(Debug, Clone)]
pub struct TaskMix {
    /// Shuffled samples, exactly half attack and half benign.
    pub samples: Vec<Sample>,
    pub new_class: LabelId,
    /// Flows per attack class in the mix.
    pub per_class: usize,
    /// Attack classes participating, the new one included.
    pub classes: Vec<LabelId>,
    /// Benign flows pulled from the pool to reach balance.
    pub benign_from_pool: usize,
    /// Fresh benign flows dropped because the batch was already over
    /// balance.
    pub benign_trimmed: usize,
}

/// Builds the balanced mix for `new_class` from fresh task data plus the
/// pools, then folds the fresh data into the pools.
///
/// `new_data` may contain only flows of the new class and benign flows.
/// With `t` attack classes total and `s` fresh attack flows, the mix holds
/// `s` flows drawn from each old class pool and exactly `t * s` benign
/// flows, topped up from or trimmed toward that target.
pub fn build_task_dataset(
    pools: &mut SamplePools,
    new_data: &[Sample],
    new_class: LabelId,
    rng: &mut ChaCha8Rng,
) -> Result<TaskMix> {
    if new_class == 0 {
        return Err(Error::Config("the new class in a task must be an attack class".into()));
    }
    let mut fresh_attacks = Vec::new();
    let mut fresh_benign = Vec::new();
    for s in new_data {
        if s.label == new_class {
            fresh_attacks.push(s.clone());
        } else if s.label == 0 {
            fresh_benign.push(s.clone());
        } else {
            return Err(Error::Config(format!(
                "task data for class {new_class} contains class {} flows",
                s.label
            )));
        }
    }
    if fresh_attacks.is_empty() {
        return Err(Error::EmptyDataset(format!("no flows of new class {new_class} in task data")));
    }

    let per_class = fresh_attacks.len();
    let old_classes: Vec<LabelId> =
        pools.attack_classes().into_iter().filter(|&c| c != new_class).collect();
    let t = old_classes.len() + 1;
    let benign_target = t * per_class;

    let mut samples = fresh_attacks.clone();
    for &class in &old_classes {
        samples.extend(pools.attacks[&class].draw(per_class, rng));
    }

    let mut benign_trimmed = 0usize;
    let mut benign_from_pool = 0usize;
    if fresh_benign.len() > benign_target {
        benign_trimmed = fresh_benign.len() - benign_target;
        let mut keep: Vec<usize> =
            rand::seq::index::sample(rng, fresh_benign.len(), benign_target).into_vec();
        keep.sort_unstable();
        samples.extend(keep.into_iter().map(|i| fresh_benign[i].clone()));
    } else {
        samples.extend(fresh_benign.iter().cloned());
        let shortfall = benign_target - fresh_benign.len();
        if shortfall > 0 {
            if pools.benign_len() == 0 {
                return Err(Error::EmptyPool { pool: "benign".into(), needed: shortfall });
            }
            samples.extend(pools.benign.draw(shortfall, rng));
            benign_from_pool = shortfall;
        }
    }

    use rand::seq::SliceRandom;
    samples.shuffle(rng);

    pools.insert_all(&fresh_attacks, rng);
    pools.insert_all(&fresh_benign, rng);

    let mut classes = old_classes;
    classes.push(new_class);
    classes.sort_unstable();
    Ok(TaskMix { samples, new_class, per_class, classes, benign_from_pool, benign_trimmed })
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    schema_version: u32,
    cap: usize,
    /// Class names indexed by label id, the shared catalog.
    labels: Vec<String>,
    pools: Vec<PoolEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    label: LabelId,
    seen: u64,
    file: String,
}

const MANIFEST: &str = "manifest.json";
const SCHEMA_VERSION: u32 = 1;

/// Writes the pool set under `dir` (created if missing). Pool label names
/// come from `catalog`.
pub fn save_pools(pools: &SamplePools, dir: &Path, catalog: &LabelCatalog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let write_pool = |label: LabelId, pool: &Pool| -> Result<PoolEntry> {
        if catalog.name(label).is_none() {
            return Err(Error::Config(format!("pool label {label} missing from catalog")));
        }
        let file = format!("pool-{label}.flwm");
        let ds = LabeledDataset {
            samples: pool.samples.clone(),
            catalog: catalog.clone(),
            provenance: Provenance::new("sample-pool"),
        };
        dataset_to_path(&ds, &dir.join(&file))?;
        Ok(PoolEntry { label, seen: pool.seen, file })
    };
    entries.push(write_pool(0, &pools.benign)?);
    for (&label, pool) in &pools.attacks {
        entries.push(write_pool(label, pool)?);
    }
    let manifest = PoolManifest {
        schema_version: SCHEMA_VERSION,
        cap: pools.cap,
        labels: catalog.names().to_vec(),
        pools: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

/// Reads a pool set written by [`save_pools`].
pub fn load_pools(dir: &Path) -> Result<(SamplePools, LabelCatalog)> {
    let manifest: PoolManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "pool manifest schema {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let catalog = LabelCatalog::from_names(manifest.labels)?;
    let mut pools = SamplePools::new(manifest.cap);
    for entry in &manifest.pools {
        let ds = dataset_from_path(&dir.join(&entry.file))?;
        for s in &ds.samples {
            if s.label != entry.label {
                return Err(Error::Config(format!(
                    "pool file {} holds class {} flows, manifest says {}",
                    entry.file, s.label, entry.label
                )));
            }
        }
        if entry.label == 0 {
            pools.benign = Pool { samples: ds.samples, seen: entry.seen };
        } else {
            pools.attacks.insert(entry.label, Pool { samples: ds.samples, seen: entry.seen });
        }
    }
    Ok((pools, catalog))
}
