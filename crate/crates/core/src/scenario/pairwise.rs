//! One known attack class measured against each remaining class as a
//! zero-day, with an expansion update in between.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::{continual_learn, fisher_diagonal};
use crate::error::{Error, Result};
use crate::nn::{evaluate, Metrics};
use crate::sampling::{build_task_dataset, SamplePools};

use super::{arch_for, subseed, train_initial, ClassBank, ScenarioConfig};

/// One zero-day class measured around its update.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PairwiseCell {
    pub zero_day: String,
    /// The zero-day eval set against the initial model.
    pub before_zero_day: Metrics,
    /// The zero-day eval set after its expansion update.
    pub after_zero_day: Metrics,
    /// The known-class eval set after that update.
    pub after_initial: Metrics,
    pub phase2_used: bool,
}

/// Results of the pairwise scenario.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PairwiseReport {
    pub known: String,
    /// The known-class eval set against the initial model.
    pub initial_known: Metrics,
    /// One cell per other attack class, in catalog order; the known class
    /// pairs only with the others, never with itself.
    pub cells: Vec<PairwiseCell>,
}

/// Trains an initial detector on one known class, then updates a copy of
/// it once per remaining class and measures both sides of each update.
/// Every pair starts from the same initial model and fresh sample pools.
pub fn scenario_pairwise(cfg: &ScenarioConfig) -> Result<PairwiseReport> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let bank = ClassBank::new(&data, cfg.eval_per_class, subseed(cfg.seed, "bank"))?;
    let known = bank.resolve_known(&cfg.known)?;
    let others: Vec<_> = bank.attack_ids().into_iter().filter(|&c| c != known).collect();
    if others.is_empty() {
        return Err(Error::Config("the pairwise scenario needs at least 2 attack classes".into()));
    }

    let mut draw_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "init-draw"));
    let initial_set = bank.initial_train_set(known, &mut draw_rng)?;
    let model = train_initial(
        arch_for(cfg.model, cfg.preset),
        &initial_set,
        cfg.initial_epochs,
        cfg.initial_batch,
        subseed(cfg.seed, "init"),
    )?;
    let fisher = fisher_diagonal(&model, &initial_set)?;
    let initial_known = evaluate(&model, &bank.eval_set(known)?)?;

    let mut cells = Vec::new();
    for z in others {
        let before_zero_day = evaluate(&model, &bank.eval_set(z)?)?;

        // fresh pools per pair: the pair's history is the known class and
        // benign traffic, nothing from earlier pairs
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &format!("pair-{z}")));
        let mut pools = SamplePools::new(cfg.pool_cap);
        pools.insert_all(&bank.train_flows(known)?, &mut rng);
        pools.insert_all(&bank.train_flows(0)?, &mut rng);

        let mut new_data = bank.draw_train(z, cfg.update_flows, &mut rng)?;
        new_data.extend(bank.draw_train(0, cfg.update_flows, &mut rng)?);
        let mix = build_task_dataset(&mut pools, &new_data, z, &mut rng)?;

        let mut ccfg = cfg.continual;
        ccfg.seed = subseed(cfg.seed, &format!("update-{z}"));
        let outcome = continual_learn(&model, &fisher, &mix.samples, &ccfg)?;
        let updated = outcome.model();

        cells.push(PairwiseCell {
            zero_day: bank.class_name(z).to_string(),
            before_zero_day,
            after_zero_day: evaluate(updated, &bank.eval_set(z)?)?,
            after_initial: evaluate(updated, &bank.eval_set(known)?)?,
            phase2_used: outcome.phase2_used,
        });
    }
    Ok(PairwiseReport { known: bank.class_name(known).to_string(), initial_known, cells })
}
