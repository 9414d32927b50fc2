//! Classes arriving one at a time, with the model compressed back to its
//! original architecture after every expansion update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::{continual_learn, fisher_diagonal};
use crate::error::{Error, Result};
use crate::ingest::LabelId;
use crate::nn::evaluate;
use crate::sampling::{build_task_dataset, SamplePools};

use super::{
    arch_for, argmax_agreement, compress_model, subseed, train_initial, ClassBank, ScenarioConfig,
};

/// One class learned during one pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SequentialStep {
    /// 1-based position in the pass.
    pub step: usize,
    pub class: String,
    /// Accuracy on this class's eval set before its update.
    pub before_zero_day: f64,
    /// Accuracy on this class's eval set after update and compression.
    pub after_zero_day: f64,
    /// Accuracy on the union eval set of everything learned so far,
    /// this class included.
    pub known_after: f64,
    /// Argmax agreement between the compressed student and the expanded
    /// teacher on the update mix.
    pub teacher_agreement: f64,
    pub phase2_used: bool,
}

/// One full pass over a class order.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SequentialRun {
    pub order: Vec<String>,
    pub steps: Vec<SequentialStep>,
}

/// Results of the sequential scenario.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SequentialReport {
    pub known: String,
    /// Accuracy of the initial model on the known-class eval set.
    pub initial_known_accuracy: f64,
    pub runs: Vec<SequentialRun>,
    /// Known-set accuracy averaged over runs; entry 0 is the initial
    /// model, entry i the state after step i.
    pub mean_known_after: Vec<f64>,
    /// Zero-day accuracy after each step, averaged over runs.
    pub mean_after_zero_day: Vec<f64>,
}

/// Feeds the remaining classes to the detector one at a time. Each step
/// samples fresh flows of the arriving class, builds a balanced mix from
/// the pools, runs an expansion update, distills the expanded model back
/// into the original architecture, and re-measures the growing known set.
/// The whole pass repeats over several seeded class orders.
pub fn scenario_sequential(cfg: &ScenarioConfig) -> Result<SequentialReport> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let bank = ClassBank::new(&data, cfg.eval_per_class, subseed(cfg.seed, "bank"))?;
    let known = bank.resolve_known(&cfg.known)?;
    let others: Vec<_> = bank.attack_ids().into_iter().filter(|&c| c != known).collect();
    if others.len() < 2 {
        return Err(Error::Config("the sequential scenario needs at least 3 attack classes".into()));
    }
    let arch = arch_for(cfg.model, cfg.preset);

    let mut draw_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "init-draw"));
    let initial_set = bank.initial_train_set(known, &mut draw_rng)?;
    let initial = train_initial(
        arch.clone(),
        &initial_set,
        cfg.initial_epochs,
        cfg.initial_batch,
        subseed(cfg.seed, "init"),
    )?;
    let initial_fisher = fisher_diagonal(&initial, &initial_set)?;
    let initial_known_accuracy = evaluate(&initial, &bank.eval_set(known)?)?.accuracy;

    let mut runs = Vec::new();
    for p in 0..cfg.permutations {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &format!("perm-{p}")));
        let mut order = others.clone();
        order.shuffle(&mut rng);

        let mut model = initial.clone();
        let mut fisher = initial_fisher.clone();
        let mut pools = SamplePools::new(cfg.pool_cap);
        pools.insert_all(&bank.train_flows(known)?, &mut rng);
        pools.insert_all(&bank.train_flows(0)?, &mut rng);
        let mut learned: Vec<LabelId> = vec![known];

        let mut steps = Vec::new();
        for (i, &z) in order.iter().enumerate() {
            let before_zero_day = evaluate(&model, &bank.eval_set(z)?)?.accuracy;

            let mut new_data = bank.draw_train(z, cfg.update_flows, &mut rng)?;
            new_data.extend(bank.draw_train(0, cfg.update_flows, &mut rng)?);
            let mix = build_task_dataset(&mut pools, &new_data, z, &mut rng)?;

            let mut ccfg = cfg.continual;
            ccfg.seed = subseed(cfg.seed, &format!("update-{p}-{i}"));
            let outcome = continual_learn(&model, &fisher, &mix.samples, &ccfg)?;

            let mut kcfg = cfg.compress;
            kcfg.seed = subseed(cfg.seed, &format!("compress-{p}-{i}"));
            let student =
                compress_model(&outcome.network, &arch, Some(&model), &mix.samples, &kcfg)?;
            let teacher_agreement = argmax_agreement(&student, outcome.model(), &mix.samples)?;

            model = student;
            fisher = fisher_diagonal(&model, &mix.samples)?;
            learned.push(z);

            steps.push(SequentialStep {
                step: i + 1,
                class: bank.class_name(z).to_string(),
                before_zero_day,
                after_zero_day: evaluate(&model, &bank.eval_set(z)?)?.accuracy,
                known_after: evaluate(&model, &bank.union_eval_set(&learned)?)?.accuracy,
                teacher_agreement,
                phase2_used: outcome.phase2_used,
            });
        }
        runs.push(SequentialRun {
            order: order.iter().map(|&c| bank.class_name(c).to_string()).collect(),
            steps,
        });
    }

    let n_steps = others.len();
    let mut mean_known_after = vec![initial_known_accuracy];
    let mut mean_after_zero_day = Vec::new();
    for i in 0..n_steps {
        let k: f64 = runs.iter().map(|r| r.steps[i].known_after).sum();
        let z: f64 = runs.iter().map(|r| r.steps[i].after_zero_day).sum();
        mean_known_after.push(k / runs.len() as f64);
        mean_after_zero_day.push(z / runs.len() as f64);
    }

    Ok(SequentialReport {
        known: bank.class_name(known).to_string(),
        initial_known_accuracy,
        runs,
        mean_known_after,
        mean_after_zero_day,
    })
}
