//! One agent per remaining attack class, distilling into a shared main
//! model through the asynchronous server.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::fisher_diagonal;
use crate::error::{Error, Result};
use crate::federated::{run_simulation, AgentReport, SyncMode, TranscriptEvent};
use crate::ingest::Sample;
use crate::nn::{evaluate, Metrics, NetworkModel};

use super::{arch_for, subseed, train_initial, ClassBank, ScenarioConfig};

/// Results of the federated scenario, plus the artifacts a caller may
/// want to persist (final model, merged importances, transcript).
#[derive(Debug, serde::Serialize)]
pub struct FederatedReport {
    pub known: String,
    /// Class each agent owns, in agent-index order.
    pub agents: Vec<String>,
    /// Union zero-day eval set against the initial main model.
    pub unknowns_before: Metrics,
    /// The same set against the final main model.
    pub unknowns_after: Metrics,
    /// Known-class eval set against the initial main model.
    pub known_before: Metrics,
    /// The same set against the final main model.
    pub known_after: Metrics,
    pub agent_reports: Vec<AgentReport>,
    pub server_version: u64,
    #[serde(skip)]
    pub model: NetworkModel,
    #[serde(skip)]
    pub fisher: Vec<f64>,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEvent>,
}

/// Trains the initial main model on one known class, hands every other
/// class to its own agent, runs the simulation, and measures the union
/// zero-day set and the known class on both sides.
pub fn scenario_federated(cfg: &ScenarioConfig) -> Result<FederatedReport> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let bank = ClassBank::new(&data, cfg.eval_per_class, subseed(cfg.seed, "bank"))?;
    let known = bank.resolve_known(&cfg.known)?;
    let others: Vec<_> = bank.attack_ids().into_iter().filter(|&c| c != known).collect();
    if others.is_empty() {
        return Err(Error::Config("the federated scenario needs at least 2 attack classes".into()));
    }

    let mut draw_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "init-draw"));
    let initial_set = bank.initial_train_set(known, &mut draw_rng)?;
    let initial = train_initial(
        arch_for(cfg.model, cfg.preset),
        &initial_set,
        cfg.initial_epochs,
        cfg.initial_batch,
        subseed(cfg.seed, "init"),
    )?;
    let initial_fisher = fisher_diagonal(&initial, &initial_set)?;

    let union_eval = bank.union_eval_set(&others)?;
    let known_eval = bank.eval_set(known)?;
    let unknowns_before = evaluate(&initial, &union_eval)?;
    let known_before = evaluate(&initial, &known_eval)?;

    let mut tasks: Vec<Vec<Sample>> = Vec::with_capacity(others.len());
    for (i, &z) in others.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &format!("task-{i}")));
        let mut task = bank.draw_train(z, cfg.update_flows, &mut rng)?;
        task.extend(bank.draw_train(0, cfg.update_flows, &mut rng)?);
        task.shuffle(&mut rng);
        tasks.push(task);
    }

    let mut fcfg = cfg.federated.clone();
    fcfg.seed = subseed(cfg.seed, "fed");
    let mode = if cfg.deterministic {
        SyncMode::Deterministic { seed: subseed(cfg.seed, "turnstile") }
    } else {
        SyncMode::Free
    };
    let run = run_simulation(&initial, &initial_fisher, initial_set.len() as u64, &tasks, &fcfg, mode)?;

    let unknowns_after = evaluate(&run.model, &union_eval)?;
    let known_after = evaluate(&run.model, &known_eval)?;
    Ok(FederatedReport {
        known: bank.class_name(known).to_string(),
        agents: others.iter().map(|&c| bank.class_name(c).to_string()).collect(),
        unknowns_before,
        unknowns_after,
        known_before,
        known_after,
        agent_reports: run.reports,
        server_version: run.version,
        model: run.model,
        fisher: run.fisher,
        transcript: run.transcript,
    })
}
