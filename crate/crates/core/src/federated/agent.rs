//! The per-agent workflow: local update, then distillation into the shared
//! main model.
//!
//! An agent never optimizes the main model itself. It trains an expanded
//! local copy on its own task, then replays its task through a fresh copy
//! of the main model, scoring each batch against both the hard labels and
//! the local model's softened outputs, and ships the resulting gradients
//! to the server. The server owns the update step, so concurrent agents
//! compose through gradient application order alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::{continual_learn, fisher_diagonal, ContinualOutcome};
use crate::error::{Error, Result};
use crate::ingest::Sample;
use crate::nn::{
    add_logit_grads, backward, binary_label, cross_entropy, distillation, forward, importance_drift,
    infer, input_for, DriftForm, Mode, ModelInput, NetworkModel,
};

use super::server::{InteractionTag, MainServer};
use super::sync::{FinishGuard, Turnstile};
use super::FederatedConfig;

/// What one agent did during a simulation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AgentReport {
    pub agent: usize,
    /// Server updates this agent triggered.
    pub pushes: u64,
    /// Interactions retried after a failed attempt.
    pub retries: u64,
    /// Largest version gap between fetching parameters and pushing
    /// gradients computed from them.
    pub max_staleness: u64,
    /// Whether the local update needed its second training phase.
    pub teacher_phase2: bool,
    /// Local validation detection rate after the first phase.
    pub teacher_detection: f64,
    /// Weight this agent's importance estimate received at merge time.
    pub merge_alpha: f64,
}

/// Shuffled batch index plan for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Runs the local expansion update that produces the distillation teacher.
pub(crate) fn teacher_for_task(
    base: &NetworkModel,
    base_fisher: &[f64],
    task: &[Sample],
    cfg: &FederatedConfig,
    seed: u64,
) -> Result<ContinualOutcome> {
    let mut ccfg = cfg.continual.clone();
    ccfg.seed = seed;
    continual_learn(base, base_fisher, task, &ccfg)
}

/// Loss and parameter gradient for one distillation batch.
///
/// The objective is hard-label cross entropy plus tempered distillation
/// toward the teacher plus an importance-weighted anchor to the parameters
/// the student started from.
pub(crate) fn distill_grad(
    student: &NetworkModel,
    teacher: &NetworkModel,
    inputs: &[ModelInput],
    labels01: &[usize],
    anchor: &[f64],
    anchor_fisher: &[f64],
    cfg: &FederatedConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let teacher_out = infer(teacher, inputs, Mode::Eval, None)?;
    let (out, trace) = forward(student, inputs, Mode::Train, Some(dropout_rng))?;
    let (ce, mut logit_grads) = cross_entropy(&out, labels01)?;
    let (kd, kd_grads) = distillation(&out, &teacher_out.logits, cfg.temperature)?;
    add_logit_grads(&mut logit_grads, &kd_grads);
    let mut grad = backward(student, &trace, &logit_grads)?;
    let drift = importance_drift(
        student.params(),
        anchor,
        anchor_fisher,
        None,
        cfg.lambda_anchor,
        DriftForm::Squared,
        &mut grad,
    )?;
    Ok((ce + kd + drift, grad))
}

/// One server interaction, gated by the turnstile and retried on outages.
///
/// Failed attempts do not consume the agent's turn: nothing was recorded
/// server-side, so a replay sees only the successful interaction. `last`
/// retires the agent in the same step that releases its turn.
fn interact<T>(
    server: &MainServer,
    turnstile: &Turnstile,
    agent: usize,
    tag: InteractionTag,
    last: bool,
    max_retries: u32,
    retries: &mut u64,
    op: impl Fn(&MainServer) -> Result<T>,
) -> Result<T> {
    let mut attempts = 0u32;
    loop {
        turnstile.enter(agent, tag)?;
        match op(server) {
            Ok(v) => {
                if last {
                    turnstile.leave_finished(agent);
                } else {
                    turnstile.leave(agent);
                }
                return Ok(v);
            }
            Err(Error::ServerUnreachable { .. }) if attempts < max_retries => {
                attempts += 1;
                *retries += 1;
                std::thread::sleep(std::time::Duration::from_millis(1u64 << attempts.min(4)));
            }
            Err(Error::ServerUnreachable { .. }) => {
                return Err(Error::ServerUnreachable { attempts: attempts + 1 });
            }
            Err(e) => return Err(e),
        }
    }
}

struct PushProgress {
    based_on: u64,
    pushes: u64,
    max_staleness: u64,
}

fn flush_pending(
    server: &MainServer,
    turnstile: &Turnstile,
    agent: usize,
    cfg: &FederatedConfig,
    retries: &mut u64,
    student: &mut NetworkModel,
    pending: &mut Vec<Vec<f64>>,
    progress: &mut PushProgress,
) -> Result<()> {
    let (params, version, staleness) = interact(
        server,
        turnstile,
        agent,
        InteractionTag::Push,
        false,
        cfg.max_retries,
        retries,
        |s| s.push(agent, progress.based_on, pending),
    )?;
    student.set_params(&params)?;
    progress.based_on = version;
    progress.max_staleness = progress.max_staleness.max(staleness);
    progress.pushes += 1;
    pending.clear();
    Ok(())
}

/// Full lifecycle of one agent against a shared server.
pub(crate) fn run_agent(
    agent: usize,
    server: &MainServer,
    turnstile: &Turnstile,
    task: &[Sample],
    cfg: &FederatedConfig,
) -> Result<AgentReport> {
    let _guard = FinishGuard::new(turnstile, agent);
    let seed = super::agent_seed(cfg.seed, agent);
    let mut retries = 0u64;

    // teacher basis: whatever the main model knows right now
    let (base_model, base_fisher, _) =
        interact(server, turnstile, agent, InteractionTag::Fetch, false, cfg.max_retries, &mut retries, |s| {
            s.fetch(agent)
        })?;
    let outcome = teacher_for_task(&base_model, &base_fisher, task, cfg, seed)?;
    let teacher = outcome.model().clone();

    // student: a fresh copy, refetched because other agents may have pushed
    // while this one trained locally
    let (mut student, anchor_fisher, based_on) =
        interact(server, turnstile, agent, InteractionTag::Fetch, false, cfg.max_retries, &mut retries, |s| {
            s.fetch(agent)
        })?;
    let anchor = student.params().to_vec();

    let inputs: Vec<ModelInput> =
        task.iter().map(|s| input_for(student.arch(), &s.matrix)).collect();
    let labels01: Vec<usize> = task.iter().map(|s| binary_label(s.label)).collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));

    let mut pending: Vec<Vec<f64>> = Vec::new();
    let mut progress = PushProgress { based_on, pushes: 0, max_staleness: 0 };
    let flush_at = match cfg.cadence {
        super::PushCadence::Immediate => 1,
        super::PushCadence::Coalesce { batches } => batches.max(1),
    };

    for _ in 0..cfg.epochs {
        for batch in epoch_batches(task.len(), cfg.batch_size, &mut shuffle_rng) {
            let b_inputs: Vec<ModelInput> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let b_labels: Vec<usize> = batch.iter().map(|&i| labels01[i]).collect();
            let (_, grad) = distill_grad(
                &student,
                &teacher,
                &b_inputs,
                &b_labels,
                &anchor,
                &anchor_fisher,
                cfg,
                &mut dropout_rng,
            )?;
            pending.push(grad);
            if pending.len() >= flush_at {
                flush_pending(
                    server, turnstile, agent, cfg, &mut retries, &mut student, &mut pending,
                    &mut progress,
                )?;
            }
        }
    }
    if !pending.is_empty() {
        flush_pending(
            server, turnstile, agent, cfg, &mut retries, &mut student, &mut pending, &mut progress,
        )?;
    }

    // the agent's importance estimate reflects the distilled student on its
    // own task, then joins the server's running estimate
    let agent_fisher = fisher_diagonal(&student, task)?;
    let merge_alpha = interact(
        server,
        turnstile,
        agent,
        InteractionTag::Merge,
        true,
        cfg.max_retries,
        &mut retries,
        |s| s.merge(agent, &agent_fisher, task.len() as u64),
    )?;

    Ok(AgentReport {
        agent,
        pushes: progress.pushes,
        retries,
        max_staleness: progress.max_staleness,
        teacher_phase2: outcome.phase2_used,
        teacher_detection: outcome.detection_after_phase1,
        merge_alpha,
    })
}
