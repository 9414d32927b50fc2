//! Multi-agent training against one shared main model.
//!
//! Each agent owns a task (a labeled flow dataset covering a class the
//! main model has not seen) and a thread. The lifecycle per agent: fetch
//! the main model, expand and train a local copy on the task, fetch again
//! to get a fresh student, distill the local copy into the student while
//! pushing the resulting gradients to the server, and finally merge the
//! agent's parameter-importance estimate into the server's running one.
//! The server applies pushed gradients in arrival order, so the whole
//! system's final state is a pure function of the interaction order.
//!
//! That purity is what the sync modes exploit: `Deterministic` fixes the
//! interaction order with a seeded draw and makes whole runs bit-for-bit
//! reproducible, and `Replay` re-drives a recorded transcript, which turns
//! any multi-agent run into a checkable artifact.

mod agent;
mod server;
mod sync;

use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use agent::AgentReport;
pub use server::{
    compute_alpha, merge_fisher, EventKind, InteractionTag, MainServer, ServerFinal,
    TranscriptEvent,
};
pub use sync::{SyncMode, Turnstile};

use crate::continual::{fisher_diagonal, ContinualConfig};
use crate::error::{Error, Result};
use crate::ingest::Sample;
use crate::nn::{binary_label, input_for, ModelInput, NetworkModel};
use agent::{distill_grad, epoch_batches, run_agent, teacher_for_task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// When an agent ships accumulated gradients to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PushCadence {
    /// Every batch gradient goes out on its own.
    Immediate,
    /// Gradients from this many batches, all computed at the same student
    /// parameters, go out as one update.
    Coalesce { batches: usize },
}

/// Knobs for a federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedConfig {
    /// Step size the server applies to pushed gradients.
    pub learning_rate: f64,
    /// Distillation epochs over each agent's task.
    pub epochs: usize,
    pub batch_size: usize,
    /// Softening temperature for the teacher-matching term.
    pub temperature: f64,
    /// Weight of the importance-anchored pull toward the fetched
    /// parameters during distillation.
    pub lambda_anchor: f64,
    pub cadence: PushCadence,
    /// Attempts per server interaction beyond the first.
    pub max_retries: u32,
    /// Settings for each agent's local expansion update.
    pub continual: ContinualConfig,
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> FederatedConfig {
        FederatedConfig {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 16,
            temperature: 2.0,
            lambda_anchor: 1.0,
            cadence: PushCadence::Immediate,
            max_retries: 5,
            continual: ContinualConfig::default(),
            seed: 0,
        }
    }
}

/// Stable per-agent seed stream.
///
/// XORing the base with odd multiples of the 64-bit golden-ratio constant
/// gives every agent a distinct, order-independent seed, so adding an
/// agent never perturbs the others' randomness.
pub fn agent_seed(base: u64, agent: usize) -> u64 {
    base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(agent as u64 + 1)
}

/// Serializes a transcript as one JSON object per line.
pub fn write_transcript<W: Write>(events: &[TranscriptEvent], mut writer: W) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut writer, ev)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_transcript<R: io::Read>(reader: R) -> Result<Vec<TranscriptEvent>> {
    let mut events = Vec::new();
    for line in io::BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}

pub fn transcript_to_path(events: &[TranscriptEvent], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_transcript(events, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn transcript_from_path(path: &Path) -> Result<Vec<TranscriptEvent>> {
    read_transcript(std::fs::File::open(path)?)
}

/// Everything a finished simulation leaves behind.
#[derive(Debug)]
pub struct FederatedRun {
    pub model: NetworkModel,
    pub fisher: Vec<f64>,
    pub fisher_samples: u64,
    pub version: u64,
    pub transcript: Vec<TranscriptEvent>,
    pub reports: Vec<AgentReport>,
}

/// Runs one agent thread per task against a shared server.
///
/// `initial_fisher` must cover every parameter of `initial`;
/// `fisher_samples` says how many samples back that estimate, which sets
/// the weight of later merges.
pub fn run_simulation(
    initial: &NetworkModel,
    initial_fisher: &[f64],
    fisher_samples: u64,
    tasks: &[Vec<Sample>],
    cfg: &FederatedConfig,
    mode: SyncMode,
) -> Result<FederatedRun> {
    if tasks.is_empty() {
        return Err(Error::Config("simulation needs at least one task".into()));
    }
    for (a, task) in tasks.iter().enumerate() {
        if task.is_empty() {
            return Err(Error::EmptyDataset(format!("task for agent {a}")));
        }
    }
    let server =
        MainServer::new(initial.clone(), initial_fisher.to_vec(), fisher_samples, cfg.learning_rate)?;
    let turnstile = Turnstile::new(mode, tasks.len());

    let reports = std::thread::scope(|scope| -> Result<Vec<AgentReport>> {
        let mut handles = Vec::with_capacity(tasks.len());
        for (a, task) in tasks.iter().enumerate() {
            let server = &server;
            let turnstile = &turnstile;
            handles.push(scope.spawn(move || run_agent(a, server, turnstile, task, cfg)));
        }
        let mut reports = Vec::with_capacity(handles.len());
        let mut first_err = None;
        for handle in handles {
            match handle.join() {
                Ok(Ok(report)) => reports.push(report),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(Error::Config("agent thread panicked".into()));
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(reports),
        }
    })?;
    turnstile.check_drained()?;

    let fin = server.into_final();
    Ok(FederatedRun {
        model: fin.model,
        fisher: fin.fisher,
        fisher_samples: fin.fisher_samples,
        version: fin.version,
        transcript: fin.transcript,
        reports,
    })
}

/// Single-agent reference trajectory with the server arithmetic written
/// out longhand.
///
/// Shares the gradient math with the real agent but applies updates and
/// merges inline, so agreement with [`run_simulation`] exercises the
/// server plumbing rather than comparing a function with itself.
pub fn lockstep_reference(
    initial: &NetworkModel,
    initial_fisher: &[f64],
    fisher_samples: u64,
    task: &[Sample],
    cfg: &FederatedConfig,
) -> Result<(NetworkModel, Vec<f64>)> {
    if initial_fisher.len() != initial.n_params() {
        return Err(Error::ParamCountMismatch {
            model: initial.n_params(),
            message: initial_fisher.len(),
        });
    }
    let seed = agent_seed(cfg.seed, 0);
    let outcome = teacher_for_task(initial, initial_fisher, task, cfg, seed)?;
    let teacher = outcome.model().clone();

    let mut student = initial.clone();
    let anchor = student.params().to_vec();
    let inputs: Vec<ModelInput> =
        task.iter().map(|s| input_for(student.arch(), &s.matrix)).collect();
    let labels01: Vec<usize> = task.iter().map(|s| binary_label(s.label)).collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let flush_at = match cfg.cadence {
        PushCadence::Immediate => 1,
        PushCadence::Coalesce { batches } => batches.max(1),
    };

    let apply = |student: &mut NetworkModel, pending: &[Vec<f64>]| {
        let lr = cfg.learning_rate;
        let params = student.params_mut();
        for i in 0..params.len() {
            let mut sum = 0.0;
            for g in pending {
                sum += g[i];
            }
            params[i] -= lr * sum;
        }
    };

    let mut pending: Vec<Vec<f64>> = Vec::new();
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
                initial_fisher,
                cfg,
                &mut dropout_rng,
            )?;
            pending.push(grad);
            if pending.len() >= flush_at {
                apply(&mut student, &pending);
                pending.clear();
            }
        }
    }
    if !pending.is_empty() {
        apply(&mut student, &pending);
        pending.clear();
    }

    let agent_fisher = fisher_diagonal(&student, task)?;
    let n_agent = task.len() as u64;
    let alpha = n_agent as f64 / (fisher_samples + n_agent) as f64;
    let mut fisher = initial_fisher.to_vec();
    for (f, &a) in fisher.iter_mut().zip(&agent_fisher) {
        *f = (1.0 - alpha) * *f + alpha * a;
    }
    Ok((student, fisher))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{FlowMatrix, MATRIX_COLS, MATRIX_ROWS};
    use crate::nn::{write_model, Architecture};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Two classes of small flows: noise rows, with a bright column band
    /// for the attack class.
    fn toy_task(seed: u64, n_per: usize, band: std::ops::Range<usize>) -> Vec<Sample> {
        let mut r = rng(seed);
        let mut samples = Vec::new();
        for class in 0..2u32 {
            for _ in 0..n_per {
                let mut data = vec![0.0f32; MATRIX_ROWS * MATRIX_COLS];
                for row in 0..4 {
                    for col in 0..MATRIX_COLS {
                        data[row * MATRIX_COLS + col] = (r.random::<f64>() * 0.2) as f32;
                    }
                    if class == 1 {
                        for col in band.clone() {
                            data[row * MATRIX_COLS + col] = 0.9;
                        }
                    }
                }
                samples.push(Sample {
                    matrix: FlowMatrix::new(data, 4).unwrap(),
                    label: class,
                });
            }
        }
        samples
    }

    fn tiny_model(seed: u64) -> NetworkModel {
        let mut r = rng(seed);
        NetworkModel::init(Architecture::cnn(100, 200, &[1], &[4, 2]), &mut r).unwrap()
    }

    fn fast_cfg(seed: u64) -> FederatedConfig {
        let mut cfg = FederatedConfig { seed, epochs: 1, batch_size: 8, ..Default::default() };
        cfg.continual.k = 2;
        cfg.continual.epochs = 1;
        cfg.continual.batch_size = 8;
        cfg.continual.tau = 0.0; // keep the local update to one phase
        cfg
    }

    #[test]
    fn agent_seeds_are_distinct() {
        for base in [0u64, 42, u64::MAX] {
            let mut seen = std::collections::HashSet::new();
            for a in 0..64 {
                assert!(seen.insert(agent_seed(base, a)), "collision at agent {a}");
            }
        }
    }

    #[test]
    fn transcript_roundtrips_through_jsonl() {
        let events = vec![
            TranscriptEvent { seq: 0, agent: 1, kind: EventKind::Fetch, server_version: 0 },
            TranscriptEvent {
                seq: 1,
                agent: 1,
                kind: EventKind::Push { staleness: 3 },
                server_version: 1,
            },
            TranscriptEvent {
                seq: 2,
                agent: 0,
                kind: EventKind::MergeFisher { alpha: 128.0 / 3968.0 },
                server_version: 1,
            },
        ];
        let mut buf = Vec::new();
        write_transcript(&events, &mut buf).unwrap();
        let back = read_transcript(&buf[..]).unwrap();
        assert_eq!(back, events);
        match back[2].kind {
            EventKind::MergeFisher { alpha } => {
                assert_eq!(alpha.to_bits(), (128.0f64 / 3968.0).to_bits());
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn single_agent_run_matches_longhand_reference() {
        let model = tiny_model(50);
        let fisher = vec![0.25; model.n_params()];
        let task = toy_task(51, 6, 20..50);
        let cfg = fast_cfg(52);

        let run = run_simulation(
            &model,
            &fisher,
            100,
            std::slice::from_ref(&task),
            &cfg,
            SyncMode::Deterministic { seed: 5 },
        )
        .unwrap();
        let (ref_model, ref_fisher) =
            lockstep_reference(&model, &fisher, 100, &task, &cfg).unwrap();

        assert_eq!(run.model.params().len(), ref_model.params().len());
        for (a, b) in run.model.params().iter().zip(ref_model.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in run.fisher.iter().zip(&ref_fisher) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(run.version, run.reports[0].pushes);
        assert_eq!(run.fisher_samples, 100 + task.len() as u64);
        // merge weight is the agent's sample share
        let expect_alpha = task.len() as f64 / (100 + task.len()) as f64;
        assert_eq!(run.reports[0].merge_alpha, expect_alpha);
    }

    #[test]
    fn recorded_run_replays_to_identical_bytes() {
        let model = tiny_model(60);
        let fisher = vec![0.1; model.n_params()];
        let tasks =
            vec![toy_task(61, 5, 10..35), toy_task(62, 5, 120..150)];
        let cfg = fast_cfg(63);

        let first = run_simulation(
            &model,
            &fisher,
            64,
            &tasks,
            &cfg,
            SyncMode::Deterministic { seed: 7 },
        )
        .unwrap();
        let mut first_bytes = Vec::new();
        write_model(&mut first_bytes, &first.model, Some(&first.fisher)).unwrap();

        let replay = run_simulation(
            &model,
            &fisher,
            64,
            &tasks,
            &cfg,
            SyncMode::Replay(first.transcript.clone()),
        )
        .unwrap();
        let mut replay_bytes = Vec::new();
        write_model(&mut replay_bytes, &replay.model, Some(&replay.fisher)).unwrap();

        assert_eq!(first_bytes, replay_bytes);
        assert_eq!(replay.transcript, first.transcript);
        assert_eq!(replay.version, first.version);
    }

    #[test]
    fn mismatched_replay_transcript_fails() {
        let model = tiny_model(70);
        let fisher = vec![0.1; model.n_params()];
        let tasks = vec![toy_task(71, 4, 10..30)];
        let cfg = fast_cfg(72);

        let run = run_simulation(
            &model,
            &fisher,
            10,
            &tasks,
            &cfg,
            SyncMode::Deterministic { seed: 1 },
        )
        .unwrap();

        // truncating the transcript leaves the tail of the run unmatched
        let short = run.transcript[..run.transcript.len() - 1].to_vec();
        let err = run_simulation(&model, &fisher, 10, &tasks, &cfg, SyncMode::Replay(short))
            .unwrap_err();
        assert!(matches!(err, Error::Replay(_)), "got {err:?}");

        // extending it leaves recorded events unplayed
        let mut long = run.transcript.clone();
        let mut extra = *long.last().unwrap();
        extra.seq += 1;
        long.push(extra);
        let err = run_simulation(&model, &fisher, 10, &tasks, &cfg, SyncMode::Replay(long))
            .unwrap_err();
        assert!(matches!(err, Error::Replay(_)), "got {err:?}");
    }

    #[test]
    fn outages_are_retried_and_counted() {
        let model = tiny_model(80);
        let n = model.n_params();
        let task = toy_task(81, 4, 40..70);
        let cfg = fast_cfg(82);

        let server = MainServer::new(model.clone(), vec![0.1; n], 10, cfg.learning_rate).unwrap();
        server.inject_failures(2);
        let turnstile = Turnstile::new(SyncMode::Free, 1);
        let report = agent::run_agent(0, &server, &turnstile, &task, &cfg).unwrap();
        assert_eq!(report.retries, 2);

        // more failures than the retry budget kills the interaction
        let server = MainServer::new(model, vec![0.1; n], 10, cfg.learning_rate).unwrap();
        server.inject_failures(cfg.max_retries + 1);
        let turnstile = Turnstile::new(SyncMode::Free, 1);
        let err = agent::run_agent(0, &server, &turnstile, &task, &cfg).unwrap_err();
        assert!(matches!(err, Error::ServerUnreachable { .. }), "got {err:?}");
    }

    #[test]
    fn coalescing_cuts_push_count_but_not_gradient_count() {
        let model = tiny_model(90);
        let fisher = vec![0.2; model.n_params()];
        let task = toy_task(91, 8, 60..90); // 16 samples, 2 batches per epoch
        let mut cfg = fast_cfg(92);
        cfg.epochs = 2;

        cfg.cadence = PushCadence::Immediate;
        let immediate = run_simulation(
            &model,
            &fisher,
            10,
            std::slice::from_ref(&task),
            &cfg,
            SyncMode::Deterministic { seed: 2 },
        )
        .unwrap();
        assert_eq!(immediate.reports[0].pushes, 4);
        assert_eq!(immediate.version, 4);

        cfg.cadence = PushCadence::Coalesce { batches: 3 };
        let coalesced = run_simulation(
            &model,
            &fisher,
            10,
            std::slice::from_ref(&task),
            &cfg,
            SyncMode::Deterministic { seed: 2 },
        )
        .unwrap();
        // 4 batch gradients flushed as one triple and one single
        assert_eq!(coalesced.reports[0].pushes, 2);
        assert_eq!(coalesced.version, 2);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let model = tiny_model(95);
        let fisher = vec![0.1; model.n_params()];
        let cfg = fast_cfg(96);
        assert!(matches!(
            run_simulation(&model, &fisher, 0, &[], &cfg, SyncMode::Free),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_simulation(&model, &fisher, 0, &[Vec::new()], &cfg, SyncMode::Free),
            Err(Error::EmptyDataset(_))
        ));
        let short = vec![0.1; model.n_params() - 1];
        assert!(run_simulation(&model, &short, 0, &[Vec::new()], &cfg, SyncMode::Free).is_err());
    }
}
