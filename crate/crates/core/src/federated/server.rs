//! The shared main-model server.
//!
//! All state sits behind one mutex; every interaction is atomic and gets a
//! sequence number in the transcript. The server is the only optimizer in
//! the federation: agents send gradients, the server subtracts them from
//! the main parameters at its learning rate and bumps the version counter.
//! Gradients computed against an older version are applied anyway; the
//! transcript records how stale they were.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::NetworkModel;

/// One recorded server interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub agent: usize,
    #[serde(flatten)]
    pub kind: EventKind,
    /// Version after the interaction completed.
    pub server_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Fetch,
    Push {
        /// Updates applied between the agent's fetch and this push.
        staleness: u64,
    },
    MergeFisher {
        alpha: f64,
    },
}

impl EventKind {
    pub(crate) fn tag(&self) -> InteractionTag {
        match self {
            EventKind::Fetch => InteractionTag::Fetch,
            EventKind::Push { .. } => InteractionTag::Push,
            EventKind::MergeFisher { .. } => InteractionTag::Merge,
        }
    }
}

/// Interaction identity without outcome fields, for replay verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionTag {
    Fetch,
    Push,
    Merge,
}

/// Relative weight of an agent's importance estimate when merging into the
/// main estimate: the agent's sample count over the combined count.
pub fn compute_alpha(n_main: u64, n_agent: u64) -> Result<f64> {
    let total = n_main + n_agent;
    if total == 0 {
        return Err(Error::AlphaOutOfRange { alpha: f64::NAN });
    }
    let alpha = n_agent as f64 / total as f64;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange { alpha });
    }
    Ok(alpha)
}

/// Convex importance merge: `(1 - alpha) * main + alpha * agent`.
pub fn merge_fisher(main: &mut [f64], agent: &[f64], alpha: f64) -> Result<()> {
    if main.len() != agent.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} importance entries", main.len()),
            actual: format!("{}", agent.len()),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange { alpha });
    }
    for (m, &a) in main.iter_mut().zip(agent) {
        *m = (1.0 - alpha) * *m + alpha * a;
    }
    Ok(())
}

struct ServerCore {
    model: NetworkModel,
    fisher: Vec<f64>,
    /// Samples backing the importance estimate; grows with every merge.
    fisher_samples: u64,
    version: u64,
    learning_rate: f64,
    transcript: Vec<TranscriptEvent>,
    /// Test hook: the next `fail_budget` interactions error out.
    fail_budget: u32,
}

/// Thread-safe main-model host.
pub struct MainServer {
    inner: Mutex<ServerCore>,
}

/// Final server state after a simulation.
pub struct ServerFinal {
    pub model: NetworkModel,
    pub fisher: Vec<f64>,
    pub fisher_samples: u64,
    pub version: u64,
    pub transcript: Vec<TranscriptEvent>,
}

impl MainServer {
    pub fn new(
        model: NetworkModel,
        fisher: Vec<f64>,
        fisher_samples: u64,
        learning_rate: f64,
    ) -> Result<MainServer> {
        if fisher.len() != model.n_params() {
            return Err(Error::ParamCountMismatch { model: model.n_params(), message: fisher.len() });
        }
        if learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "server learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(MainServer {
            inner: Mutex::new(ServerCore {
                model,
                fisher,
                fisher_samples,
                version: 0,
                learning_rate,
                transcript: Vec::new(),
                fail_budget: 0,
            }),
        })
    }

    /// Makes the next `n` interactions fail, exercising retry paths.
    pub fn inject_failures(&self, n: u32) {
        self.inner.lock().expect("server lock").fail_budget = n;
    }

    /// Current model, importance estimate, and version.
    pub fn fetch(&self, agent: usize) -> Result<(NetworkModel, Vec<f64>, u64)> {
        let mut core = self.lock_checked()?;
        let out = (core.model.clone(), core.fisher.clone(), core.version);
        core.record(agent, EventKind::Fetch);
        Ok(out)
    }

    /// Applies a set of gradients as one update and returns the new
    /// parameters, the new version, and the recorded staleness.
    pub fn push(
        &self,
        agent: usize,
        based_on: u64,
        grads: &[Vec<f64>],
    ) -> Result<(Vec<f64>, u64, u64)> {
        let mut core = self.lock_checked()?;
        let n = core.model.n_params();
        if grads.is_empty() {
            return Err(Error::Config("push without gradients".into()));
        }
        for g in grads {
            if g.len() != n {
                return Err(Error::ParamCountMismatch { model: n, message: g.len() });
            }
        }
        if based_on > core.version {
            return Err(Error::Replay(format!(
                "gradient based on version {based_on}, server is at {}",
                core.version
            )));
        }
        let staleness = core.version - based_on;
        let lr = core.learning_rate;
        let params = core.model.params_mut();
        for i in 0..n {
            let mut sum = 0.0;
            for g in grads {
                sum += g[i];
            }
            params[i] -= lr * sum;
        }
        core.version += 1;
        core.record(agent, EventKind::Push { staleness });
        Ok((core.model.params().to_vec(), core.version, staleness))
    }

    /// Folds an agent's importance estimate into the main one.
    pub fn merge(&self, agent: usize, fisher: &[f64], n_samples: u64) -> Result<f64> {
        let mut core = self.lock_checked()?;
        let alpha = compute_alpha(core.fisher_samples, n_samples)?;
        let mut main = std::mem::take(&mut core.fisher);
        merge_fisher(&mut main, fisher, alpha)?;
        core.fisher = main;
        core.fisher_samples += n_samples;
        core.record(agent, EventKind::MergeFisher { alpha });
        Ok(alpha)
    }

    pub fn version(&self) -> u64 {
        self.inner.lock().expect("server lock").version
    }

    pub fn into_final(self) -> ServerFinal {
        let core = self.inner.into_inner().expect("server lock");
        ServerFinal {
            model: core.model,
            fisher: core.fisher,
            fisher_samples: core.fisher_samples,
            version: core.version,
            transcript: core.transcript,
        }
    }

    fn lock_checked(&self) -> Result<std::sync::MutexGuard<'_, ServerCore>> {
        let mut core = self.inner.lock().expect("server lock");
        if core.fail_budget > 0 {
            core.fail_budget -= 1;
            return Err(Error::ServerUnreachable { attempts: 1 });
        }
        Ok(core)
    }
}

impl ServerCore {
    fn record(&mut self, agent: usize, kind: EventKind) {
        let seq = self.transcript.len() as u64;
        self.transcript.push(TranscriptEvent { seq, agent, kind, server_version: self.version });
    }
}
