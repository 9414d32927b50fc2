//! Scheduling of server interactions across agent threads.
//!
//! In `Free` mode agents hit the server whenever they like and the OS
//! scheduler decides the interleaving. `Deterministic` mode serializes
//! interactions through a turnstile that picks the next agent with a seeded
//! RNG, so the same seed always yields the same interleaving and therefore
//! bit-identical results. `Replay` mode forces the interleaving recorded in
//! a transcript and fails loudly on any divergence.

use std::sync::{Condvar, Mutex};

use rand::prelude::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::federated::server::{InteractionTag, TranscriptEvent};

/// How server interactions are interleaved across agents.
#[derive(Debug, Clone)]
pub enum SyncMode {
    /// OS scheduling; results vary run to run.
    Free,
    /// Seeded serialization; results are reproducible.
    Deterministic { seed: u64 },
    /// Follow a recorded transcript exactly.
    Replay(Vec<TranscriptEvent>),
}

enum Policy {
    Free,
    Deterministic(ChaCha8Rng),
    Replay { events: Vec<TranscriptEvent>, next: usize },
}

struct TurnstileState {
    policy: Policy,
    alive: Vec<bool>,
    /// Agent currently allowed through, if any.
    current: Option<usize>,
    /// Set when replay diverged; everyone bails out.
    poisoned: Option<String>,
}

/// Grants server access to one agent at a time in non-free modes.
pub struct Turnstile {
    state: Mutex<TurnstileState>,
    cond: Condvar,
}

impl Turnstile {
    pub fn new(mode: SyncMode, n_agents: usize) -> Turnstile {
        let policy = match mode {
            SyncMode::Free => Policy::Free,
            SyncMode::Deterministic { seed } => {
                Policy::Deterministic(ChaCha8Rng::seed_from_u64(seed))
            }
            SyncMode::Replay(events) => Policy::Replay { events, next: 0 },
        };
        let mut state = TurnstileState {
            policy,
            alive: vec![true; n_agents],
            current: None,
            poisoned: None,
        };
        state.pick_next();
        Turnstile { state: Mutex::new(state), cond: Condvar::new() }
    }

    /// Blocks until it is `agent`'s turn to run an interaction of kind `tag`.
    pub fn enter(&self, agent: usize, tag: InteractionTag) -> Result<()> {
        let mut state = self.state.lock().expect("turnstile lock");
        if matches!(state.policy, Policy::Free) {
            return Ok(());
        }
        loop {
            if let Some(msg) = &state.poisoned {
                return Err(Error::Replay(msg.clone()));
            }
            // an exhausted transcript can never grant another turn, so
            // waiting on it would hang forever
            if let Policy::Replay { events, next } = &state.policy {
                if *next >= events.len() {
                    let msg = format!(
                        "transcript exhausted but agent {agent} wants another {tag:?}"
                    );
                    state.poisoned = Some(msg.clone());
                    self.cond.notify_all();
                    return Err(Error::Replay(msg));
                }
            }
            if state.current == Some(agent) {
                break;
            }
            state = self.cond.wait(state).expect("turnstile lock");
        }
        if let Policy::Replay { events, next } = &state.policy {
            match events.get(*next) {
                Some(ev) if ev.agent == agent && ev.kind.tag() == tag => {}
                Some(ev) => {
                    let msg = format!(
                        "transcript event {} expects agent {} doing {:?}, got agent {agent} doing {tag:?}",
                        ev.seq,
                        ev.agent,
                        ev.kind.tag(),
                    );
                    state.poisoned = Some(msg.clone());
                    self.cond.notify_all();
                    return Err(Error::Replay(msg));
                }
                None => {
                    let msg = format!(
                        "transcript exhausted but agent {agent} wants another {tag:?}"
                    );
                    state.poisoned = Some(msg.clone());
                    self.cond.notify_all();
                    return Err(Error::Replay(msg));
                }
            }
        }
        Ok(())
    }

    /// Releases the turnstile after a completed interaction.
    pub fn leave(&self, agent: usize) {
        let mut state = self.state.lock().expect("turnstile lock");
        if matches!(state.policy, Policy::Free) {
            return;
        }
        debug_assert_eq!(state.current, Some(agent));
        if let Policy::Replay { next, .. } = &mut state.policy {
            *next += 1;
        }
        state.pick_next();
        self.cond.notify_all();
    }

    /// Releases the turnstile after an agent's final interaction and retires
    /// the agent in the same step, so the next turn is drawn from the
    /// reduced agent set no matter how threads are scheduled afterwards.
    pub fn leave_finished(&self, agent: usize) {
        let mut state = self.state.lock().expect("turnstile lock");
        if matches!(state.policy, Policy::Free) {
            return;
        }
        debug_assert_eq!(state.current, Some(agent));
        if let Policy::Replay { next, .. } = &mut state.policy {
            *next += 1;
        }
        state.alive[agent] = false;
        state.pick_next();
        self.cond.notify_all();
    }

    /// Marks `agent` done for good; its turns are skipped from now on.
    /// Safe to call after [`Turnstile::leave_finished`]; this is the error
    /// and panic path.
    pub fn finish(&self, agent: usize) {
        let mut state = self.state.lock().expect("turnstile lock");
        if matches!(state.policy, Policy::Free) {
            return;
        }
        state.alive[agent] = false;
        if state.current == Some(agent) {
            state.pick_next();
        }
        self.cond.notify_all();
    }

    /// Errors if a replay transcript still has unconsumed events.
    pub fn check_drained(&self) -> Result<()> {
        let state = self.state.lock().expect("turnstile lock");
        if let Some(msg) = &state.poisoned {
            return Err(Error::Replay(msg.clone()));
        }
        if let Policy::Replay { events, next } = &state.policy {
            if *next < events.len() {
                return Err(Error::Replay(format!(
                    "{} transcript events were never replayed",
                    events.len() - next
                )));
            }
        }
        Ok(())
    }
}

impl TurnstileState {
    fn pick_next(&mut self) {
        self.current = None;
        if self.poisoned.is_some() {
            return;
        }
        match &mut self.policy {
            Policy::Free => {}
            Policy::Deterministic(rng) => {
                let live: Vec<usize> =
                    (0..self.alive.len()).filter(|&a| self.alive[a]).collect();
                self.current = live.choose(rng).copied();
            }
            Policy::Replay { events, next } => {
                if let Some(ev) = events.get(*next) {
                    let agent = ev.agent;
                    if agent >= self.alive.len() || !self.alive[agent] {
                        self.poisoned = Some(format!(
                            "transcript event {} names agent {agent}, which already finished",
                            ev.seq
                        ));
                    } else {
                        self.current = Some(agent);
                    }
                }
            }
        }
    }
}

/// Releases an agent's turnstile slot even if the agent panics.
pub struct FinishGuard<'a> {
    turnstile: &'a Turnstile,
    agent: usize,
}

impl<'a> FinishGuard<'a> {
    pub fn new(turnstile: &'a Turnstile, agent: usize) -> FinishGuard<'a> {
        FinishGuard { turnstile, agent }
    }
}

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        self.turnstile.finish(self.agent);
    }
}
