//! Allocation policies: the DQN learner and the rule-based baselines.

pub mod baselines;
pub mod dqn;
pub mod network;

use alloc::boxed::Box;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{la_select, oracle_select, random_select};
pub use dqn::{DqnAgent, DqnConfig};

use crate::ledger::Chain;
use crate::mdp::StateVector;

/// Default load threshold of the load-aware baseline.
pub const DEFAULT_OMEGA: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid agent configuration: `{0}`")]
    Config(&'static str),
    #[error("training diverged (loss = {0})")]
    Diverged(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Dqn,
    La,
    Random,
    Oracle,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Dqn, AgentKind::La, AgentKind::Random, AgentKind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::La => "la",
            AgentKind::Random => "random",
            AgentKind::Oracle => "oracle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A policy a smart contract can consult.
#[derive(Clone, Debug)]
pub enum Policy {
    Dqn(Box<DqnAgent>),
    LoadAware { omega: f64 },
    Random(ChaCha8Rng),
    Oracle,
}

impl Policy {
    pub fn dqn(agent: DqnAgent) -> Self {
        Policy::Dqn(Box::new(agent))
    }

    pub fn random(seed: u64) -> Self {
        Policy::Random(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            Policy::Dqn(_) => AgentKind::Dqn,
            Policy::LoadAware { .. } => AgentKind::La,
            Policy::Random(_) => AgentKind::Random,
            Policy::Oracle => AgentKind::Oracle,
        }
    }

    /// Chooses a provider, or `None` when the policy declines because no
    /// provider is feasible. The DQN always names a provider.
    pub fn decide(&mut self, state: &StateVector, mask: &[bool]) -> Option<usize> {
        match self {
            Policy::Dqn(agent) => {
                let eps = agent.epsilon();
                Some(agent.select_action(state, eps, mask))
            }
            Policy::LoadAware { omega } => la_select(state, *omega, mask),
            Policy::Random(rng) => random_select(rng, mask),
            Policy::Oracle => oracle_select(state, mask),
        }
    }

    /// Exploration rate currently in force (zero for rule-based policies).
    pub fn epsilon(&self) -> f64 {
        match self {
            Policy::Dqn(agent) => agent.epsilon(),
            _ => 0.0,
        }
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        if let Policy::Dqn(agent) = self {
            agent.set_epsilon(epsilon);
        }
    }

    /// Learning hook called once per executed transaction.
    pub fn observe_step(&mut self, chain: &Chain) -> Result<Option<f64>, AgentError> {
        match self {
            Policy::Dqn(agent) => agent.observe_step(chain),
            _ => Ok(None),
        }
    }

    pub fn as_dqn(&self) -> Option<&DqnAgent> {
        match self {
            Policy::Dqn(agent) => Some(agent),
            _ => None,
        }
    }
}
