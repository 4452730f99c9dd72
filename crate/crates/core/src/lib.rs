//! Smart-contract resource allocation for pervasive AI services.
//!
//! The crate is `no_std` (it needs `alloc`) and carries the whole algorithmic
//! side of the allocator:
//!
//! - [`env`]: the pervasive device fleet, transaction arrivals, load and
//!   reputation dynamics, churn events.
//! - [`mdp`]: state encoding, the feasibility gate and the allocation reward.
//! - [`ledger`]: the hash-linked chain of experience blocks.
//! - [`agents`]: the DQN learner and the rule-based baselines.
//! - [`sc`]: the smart contract binding a policy, a chain and an environment.
//! - [`flaas`]: the scripted federated-learning-as-a-service workflow.
//! - [`sim`]: the episode loop used by experiments.
//!
//! File formats, configuration and the command line live in the `paiaas`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod agents;
pub mod env;
pub mod flaas;
pub mod ledger;
pub mod mdp;
pub mod sc;
pub mod sim;

pub use env::{Device, EnvConfig, Environment, TaskType, Transaction};
pub use mdp::{Action, StateVector};
