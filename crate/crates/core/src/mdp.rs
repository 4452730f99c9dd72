//! Observation encoding, the feasibility gate and the allocation reward.
//!
//! For a transaction assigned to provider `i` out of `R`:
//!
//! ```text
//! r = C(i) * [ f(i) * (1 - c(i))  +  (1/R) * sum_j (1 - l(j)) ]
//! ```
//!
//! where `C` is the feasibility gate, `f` the reputation, `c` the normalized
//! serving cost and `l` the loads of all providers. The first term rewards a
//! cheap, reputable choice; the second rewards a lightly loaded fleet.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::{Device, Environment, TaskType, Transaction};

/// Number of leading one-hot entries encoding the task type.
pub const TASK_TYPES: usize = 3;

/// Flat observation `[type one-hot (3), demand, loads (R), costs (R), reputations (R)]`,
/// every component in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    values: Vec<f64>,
}

impl StateVector {
    pub fn dim(providers: usize) -> usize {
        TASK_TYPES + 1 + 3 * providers
    }

    pub fn new(
        task_type: TaskType,
        demand_norm: f64,
        loads: &[f64],
        costs: &[f64],
        reputations: &[f64],
    ) -> Self {
        assert!(loads.len() == costs.len() && costs.len() == reputations.len());
        let mut values = Vec::with_capacity(Self::dim(loads.len()));
        let mut onehot = [0.0; TASK_TYPES];
        onehot[task_type.index()] = 1.0;
        values.extend_from_slice(&onehot);
        values.push(demand_norm);
        values.extend_from_slice(loads);
        values.extend_from_slice(costs);
        values.extend_from_slice(reputations);
        Self { values }
    }

    /// Rebuilds a state from its flat feature layout. Returns `None` when the
    /// length does not match any fleet size.
    pub fn from_features(values: Vec<f64>) -> Option<Self> {
        let rest = values.len().checked_sub(TASK_TYPES + 1)?;
        if rest == 0 || rest % 3 != 0 {
            return None;
        }
        Some(Self { values })
    }

    pub fn providers(&self) -> usize {
        (self.values.len() - TASK_TYPES - 1) / 3
    }

    pub fn features(&self) -> &[f64] {
        &self.values
    }

    pub fn task_type_onehot(&self) -> &[f64] {
        &self.values[..TASK_TYPES]
    }

    pub fn demand(&self) -> f64 {
        self.values[TASK_TYPES]
    }

    pub fn loads(&self) -> &[f64] {
        let r = self.providers();
        &self.values[TASK_TYPES + 1..TASK_TYPES + 1 + r]
    }

    pub fn costs(&self) -> &[f64] {
        let r = self.providers();
        &self.values[TASK_TYPES + 1 + r..TASK_TYPES + 1 + 2 * r]
    }

    pub fn reputations(&self) -> &[f64] {
        let r = self.providers();
        &self.values[TASK_TYPES + 1 + 2 * r..]
    }

    /// Providers that are not fully loaded. Inactive providers are encoded
    /// with load 1, so this is the feasibility mask whenever every provider
    /// serves the task type.
    pub fn unsaturated_mask(&self) -> Vec<bool> {
        self.loads().iter().map(|&l| l < 1.0).collect()
    }
}

/// Selection of exactly one provider.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action(pub usize);

impl Action {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn one_hot(self, providers: usize) -> Vec<u8> {
        let mut v = vec![0u8; providers];
        v[self.0] = 1;
        v
    }
}

/// The gate `C(i)`: active, able to serve the task type, not fully loaded.
pub fn feasibility(device: &Device, tx: &Transaction) -> bool {
    device.active && device.supports(tx.task_type) && device.load < 1.0
}

pub fn feasibility_mask(env: &Environment, tx: &Transaction) -> Vec<bool> {
    env.devices().iter().map(|d| feasibility(d, tx)).collect()
}

/// Cost term of the selection: reputation times the cost saving.
pub fn cost_term(state: &StateVector, action: Action) -> f64 {
    let i = action.index();
    state.reputations()[i] * (1.0 - state.costs()[i])
}

/// Load-balance term: the fleet's mean spare load. It does not depend on the
/// action.
pub fn balance_term(state: &StateVector) -> f64 {
    let loads = state.loads();
    loads.iter().map(|l| 1.0 - l).sum::<f64>() / loads.len() as f64
}

pub fn reward(state: &StateVector, action: Action, feasible: bool) -> f64 {
    if !feasible {
        return 0.0;
    }
    cost_term(state, action) + balance_term(state)
}

/// Normalized cost of serving `demand` cycles at `cost_per_cycle`, relative
/// to the worst case the configuration admits.
pub fn normalized_cost(env: &Environment, cost_per_cycle: f64, demand: f64) -> f64 {
    let cfg = env.config();
    let worst = cfg.cost_range.hi() * cfg.demand_range.hi();
    (cost_per_cycle * demand / worst).clamp(0.0, 1.0)
}

pub fn encode(env: &Environment, tx: &Transaction) -> StateVector {
    let r = env.num_devices();
    let mut loads = Vec::with_capacity(r);
    let mut costs = Vec::with_capacity(r);
    let mut reps = Vec::with_capacity(r);
    for d in env.devices() {
        costs.push(normalized_cost(env, d.cost_per_cycle, tx.demand));
        if d.active {
            loads.push(d.load);
            reps.push(d.reputation);
        } else {
            loads.push(1.0);
            reps.push(0.0);
        }
    }
    let demand_norm = (tx.demand / env.config().demand_range.hi()).clamp(0.0, 1.0);
    StateVector::new(tx.task_type, demand_norm, &loads, &costs, &reps)
}
