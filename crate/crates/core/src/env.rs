//! The simulated pervasive system: a fleet of heterogeneous devices, a
//! transaction arrival stream, and the dynamics of backlog, load and
//! reputation under assignments, time and churn.
//!
//! Time advances in fixed steps of `step_duration` seconds. Each device works
//! through its queue in FIFO order at `capacity` cycles per second, so the
//! realized completion time of a transaction is exact even though the clock
//! is discrete.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp;

/// Reputation every device starts with.
pub const INITIAL_REPUTATION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid configuration: `{field}` {reason}")]
    Config {
        field: &'static str,
        reason: &'static str,
    },
    #[error("device {0} does not exist or is inactive")]
    Allocation(usize),
    #[error("invalid churn event: {0}")]
    Churn(&'static str),
    #[error("churn would leave no active device")]
    Degenerate,
    #[error("transaction demand {0} is outside the configured demand range")]
    Demand(f64),
    #[error("internal error: {0}")]
    Internal(&'static str),
}

/// Kind of PAI workload a transaction carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Computation,
    Storage,
    Data,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::Computation, TaskType::Storage, TaskType::Data];

    pub fn index(self) -> usize {
        match self {
            TaskType::Computation => 0,
            TaskType::Storage => 1,
            TaskType::Data => 2,
        }
    }
}

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.0 + self.1)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.0 <= x && x <= self.1
    }

    fn is_valid_positive(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 > 0.0 && self.0 <= self.1
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub num_devices: usize,
    /// CPU capacity in cycles per second.
    pub capacity_range: Interval,
    /// Serving cost in currency units per cycle.
    pub cost_range: Interval,
    /// Transaction demand in cycles.
    pub demand_range: Interval,
    /// Horizon in seconds over which a device's backlog is normalized into a load.
    pub load_horizon: f64,
    /// EWMA weight of the newest completion score in the reputation.
    pub reputation_smoothing: f64,
    pub step_duration: f64,
    /// Relative weights of computation, storage and data transactions.
    pub task_mix: [f64; 3],
    /// Supplied by the run configuration, never by the `[env]` table.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_devices: 10,
            capacity_range: Interval(0.2e9, 0.8e9),
            cost_range: Interval(1e-9, 1e-8),
            demand_range: Interval(0.1e9, 2e9),
            load_horizon: 10.0,
            reputation_smoothing: 0.1,
            step_duration: 1.0,
            task_mix: [1.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let cfg = |field, reason| Err(EnvError::Config { field, reason });
        if self.num_devices == 0 {
            return cfg("num_devices", "must be at least 1");
        }
        if !self.capacity_range.is_valid_positive() {
            return cfg("capacity_range", "must be a positive interval with min <= max");
        }
        if !self.cost_range.is_valid_positive() {
            return cfg("cost_range", "must be a positive interval with min <= max");
        }
        if !self.demand_range.is_valid_positive() {
            return cfg("demand_range", "must be a positive interval with min <= max");
        }
        if !(self.load_horizon.is_finite() && self.load_horizon > 0.0) {
            return cfg("load_horizon", "must be positive");
        }
        if !(self.reputation_smoothing > 0.0 && self.reputation_smoothing <= 1.0) {
            return cfg("reputation_smoothing", "must lie in (0, 1]");
        }
        if !(self.step_duration.is_finite() && self.step_duration > 0.0) {
            return cfg("step_duration", "must be positive");
        }
        if self.task_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.task_mix.iter().sum::<f64>() <= 0.0
        {
            return cfg("task_mix", "must be nonnegative weights with a positive sum");
        }
        Ok(())
    }

    /// Reference completion time: mean demand over mean capacity.
    pub fn reference_time(&self) -> f64 {
        self.demand_range.mean() / self.capacity_range.mean()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: u64,
    pub task_type: TaskType,
    /// Cycles.
    pub demand: f64,
    pub arrival_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
struct QueuedWork {
    tx_id: u64,
    demand: f64,
    remaining: f64,
    assigned_at: f64,
}

/// A pervasive resource provider.
///
/// `load` is derived from `backlog` (see [`load_of`]) and is reported as 1
/// once the device has left the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Device {
    pub id: usize,
    pub capacity: f64,
    pub cost_per_cycle: f64,
    pub backlog: f64,
    pub load: f64,
    pub reputation: f64,
    pub active: bool,
    pub supports: [bool; 3],
    queue: VecDeque<QueuedWork>,
}

impl Device {
    pub fn new(id: usize, capacity: f64, cost_per_cycle: f64) -> Self {
        Self {
            id,
            capacity,
            cost_per_cycle,
            backlog: 0.0,
            load: 0.0,
            reputation: INITIAL_REPUTATION,
            active: true,
            supports: [true; 3],
            queue: VecDeque::new(),
        }
    }

    pub fn supports(&self, task_type: TaskType) -> bool {
        self.supports[task_type.index()]
    }

    /// Number of transactions queued or in service.
    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    fn refresh_load(&mut self, horizon: f64) {
        self.load = if self.active {
            load_of(self.backlog, self.capacity, horizon)
        } else {
            1.0
        };
    }
}

/// `min(1, backlog / (capacity * horizon))`.
pub fn load_of(backlog: f64, capacity: f64, horizon: f64) -> f64 {
    (backlog / (capacity * horizon)).min(1.0)
}

/// One EWMA step of the reputation towards the completion score
/// `t_ref / (t_ref + completion_time)`.
pub fn update_reputation(
    reputation: f64,
    alpha: f64,
    reference_time: f64,
    completion_time: f64,
) -> Result<f64, EnvError> {
    if !(completion_time.is_finite() && completion_time > 0.0) {
        return Err(EnvError::Internal("completion time must be positive"));
    }
    let score = reference_time / (reference_time + completion_time);
    Ok((1.0 - alpha) * reputation + alpha * score)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AssignmentResult {
    Assigned { device: usize, completion_time: f64 },
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionEvent {
    pub tx_id: u64,
    pub device: usize,
    pub demand: f64,
    /// Seconds from assignment to the end of service.
    pub completion_time: f64,
    /// Index of the step during which the work finished.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnKind {
    RemoveDevices(Vec<usize>),
    ScaleCapacity(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    pub at_episode: usize,
    pub kind: ChurnKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Draw {
    task_type: TaskType,
    demand: f64,
}

/// The device fleet plus its arrival stream.
///
/// Arrivals are drawn one transaction ahead so that the observation following
/// an allocation can already describe the next request.
#[derive(Clone, Debug)]
pub struct Environment {
    config: EnvConfig,
    devices: Vec<Device>,
    rng: ChaCha8Rng,
    upcoming: Draw,
    next_tx_id: u64,
    steps: u64,
    reference_time: f64,
    assigned_cycles: f64,
    drained_cycles: f64,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let devices = (0..config.num_devices)
            .map(|id| {
                let capacity = config.capacity_range.sample(&mut rng);
                let cost = config.cost_range.sample(&mut rng);
                Device::new(id, capacity, cost)
            })
            .collect();
        let upcoming = draw(&config, &mut rng);
        Ok(Self {
            reference_time: config.reference_time(),
            config,
            devices,
            rng,
            upcoming,
            next_tx_id: 0,
            steps: 0,
            assigned_cycles: 0.0,
            drained_cycles: 0.0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, id: usize) -> Option<&Device> {
        self.devices.get(id)
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn reference_time(&self) -> f64 {
        self.reference_time
    }

    /// Number of completed `advance` calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn now(&self) -> f64 {
        self.steps as f64 * self.config.step_duration
    }

    /// Issues the next arrival and draws the one after it.
    pub fn generate_transaction(&mut self) -> Transaction {
        let next = draw(&self.config, &mut self.rng);
        let current = core::mem::replace(&mut self.upcoming, next);
        self.issue(current)
    }

    /// The transaction [`generate_transaction`](Self::generate_transaction)
    /// would return now, without consuming it.
    pub fn peek_transaction(&self) -> Transaction {
        Transaction {
            id: self.next_tx_id,
            task_type: self.upcoming.task_type,
            demand: self.upcoming.demand,
            arrival_step: self.steps,
        }
    }

    /// Issues a scripted transaction outside the arrival stream.
    pub fn make_transaction(
        &mut self,
        task_type: TaskType,
        demand: f64,
    ) -> Result<Transaction, EnvError> {
        if !(demand > 0.0 && self.config.demand_range.contains(demand)) {
            return Err(EnvError::Demand(demand));
        }
        Ok(self.issue(Draw { task_type, demand }))
    }

    /// Draws a demand from the configured range using the arrival stream's
    /// generator.
    pub fn sample_demand(&mut self) -> f64 {
        self.config.demand_range.sample(&mut self.rng)
    }

    fn issue(&mut self, draw: Draw) -> Transaction {
        let tx = Transaction {
            id: self.next_tx_id,
            task_type: draw.task_type,
            demand: draw.demand,
            arrival_step: self.steps,
        };
        self.next_tx_id += 1;
        tx
    }

    pub fn assign(&mut self, tx: &Transaction, device_id: usize) -> Result<AssignmentResult, EnvError> {
        let now = self.now();
        let horizon = self.config.load_horizon;
        let device = self
            .devices
            .get_mut(device_id)
            .filter(|d| d.active)
            .ok_or(EnvError::Allocation(device_id))?;
        if !mdp::feasibility(device, tx) {
            return Ok(AssignmentResult::Rejected);
        }
        let completion_time = (device.backlog + tx.demand) / device.capacity;
        device.queue.push_back(QueuedWork {
            tx_id: tx.id,
            demand: tx.demand,
            remaining: tx.demand,
            assigned_at: now,
        });
        device.backlog += tx.demand;
        device.refresh_load(horizon);
        self.assigned_cycles += tx.demand;
        Ok(AssignmentResult::Assigned {
            device: device_id,
            completion_time,
        })
    }

    /// Runs every active device for one step and reports finished work.
    pub fn advance(&mut self) -> Vec<CompletionEvent> {
        let dt = self.config.step_duration;
        let start = self.now();
        let step = self.steps;
        let horizon = self.config.load_horizon;
        let alpha = self.config.reputation_smoothing;
        let reference_time = self.reference_time;
        let mut events = Vec::new();

        for device in self.devices.iter_mut().filter(|d| d.active) {
            let full_budget = device.capacity * dt;
            let mut budget = full_budget;
            while let Some(head) = device.queue.front_mut() {
                if head.remaining <= budget {
                    budget -= head.remaining;
                    let finished_at = start + (full_budget - budget) / device.capacity;
                    let completion_time = finished_at - head.assigned_at;
                    events.push(CompletionEvent {
                        tx_id: head.tx_id,
                        device: device.id,
                        demand: head.demand,
                        completion_time,
                        step,
                    });
                    // A completion always lies strictly after its assignment.
                    device.reputation =
                        update_reputation(device.reputation, alpha, reference_time, completion_time)
                            .expect("completion after assignment");
                    device.queue.pop_front();
                } else {
                    head.remaining -= budget;
                    budget = 0.0;
                    break;
                }
            }
            let drained = full_budget - budget;
            self.drained_cycles += drained;
            device.backlog = device.queue.iter().map(|w| w.remaining).sum();
            device.refresh_load(horizon);
        }
        self.steps += 1;
        events
    }

    pub fn apply_churn(&mut self, event: &ChurnEvent) -> Result<(), EnvError> {
        match &event.kind {
            ChurnKind::RemoveDevices(ids) => {
                let mut seen = Vec::with_capacity(ids.len());
                for &id in ids {
                    if !self.devices.get(id).is_some_and(|d| d.active) {
                        return Err(EnvError::Churn("removed device is unknown or already inactive"));
                    }
                    if seen.contains(&id) {
                        return Err(EnvError::Churn("device listed twice"));
                    }
                    seen.push(id);
                }
                if self.active_count() == ids.len() {
                    return Err(EnvError::Degenerate);
                }
                for &id in ids {
                    let device = &mut self.devices[id];
                    device.active = false;
                    device.refresh_load(self.config.load_horizon);
                }
            }
            ChurnKind::ScaleCapacity(factor) => {
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(EnvError::Churn("capacity factor must lie in (0, 1]"));
                }
                for device in self.devices.iter_mut().filter(|d| d.active) {
                    device.capacity *= factor;
                    device.refresh_load(self.config.load_horizon);
                }
            }
        }
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.devices.iter().filter(|d| d.active).count()
    }

    /// Mean load over active devices.
    pub fn mean_active_load(&self) -> f64 {
        let (sum, n) = self
            .devices
            .iter()
            .filter(|d| d.active)
            .fold((0.0, 0usize), |(s, n), d| (s + d.load, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Population variance of the loads of active devices.
    pub fn active_load_variance(&self) -> f64 {
        let mean = self.mean_active_load();
        let (sum, n) = self
            .devices
            .iter()
            .filter(|d| d.active)
            .fold((0.0, 0usize), |(s, n), d| (s + (d.load - mean) * (d.load - mean), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// True once every active device has drained its queue.
    pub fn is_idle(&self) -> bool {
        self.devices.iter().filter(|d| d.active).all(|d| d.queue.is_empty())
    }

    pub fn total_backlog(&self) -> f64 {
        self.devices.iter().map(|d| d.backlog).sum()
    }

    pub fn assigned_cycles(&self) -> f64 {
        self.assigned_cycles
    }

    pub fn drained_cycles(&self) -> f64 {
        self.drained_cycles
    }
}

fn draw(config: &EnvConfig, rng: &mut ChaCha8Rng) -> Draw {
    let demand = config.demand_range.sample(rng);
    let weights = config.task_mix;
    let task_type = if weights.iter().filter(|w| **w > 0.0).count() > 1 {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = TaskType::Data;
        for (t, w) in TaskType::ALL.into_iter().zip(weights) {
            if u < w {
                chosen = t;
                break;
            }
            u -= w;
        }
        chosen
    } else {
        let i = weights.iter().position(|w| *w > 0.0).unwrap_or(0);
        TaskType::ALL[i]
    };
    Draw { task_type, demand }
}
