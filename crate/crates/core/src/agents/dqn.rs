//! Deep Q-network learner with a target network, replay drawn from the
//! contract's chain, and epsilon-greedy exploration over feasible providers.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Adam, Gradients, Mlp};
use super::AgentError;
use crate::ledger::{Chain, Experience};
use crate::mdp::StateVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub hidden_sizes: Vec<usize>,
    pub batch_size: usize,
    /// Gradient steps between target-network refreshes.
    pub target_update_period: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: usize,
    /// Environment steps between gradient steps.
    pub train_every: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            learning_rate: 1e-3,
            hidden_sizes: vec![64, 64],
            batch_size: 64,
            target_update_period: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 1200,
            train_every: 4,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |field| Err(AgentError::Config(field));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.target_update_period == 0 {
            return bad("target_update_period");
        }
        if !(0.0 <= self.epsilon_end && self.epsilon_end <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return bad("epsilon_start");
        }
        if self.train_every == 0 {
            return bad("train_every");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_episodes` episodes.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 || episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Index of the largest value among `mask`ed entries, lowest index on ties.
/// Falls back to all entries when nothing is masked in.
pub fn masked_argmax(values: &[f64], mask: &[bool]) -> usize {
    let any = mask.iter().any(|&m| m);
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if any && !mask[i] {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

pub(crate) fn uniform_choice<R: Rng + ?Sized>(rng: &mut R, mask: &[bool]) -> Option<usize> {
    let feasible = mask.iter().filter(|&&m| m).count();
    if feasible == 0 {
        return None;
    }
    let k = rng.random_range(0..feasible);
    mask.iter().enumerate().filter(|(_, &m)| m).nth(k).map(|(i, _)| i)
}

#[derive(Clone, Debug)]
pub struct DqnAgent {
    config: DqnConfig,
    providers: usize,
    online: Mlp,
    target: Mlp,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epsilon: f64,
    learning: bool,
    env_steps: u64,
    train_steps: u64,
    last_loss: Option<f64>,
}

impl DqnAgent {
    pub fn new(config: DqnConfig, providers: usize, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        if providers == 0 {
            return Err(AgentError::Config("providers"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = Mlp::new(StateVector::dim(providers), &config.hidden_sizes, providers, &mut rng);
        Ok(Self::assemble(config, providers, online, rng))
    }

    /// Wraps existing weights (e.g. from a checkpoint); the target network
    /// starts as a copy.
    pub fn with_network(config: DqnConfig, network: Mlp, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let providers = network.outputs();
        if providers == 0 || network.inputs() != StateVector::dim(providers) {
            return Err(AgentError::Config("network shape"));
        }
        Ok(Self::assemble(config, providers, network, ChaCha8Rng::seed_from_u64(seed)))
    }

    fn assemble(config: DqnConfig, providers: usize, online: Mlp, rng: ChaCha8Rng) -> Self {
        let optimizer = Adam::new(&online, config.learning_rate);
        Self {
            epsilon: config.epsilon_start,
            config,
            providers,
            target: online.clone(),
            online,
            optimizer,
            rng,
            learning: true,
            env_steps: 0,
            train_steps: 0,
            last_loss: None,
        }
    }

    pub fn config(&self) -> &DqnConfig {
        &self.config
    }

    pub fn network(&self) -> &Mlp {
        &self.online
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.online
    }

    pub fn target_network(&self) -> &Mlp {
        &self.target
    }

    pub fn providers(&self) -> usize {
        self.providers
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon.clamp(0.0, 1.0);
    }

    /// Frozen agents act but never train.
    pub fn set_learning(&mut self, learning: bool) {
        self.learning = learning;
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn q_values(&self, state: &StateVector) -> Vec<f64> {
        self.online.forward(state.features())
    }

    pub fn target_q_values(&self, state: &StateVector) -> Vec<f64> {
        self.target.forward(state.features())
    }

    pub fn select_action(&mut self, state: &StateVector, epsilon: f64, mask: &[bool]) -> usize {
        if self.rng.random::<f64>() < epsilon {
            return uniform_choice(&mut self.rng, mask)
                .unwrap_or_else(|| self.rng.random_range(0..mask.len()));
        }
        masked_argmax(&self.q_values(state), mask)
    }

    /// `y = r + gamma * max_a' Q_target(s', a')` with `a'` restricted to
    /// providers that are not saturated in `s'`; no bootstrap when none are.
    pub fn td_targets(&self, batch: &[&Experience]) -> Vec<f64> {
        if self.config.gamma == 0.0 {
            return batch.iter().map(|e| e.reward).collect();
        }
        let n = batch.len();
        let dim = StateVector::dim(self.providers);
        let mut next = Vec::with_capacity(n * dim);
        for e in batch {
            next.extend_from_slice(e.next_state.features());
        }
        let trace = self.target.forward_batch(&next, n);
        let q = trace.output();
        batch
            .iter()
            .enumerate()
            .map(|(b, e)| {
                let row = &q[b * self.providers..(b + 1) * self.providers];
                let bootstrap = e
                    .next_state
                    .loads()
                    .iter()
                    .zip(row)
                    .filter(|(l, _)| **l < 1.0)
                    .map(|(_, q)| *q)
                    .fold(None, |m: Option<f64>, q| Some(m.map_or(q, |m| m.max(q))));
                e.reward + self.config.gamma * bootstrap.unwrap_or(0.0)
            })
            .collect()
    }

    /// Mean squared Bellman error of the online network against fixed
    /// targets, and its gradient.
    pub fn loss_and_gradients(&self, batch: &[&Experience], targets: &[f64]) -> (f64, Gradients) {
        bellman_loss(&self.online, batch, targets)
    }

    pub fn train_step(&mut self, batch: &[&Experience]) -> Result<f64, AgentError> {
        let targets = self.td_targets(batch);
        let (loss, grads) = bellman_loss(&self.online, batch, &targets);
        if !loss.is_finite() {
            return Err(AgentError::Diverged(loss));
        }
        self.optimizer.step(&mut self.online, &grads);
        if !self.online.is_finite() {
            return Err(AgentError::Diverged(f64::NAN));
        }
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.config.target_update_period) {
            self.sync_target();
        }
        self.last_loss = Some(loss);
        Ok(loss)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// Counts one environment step and, every `train_every` steps, trains on
    /// a batch sampled from the chain. Skips silently while the chain holds
    /// fewer than `batch_size` experiences.
    pub fn observe_step(&mut self, chain: &Chain) -> Result<Option<f64>, AgentError> {
        self.env_steps += 1;
        if !self.learning || !self.env_steps.is_multiple_of(self.config.train_every) {
            return Ok(None);
        }
        let mut rng = self.rng.clone();
        let sampled = chain.sample_experiences(self.config.batch_size, &mut rng);
        self.rng = rng;
        match sampled {
            Ok(batch) => self.train_step(&batch).map(Some),
            Err(_) => Ok(None),
        }
    }
}

pub fn bellman_loss(net: &Mlp, batch: &[&Experience], targets: &[f64]) -> (f64, Gradients) {
    let n = batch.len();
    let outs = net.outputs();
    let mut input = Vec::with_capacity(n * net.inputs());
    for e in batch {
        input.extend_from_slice(e.state.features());
    }
    let trace = net.forward_batch(&input, n);
    let q = trace.output();
    let mut grad = vec![0.0; n * outs];
    let mut loss = 0.0;
    for (b, e) in batch.iter().enumerate() {
        let err = q[b * outs + e.action] - targets[b];
        loss += err * err;
        grad[b * outs + e.action] = 2.0 * err / n as f64;
    }
    (loss / n as f64, net.backward(&trace, &grad))
}
