//! Episode loop: one arrival per step, churn events at episode boundaries,
//! per-episode statistics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ChurnEvent, EnvError, Environment};
use crate::sc::{Allocation, ScError, SmartContract};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid plan: {0}")]
    Plan(&'static str),
    #[error("churn at episode {episode}: {source}")]
    Churn { episode: usize, source: EnvError },
    #[error(transparent)]
    Contract(#[from] ScError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Sorted by `at_episode`; events fire before the episode's first step.
    pub churn_schedule: Vec<ChurnEvent>,
}

impl EpisodePlan {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.episodes == 0 {
            return Err(SimError::Plan("episodes must be at least 1"));
        }
        if self.steps_per_episode == 0 {
            return Err(SimError::Plan("steps_per_episode must be at least 1"));
        }
        if self.churn_schedule.windows(2).any(|w| w[0].at_episode > w[1].at_episode) {
            return Err(SimError::Plan("churn events must be sorted by at_episode"));
        }
        if self.churn_schedule.iter().any(|e| e.at_episode >= self.episodes) {
            return Err(SimError::Plan("churn event scheduled after the last episode"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub mean_reward: f64,
    /// Mean quoted amount per allocated transaction, in currency units.
    pub mean_cost: f64,
    /// Mean over steps of the average load of active devices.
    pub mean_avg_load: f64,
    /// Mean over steps of the variance of active-device loads.
    pub load_variance: f64,
    pub rejections: usize,
    pub allocated: usize,
    pub active_devices: usize,
    pub epsilon: f64,
}

/// Runs `plan` through `sc`, calling `on_step` after every transaction.
/// `epsilon_at` gives the exploration rate for each episode.
pub fn run_episodes<E, F>(
    env: &mut Environment,
    sc: &mut SmartContract,
    plan: &EpisodePlan,
    epsilon_at: E,
    mut on_step: F,
) -> Result<Vec<EpisodeStats>, SimError>
where
    E: Fn(usize) -> f64,
    F: FnMut(usize, &Allocation),
{
    plan.validate()?;
    let mut events = plan.churn_schedule.iter().peekable();
    let mut stats = Vec::with_capacity(plan.episodes);
    let steps = plan.steps_per_episode as f64;

    for episode in 0..plan.episodes {
        while let Some(event) = events.next_if(|e| e.at_episode == episode) {
            env.apply_churn(event)
                .map_err(|source| SimError::Churn { episode, source })?;
        }
        let epsilon = epsilon_at(episode);
        sc.policy_mut().set_epsilon(epsilon);

        let (mut reward, mut cost, mut load, mut variance) = (0.0, 0.0, 0.0, 0.0);
        let (mut allocated, mut rejections) = (0usize, 0usize);
        for _ in 0..plan.steps_per_episode {
            let tx = env.generate_transaction();
            let a = sc.execute_transaction(env, tx)?;
            reward += a.reward;
            match a.quoted_amount() {
                Some(q) => {
                    cost += q;
                    allocated += 1;
                }
                None => rejections += 1,
            }
            load += env.mean_active_load();
            variance += env.active_load_variance();
            on_step(episode, &a);
        }
        stats.push(EpisodeStats {
            episode,
            mean_reward: reward / steps,
            mean_cost: if allocated == 0 { 0.0 } else { cost / allocated as f64 },
            mean_avg_load: load / steps,
            load_variance: variance / steps,
            rejections,
            allocated,
            active_devices: env.active_count(),
            epsilon: sc.policy().epsilon(),
        });
    }
    Ok(stats)
}

/// Trailing mean over at most `window` values ending at each index.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
