//! Rule-based allocation policies used as baselines and benchmarks.

use rand::Rng;

use super::dqn::uniform_choice;
use crate::mdp::{reward, Action, StateVector};

/// Load-aware rule: the cheapest feasible provider whose load is below
/// `omega`; otherwise the least loaded feasible provider. Ties go to the
/// lowest index.
pub fn la_select(state: &StateVector, omega: f64, mask: &[bool]) -> Option<usize> {
    let loads = state.loads();
    let costs = state.costs();
    let under: Option<usize> = (0..mask.len())
        .filter(|&i| mask[i] && loads[i] < omega)
        .fold(None, |best, i| match best {
            Some(b) if costs[b] <= costs[i] => Some(b),
            _ => Some(i),
        });
    under.or_else(|| {
        (0..mask.len())
            .filter(|&i| mask[i])
            .fold(None, |best, i| match best {
                Some(b) if loads[b] <= loads[i] => Some(b),
                _ => Some(i),
            })
    })
}

/// Per-step exhaustive maximizer of the allocation reward.
pub fn oracle_select(state: &StateVector, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &feasible) in mask.iter().enumerate() {
        if !feasible {
            continue;
        }
        let r = reward(state, Action(i), true);
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((i, r));
        }
    }
    best.map(|(i, _)| i)
}

pub fn random_select<R: Rng + ?Sized>(rng: &mut R, mask: &[bool]) -> Option<usize> {
    uniform_choice(rng, mask)
}
