//! The smart-contract agent.
//!
//! A contract binds a policy, its own chain and a set of terms to one tier of
//! the provisioning hierarchy. Both tiers run the identical execution path;
//! the tier only labels which providers the environment stands for.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Policy};
use crate::env::{AssignmentResult, CompletionEvent, EnvError, Environment, Transaction};
use crate::ledger::{Chain, Experience, PaymentRecord, DEFAULT_BLOCK_SIZE, DEFAULT_REPLAY_WINDOW};
use crate::mdp::{self, Action};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("completion of transaction {0} has no matching allocation")]
    Consistency(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Service provider selecting infrastructure providers.
    ServiceToInfrastructure,
    /// Infrastructure provider selecting pervasive devices.
    InfrastructureToDevices,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Terms {
    /// Currency units; quotes above this are refused.
    pub max_cost_per_transaction: f64,
    pub block_size: usize,
}

impl Default for Terms {
    fn default() -> Self {
        Self {
            max_cost_per_transaction: 25.0,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    /// The policy found no feasible provider.
    NoFeasibleProvider,
    /// The chosen provider failed the feasibility gate.
    Infeasible,
    /// The quote exceeded `max_cost_per_transaction`.
    TermsViolation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    Allocated {
        provider: usize,
        completion_estimate: f64,
        quoted_amount: f64,
    },
    Rejected {
        reason: RejectReason,
        provider: Option<usize>,
    },
}

/// A completion together with the payment it triggered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Settlement {
    pub completion: CompletionEvent,
    pub payment: PaymentRecord,
}

/// Result of executing one transaction through the contract.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub tx: Transaction,
    pub outcome: Outcome,
    pub reward: f64,
    /// Feasibility gate of the chosen provider at decision time.
    pub feasible: bool,
    /// Environment step the decision was taken in.
    pub step: u64,
    /// Settlements triggered by the environment step that followed.
    pub settlements: Vec<Settlement>,
    pub sealed_block: Option<u64>,
    pub loss: Option<f64>,
}

impl Allocation {
    pub fn provider(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Allocated { provider, .. } => Some(provider),
            Outcome::Rejected { .. } => None,
        }
    }

    pub fn quoted_amount(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Allocated { quoted_amount, .. } => Some(quoted_amount),
            Outcome::Rejected { .. } => None,
        }
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self.outcome, Outcome::Rejected { .. })
    }
}

#[derive(Clone, Copy, Debug)]
struct OpenAllocation {
    provider: usize,
    amount: f64,
}

#[derive(Clone, Debug)]
pub struct SmartContract {
    tier: Tier,
    policy: Policy,
    chain: Chain,
    terms: Terms,
    open: BTreeMap<u64, OpenAllocation>,
    executed: u64,
    rejected: u64,
    settled: u64,
    paid_total: f64,
}

impl SmartContract {
    pub fn new(tier: Tier, policy: Policy, terms: Terms) -> Self {
        Self {
            tier,
            policy,
            chain: Chain::new(terms.block_size.max(1), DEFAULT_REPLAY_WINDOW),
            terms,
            open: BTreeMap::new(),
            executed: 0,
            rejected: 0,
            settled: 0,
            paid_total: 0.0,
        }
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn terms(&self) -> &Terms {
        &self.terms
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut Policy {
        &mut self.policy
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn chain_mut(&mut self) -> &mut Chain {
        &mut self.chain
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn settled(&self) -> u64 {
        self.settled
    }

    /// Sum of every settled payment, in settlement order.
    pub fn paid_total(&self) -> f64 {
        self.paid_total
    }

    /// Allocations still awaiting completion.
    pub fn open_allocations(&self) -> usize {
        self.open.len()
    }

    /// Decides, assigns, rewards, lets the environment run one step and
    /// chains the resulting experience.
    pub fn execute_transaction(&mut self, env: &mut Environment, tx: Transaction) -> Result<Allocation, ScError> {
        let step = env.steps();
        let state = mdp::encode(env, &tx);
        let mask = mdp::feasibility_mask(env, &tx);
        let choice = self.policy.decide(&state, &mask);

        let (outcome, feasible) = match choice {
            None => (
                Outcome::Rejected { reason: RejectReason::NoFeasibleProvider, provider: None },
                false,
            ),
            Some(i) if !mask[i] => (
                Outcome::Rejected { reason: RejectReason::Infeasible, provider: Some(i) },
                false,
            ),
            Some(i) => {
                let quote = env.devices()[i].cost_per_cycle * tx.demand;
                if quote > self.terms.max_cost_per_transaction {
                    (
                        Outcome::Rejected { reason: RejectReason::TermsViolation, provider: Some(i) },
                        true,
                    )
                } else {
                    match env.assign(&tx, i)? {
                        AssignmentResult::Assigned { device, completion_time } => {
                            self.open.insert(tx.id, OpenAllocation { provider: device, amount: quote });
                            (
                                Outcome::Allocated {
                                    provider: device,
                                    completion_estimate: completion_time,
                                    quoted_amount: quote,
                                },
                                true,
                            )
                        }
                        AssignmentResult::Rejected => (
                            Outcome::Rejected { reason: RejectReason::Infeasible, provider: Some(i) },
                            false,
                        ),
                    }
                }
            }
        };
        let reward = match outcome {
            Outcome::Allocated { provider, .. } => mdp::reward(&state, Action(provider), true),
            Outcome::Rejected { .. } => 0.0,
        };
        if matches!(outcome, Outcome::Rejected { .. }) {
            self.rejected += 1;
        }

        let settlements = self.advance(env)?;
        let next_state = mdp::encode(env, &env.peek_transaction());
        // A declined decision is chained against provider 0 with zero reward.
        let sealed_block = self.chain.push_experience(Experience {
            state,
            action: choice.unwrap_or(0),
            reward,
            next_state,
            step,
        });
        self.executed += 1;
        let loss = self.policy.observe_step(&self.chain)?;

        Ok(Allocation { tx, outcome, reward, feasible, step, settlements, sealed_block, loss })
    }

    /// Advances the environment one step and settles what completed.
    pub fn advance(&mut self, env: &mut Environment) -> Result<Vec<Settlement>, ScError> {
        env.advance()
            .into_iter()
            .map(|completion| {
                let payment = self.settle(&completion)?;
                Ok(Settlement { completion, payment })
            })
            .collect()
    }

    /// Records the payment for a completed allocation. The provider's
    /// reputation has already been updated by the environment step that
    /// produced the completion.
    pub fn settle(&mut self, completion: &CompletionEvent) -> Result<PaymentRecord, ScError> {
        let open = self
            .open
            .remove(&completion.tx_id)
            .filter(|o| o.provider == completion.device)
            .ok_or(ScError::Consistency(completion.tx_id))?;
        let record = PaymentRecord {
            transaction_id: completion.tx_id,
            provider_id: open.provider,
            amount: open.amount,
            settled_step: completion.step,
        };
        self.chain.push_payment(record);
        self.settled += 1;
        self.paid_total += record.amount;
        Ok(record)
    }

    /// Steps the environment until every active device is idle, settling
    /// along the way, then seals the pending buffer. Work stranded on
    /// departed devices never completes and stays unpaid.
    pub fn drain_and_seal(&mut self, env: &mut Environment) -> Result<Vec<Settlement>, ScError> {
        let mut settlements = Vec::new();
        while !env.is_idle() {
            settlements.extend(self.advance(env)?);
        }
        self.chain.flush();
        Ok(settlements)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{DqnAgent, DqnConfig};
    use crate::env::{EnvConfig, Interval, TaskType};

    fn env(seed: u64) -> Environment {
        Environment::new(EnvConfig { seed, ..EnvConfig::default() }).unwrap()
    }

    fn contract(policy: Policy, block_size: usize) -> SmartContract {
        SmartContract::new(
            Tier::InfrastructureToDevices,
            policy,
            Terms { block_size, ..Terms::default() },
        )
    }

    #[test]
    fn feasible_fleet_allocates_to_a_feasible_provider() {
        let mut e = env(1);
        let mut sc = contract(Policy::Oracle, 32);
        let tx = e.generate_transaction();
        let mask = mdp::feasibility_mask(&e, &tx);
        let a = sc.execute_transaction(&mut e, tx).unwrap();
        let p = a.provider().unwrap();
        assert!(mask[p]);
        assert!(a.feasible);
        assert!(a.reward > 0.0);
    }

    #[test]
    fn saturated_fleet_rejects_but_still_chains() {
        let mut e = Environment::new(EnvConfig {
            num_devices: 2,
            capacity_range: Interval(1e8, 1e8),
            ..EnvConfig::default()
        })
        .unwrap();
        // 2e9 cycles fill a 1e8 Hz device over a 10 s horizon
        for id in 0..2 {
            let t = e.make_transaction(TaskType::Computation, 2e9).unwrap();
            e.assign(&t, id).unwrap();
        }
        for policy in [Policy::Oracle, Policy::dqn(DqnAgent::new(DqnConfig::default(), 2, 0).unwrap())] {
            let mut e = e.clone();
            let mut sc = contract(policy, 32);
            let tx = e.generate_transaction();
            let a = sc.execute_transaction(&mut e, tx).unwrap();
            assert!(a.is_rejected());
            assert_eq!(a.reward, 0.0);
            assert_eq!(sc.chain().experience_count(), 1);
            assert_eq!(sc.chain().pending()[0].reward, 0.0);
        }
    }

    #[test]
    fn block_of_two_seals_after_two_executions() {
        let mut e = env(2);
        let mut sc = contract(Policy::LoadAware { omega: 0.8 }, 2);
        for _ in 0..2 {
            let tx = e.generate_transaction();
            sc.execute_transaction(&mut e, tx).unwrap();
        }
        assert_eq!(sc.chain().blocks().len(), 1);
        assert!(sc.chain().pending().is_empty());
    }

    #[test]
    fn terms_violation_is_a_recorded_rejection() {
        let mut e = env(3);
        let mut sc = SmartContract::new(
            Tier::InfrastructureToDevices,
            Policy::Oracle,
            Terms { max_cost_per_transaction: 1e-6, block_size: 32 },
        );
        let tx = e.generate_transaction();
        let a = sc.execute_transaction(&mut e, tx).unwrap();
        assert!(matches!(
            a.outcome,
            Outcome::Rejected { reason: RejectReason::TermsViolation, .. }
        ));
        assert_eq!(a.reward, 0.0);
        assert_eq!(e.total_backlog(), 0.0);
        assert_eq!(sc.chain().experience_count(), 1);
    }

    #[test]
    fn settlement_amount_is_rate_times_demand() {
        let mut e = Environment::new(EnvConfig {
            num_devices: 1,
            capacity_range: Interval(4e8, 4e8),
            cost_range: Interval(1e-8, 1e-8),
            ..EnvConfig::default()
        })
        .unwrap();
        let mut sc = contract(Policy::Oracle, 32);
        let tx = e.make_transaction(TaskType::Computation, 4e8).unwrap();
        let a = sc.execute_transaction(&mut e, tx).unwrap();
        assert_eq!(a.settlements.len(), 1);
        let paid = a.settlements[0].payment;
        assert!((paid.amount - 4.0).abs() < 1e-12);
        assert_eq!(paid.transaction_id, tx.id);
    }

    #[test]
    fn distinct_settlements_and_unknown_completions() {
        let mut e = env(4);
        let mut sc = contract(Policy::Oracle, 32);
        let mut paid = Vec::new();
        for _ in 0..20 {
            let tx = e.generate_transaction();
            paid.extend(sc.execute_transaction(&mut e, tx).unwrap().settlements);
        }
        paid.extend(sc.drain_and_seal(&mut e).unwrap());
        let paid: Vec<PaymentRecord> = paid.iter().map(|s| s.payment).collect();
        let mut ids: Vec<u64> = paid.iter().map(|p| p.transaction_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), paid.len());
        assert!(paid.iter().all(|p| p.amount > 0.0));

        let bogus = CompletionEvent { tx_id: 9999, device: 0, demand: 1e9, completion_time: 1.0, step: 0 };
        assert_eq!(sc.settle(&bogus), Err(ScError::Consistency(9999)));
    }

    #[test]
    fn payments_are_conserved() {
        let mut e = env(5);
        let mut sc = contract(Policy::LoadAware { omega: 0.8 }, 8);
        let mut expected = 0.0;
        let mut allocated = Vec::new();
        for _ in 0..300 {
            let tx = e.generate_transaction();
            let a = sc.execute_transaction(&mut e, tx).unwrap();
            if let Some(p) = a.provider() {
                allocated.push((tx.id, e.devices()[p].cost_per_cycle * tx.demand));
            }
        }
        sc.drain_and_seal(&mut e).unwrap();
        let mut recorded: Vec<_> = sc.chain().payments().map(|p| (p.transaction_id, p.amount)).collect();
        recorded.sort_by_key(|p| p.0);
        assert_eq!(recorded, allocated);
        for p in sc.chain().payments() {
            expected += p.amount;
        }
        assert_eq!(sc.paid_total(), expected);
        assert_eq!(sc.chain().experience_count() as u64, sc.executed());
        assert!(sc.chain().verify().is_valid());
    }

    #[test]
    fn tier_label_changes_no_behaviour() {
        let run = |tier| {
            let mut e = env(6);
            let agent = DqnAgent::new(DqnConfig::default(), 10, 42).unwrap();
            let mut sc = SmartContract::new(tier, Policy::dqn(agent), Terms::default());
            for _ in 0..400 {
                let tx = e.generate_transaction();
                sc.execute_transaction(&mut e, tx).unwrap();
            }
            sc.chain().to_jsonl()
        };
        assert_eq!(run(Tier::ServiceToInfrastructure), run(Tier::InfrastructureToDevices));
    }
}
