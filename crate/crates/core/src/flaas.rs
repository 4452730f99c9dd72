//! Federated-learning-as-a-service workflow driver.
//!
//! Every round issues one local-training transaction per participant through
//! the contract, waits for all of them, then issues the aggregation
//! transaction and waits for it. Federated computation is represented only by
//! cycle demands. Workflow messages that carry no provisioning decision
//! (authentication, permission grants, model exchange) are logged as named
//! events.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, TaskType};
use crate::sc::{ScError, Settlement, SmartContract};

/// Upper bound on idle steps spent waiting for a round barrier.
const MAX_BARRIER_STEPS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlaasError {
    #[error("invalid session: `{0}`")]
    Invalid(&'static str),
    #[error(transparent)]
    Contract(#[from] ScError),
    #[error("round {round}: every local-training transaction was rejected")]
    SessionFailed { round: usize, partial: FlaasReport },
    #[error("round {round} did not complete")]
    Stalled { round: usize, partial: FlaasReport },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandSpec {
    /// Drawn per transaction from the environment's demand range.
    Uniform,
    /// Cycles.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlaasSession {
    pub num_participants: usize,
    pub rounds: usize,
    pub local_training_demand: DemandSpec,
    pub aggregation_demand: DemandSpec,
}

impl Default for FlaasSession {
    fn default() -> Self {
        Self {
            num_participants: 4,
            rounds: 5,
            local_training_demand: DemandSpec::Uniform,
            aggregation_demand: DemandSpec::Uniform,
        }
    }
}

impl FlaasSession {
    pub fn validate(&self) -> Result<(), FlaasError> {
        if self.rounds == 0 {
            return Err(FlaasError::Invalid("rounds"));
        }
        if self.num_participants < 2 {
            return Err(FlaasError::Invalid("num_participants"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LocalTraining { participant: usize },
    Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxReport {
    pub tx_id: u64,
    pub role: Role,
    pub demand: f64,
    pub provider: Option<usize>,
    pub feasible_at_allocation: bool,
    pub quoted_amount: Option<f64>,
    pub issued_step: u64,
    pub completed_step: Option<u64>,
    pub completion_time: Option<f64>,
    pub paid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub transactions: Vec<TxReport>,
    pub cost: f64,
    pub mean_completion_time: f64,
    pub rejections: usize,
    pub started_step: u64,
    pub completed_step: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlaasReport {
    pub rounds: Vec<RoundReport>,
    pub transactions: usize,
    pub rejections: usize,
    pub total_cost: f64,
    /// Workflow messages without a provisioning effect, in order.
    pub events: Vec<String>,
}

struct Driver<'a> {
    sc: &'a mut SmartContract,
    env: &'a mut Environment,
    report: FlaasReport,
}

impl Driver<'_> {
    fn event(&mut self, name: &str) {
        self.report.events.push(String::from(name));
    }

    fn demand(&mut self, spec: DemandSpec) -> f64 {
        match spec {
            DemandSpec::Uniform => self.env.sample_demand(),
            DemandSpec::Fixed(d) => d,
        }
    }

    fn issue(&mut self, role: Role, demand: f64) -> Result<(TxReport, Vec<Settlement>), FlaasError> {
        let tx = self.env.make_transaction(TaskType::Computation, demand).map_err(ScError::from)?;
        let a = self.sc.execute_transaction(self.env, tx)?;
        let report = TxReport {
            tx_id: tx.id,
            role,
            demand,
            provider: a.provider(),
            feasible_at_allocation: a.feasible && a.provider().is_some(),
            quoted_amount: a.quoted_amount(),
            issued_step: a.step,
            completed_step: None,
            completion_time: None,
            paid: None,
        };
        Ok((report, a.settlements))
    }
}

fn apply_settlements(txs: &mut [TxReport], index: &BTreeMap<u64, usize>, settlements: &[Settlement]) {
    for s in settlements {
        if let Some(&k) = index.get(&s.payment.transaction_id) {
            let t = &mut txs[k];
            t.completed_step = Some(s.payment.settled_step);
            t.completion_time = Some(s.completion.completion_time);
            t.paid = Some(s.payment.amount);
        }
    }
}

pub fn run_flaas_session(
    session: &FlaasSession,
    sc: &mut SmartContract,
    env: &mut Environment,
) -> Result<FlaasReport, FlaasError> {
    session.validate()?;
    let mut driver = Driver { sc, env, report: FlaasReport::default() };
    for name in ["register_participants", "authenticate_consumer", "grant_permissions", "request_service"] {
        driver.event(name);
    }

    for round in 0..session.rounds {
        driver.event("distribute_global_model");
        let started_step = driver.env.steps();
        let mut txs = Vec::with_capacity(session.num_participants + 1);
        let mut index = BTreeMap::new();

        let phases: [Vec<Role>; 2] = [
            (0..session.num_participants).map(|participant| Role::LocalTraining { participant }).collect(),
            alloc::vec![Role::Aggregation],
        ];

        for (phase, roles) in phases.into_iter().enumerate() {
            let first = txs.len();
            for role in roles {
                let spec = match role {
                    Role::LocalTraining { .. } => session.local_training_demand,
                    Role::Aggregation => session.aggregation_demand,
                };
                let demand = driver.demand(spec);
                let (report, settled) = driver.issue(role, demand)?;
                index.insert(report.tx_id, txs.len());
                txs.push(report);
                apply_settlements(&mut txs, &index, &settled);
            }
            if phase == 0 && txs.iter().all(|t| t.provider.is_none()) {
                let mut partial = driver.report;
                partial.rounds.push(summarize(round, txs, started_step, started_step));
                return Err(FlaasError::SessionFailed { round, partial });
            }
            // barrier: everything allocated in this phase must finish
            let mut waited = 0;
            while txs[first..].iter().any(|t| t.provider.is_some() && t.completed_step.is_none()) {
                if waited >= MAX_BARRIER_STEPS {
                    let mut partial = driver.report;
                    let now = driver.env.steps();
                    partial.rounds.push(summarize(round, txs, started_step, now));
                    return Err(FlaasError::Stalled { round, partial });
                }
                let settled = driver.sc.advance(driver.env)?;
                apply_settlements(&mut txs, &index, &settled);
                waited += 1;
            }
            driver.event(if phase == 0 { "upload_local_models" } else { "publish_global_model" });
        }
        let completed = txs.iter().filter_map(|t| t.completed_step).max().unwrap_or(started_step);
        driver.report.rounds.push(summarize(round, txs, started_step, completed));
    }
    driver.event("terminate_service");

    let mut report = driver.report;
    report.transactions = report.rounds.iter().map(|r| r.transactions.len()).sum();
    report.rejections = report.rounds.iter().map(|r| r.rejections).sum();
    report.total_cost = report.rounds.iter().map(|r| r.cost).sum();
    Ok(report)
}

fn summarize(round: usize, transactions: Vec<TxReport>, started_step: u64, completed_step: u64) -> RoundReport {
    let cost = transactions.iter().filter_map(|t| t.paid).sum();
    let times: Vec<f64> = transactions.iter().filter_map(|t| t.completion_time).collect();
    let mean_completion_time = if times.is_empty() {
        0.0
    } else {
        times.iter().sum::<f64>() / times.len() as f64
    };
    let rejections = transactions.iter().filter(|t| t.provider.is_none()).count();
    RoundReport {
        round,
        transactions,
        cost,
        mean_completion_time,
        rejections,
        started_step,
        completed_step,
    }
}
