//! Scenario execution and the files each run leaves in its output directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use paiaas_core::agents::{AgentError, AgentKind, DqnAgent, Policy};
use paiaas_core::env::{ChurnEvent, ChurnKind, EnvError, Environment};
use paiaas_core::flaas::{run_flaas_session, FlaasError, FlaasReport};
use paiaas_core::ledger::VerificationReport;
use paiaas_core::sc::{Allocation, ScError, SmartContract, Tier};
use paiaas_core::sim::{mean, rolling_mean, run_episodes, EpisodePlan, EpisodeStats, SimError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint;
use crate::config::{ConfigError, RunConfig, Scenario, DEFAULT_CAPACITY_FACTOR, DEFAULT_REMOVED_DEVICES};

pub const METRICS_HEADER: &str =
    "episode,mean_reward,rolling100_reward,mean_cost,mean_avg_load,rejections,active_devices,epsilon,agent";
pub const ALLOCATIONS_HEADER: &str = "step,tx_id,provider,reward,quoted_amount";
pub const ROLLING_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{agent}: {source}")]
    Sim { agent: AgentKind, source: SimError },
    #[error(transparent)]
    Contract(#[from] ScError),
    #[error(transparent)]
    Flaas(#[from] FlaasError),
    #[error("{agent}: ledger failed verification: {report:?}")]
    Ledger { agent: AgentKind, report: VerificationReport },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// One policy driven through one environment for a whole plan.
pub struct AgentRun {
    pub kind: AgentKind,
    pub stats: Vec<EpisodeStats>,
    pub rolling: Vec<f64>,
    pub schedule: Vec<ChurnEvent>,
    pub env: Environment,
    pub contract: SmartContract,
}

impl AgentRun {
    pub fn final_rolling(&self) -> f64 {
        self.rolling.last().copied().unwrap_or(0.0)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.mean_reward).collect()
    }

    pub fn write_metrics_rows(&self, out: &mut String) {
        for (s, roll) in self.stats.iter().zip(&self.rolling) {
            writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{},{},{:.6},{}",
                s.episode, s.mean_reward, roll, s.mean_cost, s.mean_avg_load, s.rejections, s.active_devices, s.epsilon, self.kind
            )
            .unwrap();
        }
    }
}

/// Indices of the `n` active devices with the lowest serving rate.
pub fn cheapest_devices(env: &Environment, n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = env.devices().iter().filter(|d| d.active).map(|d| d.id).collect();
    ids.sort_by(|&a, &b| env.devices()[a].cost_per_cycle.total_cmp(&env.devices()[b].cost_per_cycle));
    ids.truncate(n);
    ids
}

/// The configured schedule, or the scenario's default: churn removes the
/// three cheapest devices at half the run and halves capacity at three
/// quarters; a capacity cut only halves capacity at three quarters.
pub fn resolve_schedule(cfg: &RunConfig, env: &Environment) -> Vec<ChurnEvent> {
    if let Some(schedule) = &cfg.churn_schedule {
        return schedule.clone();
    }
    let cut = ChurnEvent {
        at_episode: cfg.episodes * 3 / 4,
        kind: ChurnKind::ScaleCapacity(DEFAULT_CAPACITY_FACTOR),
    };
    match cfg.scenario {
        Scenario::Churn => vec![
            ChurnEvent {
                at_episode: cfg.episodes / 2,
                kind: ChurnKind::RemoveDevices(cheapest_devices(env, DEFAULT_REMOVED_DEVICES)),
            },
            cut,
        ],
        Scenario::CapacityCut => vec![cut],
        Scenario::Train | Scenario::Compare | Scenario::Flaas => Vec::new(),
    }
}

pub fn build_environment(cfg: &RunConfig) -> Result<Environment, RunError> {
    let env_cfg = paiaas_core::EnvConfig { seed: cfg.seed, ..cfg.env.clone() };
    Ok(Environment::new(env_cfg)?)
}

pub fn build_policy(cfg: &RunConfig, kind: AgentKind) -> Result<Policy, RunError> {
    Ok(match kind {
        AgentKind::Dqn => Policy::dqn(DqnAgent::new(cfg.dqn.clone(), cfg.env.num_devices, cfg.agent_seed())?),
        AgentKind::La => Policy::LoadAware { omega: cfg.omega },
        AgentKind::Random => Policy::random(cfg.agent_seed()),
        AgentKind::Oracle => Policy::Oracle,
    })
}

/// Runs `kind` over the configured plan, drains outstanding work and checks
/// the ledger. `on_step` sees every allocation in order.
pub fn simulate<F>(cfg: &RunConfig, kind: AgentKind, on_step: F) -> Result<AgentRun, RunError>
where
    F: FnMut(usize, &Allocation),
{
    let mut env = build_environment(cfg)?;
    let schedule = resolve_schedule(cfg, &env);
    let mut contract = SmartContract::new(Tier::InfrastructureToDevices, build_policy(cfg, kind)?, cfg.terms);
    let plan = EpisodePlan {
        episodes: cfg.episodes,
        steps_per_episode: cfg.steps_per_episode,
        churn_schedule: schedule.clone(),
    };
    let dqn = cfg.dqn.clone();
    let epsilon_at = move |episode| match kind {
        AgentKind::Dqn => dqn.epsilon_at(episode),
        _ => 0.0,
    };
    let stats = run_episodes(&mut env, &mut contract, &plan, epsilon_at, on_step)
        .map_err(|source| RunError::Sim { agent: kind, source })?;
    contract.drain_and_seal(&mut env)?;
    check_ledger(kind, &contract)?;
    let rewards: Vec<f64> = stats.iter().map(|s| s.mean_reward).collect();
    Ok(AgentRun {
        kind,
        rolling: rolling_mean(&rewards, ROLLING_WINDOW),
        stats,
        schedule,
        env,
        contract,
    })
}

fn check_ledger(kind: AgentKind, contract: &SmartContract) -> Result<(), RunError> {
    let report = contract.chain().verify();
    if report.is_valid() {
        Ok(())
    } else {
        Err(RunError::Ledger { agent: kind, report })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent: AgentKind,
    pub episodes: usize,
    pub transactions: u64,
    pub rejections: u64,
    pub final_rolling_reward: f64,
    pub mean_reward: f64,
    /// Final rolling reward of the greedy oracle on the same seed and schedule.
    pub oracle_final_rolling_reward: f64,
    pub oracle_ratio: f64,
    pub total_payments: f64,
    pub settled_transactions: u64,
    pub blocks: usize,
    pub chain_valid: bool,
    pub active_devices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaasSummary {
    pub transactions: usize,
    pub rejections: usize,
    pub total_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub agents: Vec<AgentSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flaas: Option<FlaasSummary>,
}

/// Oracle fields are filled in once the reference run is known.
fn summarize(run: &AgentRun) -> AgentSummary {
    let final_rolling = run.final_rolling();
    AgentSummary {
        agent: run.kind,
        episodes: run.stats.len(),
        transactions: run.contract.executed(),
        rejections: run.contract.rejected(),
        final_rolling_reward: final_rolling,
        mean_reward: mean(&run.rewards()),
        oracle_final_rolling_reward: 0.0,
        oracle_ratio: 0.0,
        total_payments: run.contract.paid_total(),
        settled_transactions: run.contract.settled(),
        blocks: run.contract.chain().blocks().len(),
        chain_valid: run.contract.chain().verify().is_valid(),
        active_devices: run.env.active_count(),
    }
}

/// Writes the chain one block per line.
pub fn write_chain(contract: &SmartContract, path: &Path) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for block in contract.chain().blocks() {
        w.write_all(block.to_line().as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Streams the per-transaction allocation log to `path`.
struct AllocationLog {
    path: PathBuf,
    writer: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl AllocationLog {
    fn create(path: PathBuf) -> Result<Self, RunError> {
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut log = Self { path, writer: BufWriter::new(file), error: None };
        log.line(format_args!("{ALLOCATIONS_HEADER}"));
        Ok(log)
    }

    fn line(&mut self, args: std::fmt::Arguments<'_>) {
        if self.error.is_none() {
            if let Err(e) = self.writer.write_fmt(args).and_then(|_| self.writer.write_all(b"\n")) {
                self.error = Some(e);
            }
        }
    }

    fn record(&mut self, a: &Allocation) {
        match (a.provider(), a.quoted_amount()) {
            (Some(p), Some(q)) => self.line(format_args!("{},{},{},{:.9},{:.9}", a.step, a.tx.id, p, a.reward, q)),
            _ => self.line(format_args!("{},{},REJECTED,{:.9},", a.step, a.tx.id, a.reward)),
        }
    }

    fn finish(mut self) -> Result<(), RunError> {
        if let Some(e) = self.error.take() {
            return Err(RunError::Io { path: self.path, source: e });
        }
        self.writer.flush().map_err(io_err(&self.path))
    }
}

/// Runs one agent, streaming its allocation log into `dir`.
fn simulate_logged(cfg: &RunConfig, kind: AgentKind, dir: &Path) -> Result<AgentRun, RunError> {
    let mut log = AllocationLog::create(dir.join("allocations.csv"))?;
    let run = simulate(cfg, kind, |_, a| log.record(a))?;
    log.finish()?;
    Ok(run)
}

fn write_agent_files(run: &AgentRun, dir: &Path) -> Result<(), RunError> {
    write_chain(&run.contract, &dir.join("chain.jsonl"))?;
    if let Some(agent) = run.contract.policy().as_dqn() {
        write_file(&dir.join("agent.ckpt"), &checkpoint::encode(agent))?;
    }
    Ok(())
}

/// Executes the configured scenario and writes every artifact under
/// `cfg.out_dir`.
pub fn run_scenario(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut summaries = Vec::new();
    let mut oracle_final = None;
    let mut flaas = None;

    let agents = match cfg.scenario {
        Scenario::Compare => cfg.compare_agents.clone(),
        _ => vec![cfg.agent],
    };
    for kind in agents {
        let dir = match cfg.scenario {
            Scenario::Compare => out.join(kind.name()),
            _ => out.to_path_buf(),
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut run = simulate_logged(cfg, kind, &dir)?;
        if cfg.scenario == Scenario::Flaas {
            let report = run_session(cfg, &mut run)?;
            write_json(&out.join("flaas_report.json"), &report)?;
            flaas = Some(FlaasSummary {
                transactions: report.transactions,
                rejections: report.rejections,
                total_cost: report.total_cost,
            });
        }
        write_agent_files(&run, &dir)?;
        run.write_metrics_rows(&mut metrics);
        if kind == AgentKind::Oracle {
            oracle_final = Some(run.final_rolling());
        }
        summaries.push(summarize(&run));
    }
    write_file(&out.join("metrics.csv"), metrics.as_bytes())?;

    let oracle_final = match oracle_final {
        Some(v) => v,
        None => simulate(cfg, AgentKind::Oracle, |_, _| {})?.final_rolling(),
    };
    for s in &mut summaries {
        s.oracle_final_rolling_reward = oracle_final;
        s.oracle_ratio = if oracle_final > 0.0 { s.final_rolling_reward / oracle_final } else { 0.0 };
    }
    let summary = RunSummary { scenario: cfg.scenario, seed: cfg.seed, agents: summaries, flaas };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs the FL session on a trained contract, with exploration at its final
/// level, then drains and re-checks the ledger.
fn run_session(cfg: &RunConfig, run: &mut AgentRun) -> Result<FlaasReport, RunError> {
    let report = run_flaas_session(&cfg.flaas, &mut run.contract, &mut run.env)?;
    run.contract.drain_and_seal(&mut run.env)?;
    check_ledger(run.kind, &run.contract)?;
    Ok(report)
}
