use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use paiaas::{run_scenario, RunConfig, Scenario};
use paiaas_core::agents::AgentKind;

#[derive(Parser)]
#[command(name = "paiaas", version, about = "Smart-contract DQN resource allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario; flags override values from the config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long, value_parser = parse_agent)]
        agent: Option<AgentKind>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

fn parse_agent(s: &str) -> Result<AgentKind, String> {
    AgentKind::from_name(&s.to_ascii_lowercase()).ok_or_else(|| format!("unknown agent `{s}` (expected dqn, la, random or oracle)"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Defaults => print!("{}", RunConfig::default().to_toml()),
        Command::Run { config, seed, scenario, agent, out_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(scenario) = scenario {
                cfg.scenario = scenario;
            }
            if let Some(agent) = agent {
                cfg.agent = agent;
            }
            if let Some(out_dir) = out_dir {
                cfg.out_dir = out_dir;
            }
            cfg.validate()?;
            let summary = run_scenario(&cfg).with_context(|| format!("scenario `{}` failed", cfg.scenario))?;
            for a in &summary.agents {
                println!(
                    "{:<6} transactions {:>8}  rejected {:>6}  final rolling reward {:.4}  oracle ratio {:.3}  payments {:.3}",
                    a.agent, a.transactions, a.rejections, a.final_rolling_reward, a.oracle_ratio, a.total_payments
                );
            }
            if let Some(f) = &summary.flaas {
                println!("flaas  transactions {:>8}  rejected {:>6}  total cost {:.3}", f.transactions, f.rejections, f.total_cost);
            }
            println!("artifacts in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
