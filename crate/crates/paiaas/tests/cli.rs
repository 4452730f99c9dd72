use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use paiaas::checkpoint;
use paiaas::runner::{METRICS_HEADER, RunSummary};
use paiaas::RunConfig;
use paiaas_core::ledger::{verify_dump, Chain};
use tempfile::TempDir;

fn paiaas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paiaas")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_ok(dir: &TempDir, body: &str, extra: &[&str]) -> Output {
    let config = write_config(dir.path(), body);
    let out = dir.path().join("out");
    let mut args = vec!["run", "--config", &config, "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let output = paiaas(&args);
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    output
}

struct Row {
    mean_reward: f64,
    rolling: f64,
    mean_cost: f64,
    mean_avg_load: f64,
    rejections: usize,
    active_devices: usize,
    agent: String,
}

fn metrics(dir: &Path) -> Vec<Row> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 9, "{l}");
            Row {
                mean_reward: f[1].parse().unwrap(),
                rolling: f[2].parse().unwrap(),
                mean_cost: f[3].parse().unwrap(),
                mean_avg_load: f[4].parse().unwrap(),
                rejections: f[5].parse().unwrap(),
                active_devices: f[6].parse().unwrap(),
                agent: f[8].to_string(),
            }
        })
        .collect()
}

fn summary(dir: &Path) -> RunSummary {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_every_declared_artifact() {
    let dir = TempDir::new().unwrap();
    run_ok(&dir, "scenario = \"Train\"\nepisodes = 6\nsteps_per_episode = 50\n", &["--seed", "3"]);
    let out = dir.path().join("out");
    for name in ["metrics.csv", "chain.jsonl", "agent.ckpt", "summary.json", "allocations.csv", "config.toml"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let rows = metrics(&out);
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.mean_avg_load));
        assert!((0.0..=2.0).contains(&r.mean_reward));
        assert_eq!(r.agent, "dqn");
    }
    assert!(verify_dump(&fs::read(out.join("chain.jsonl")).unwrap()).is_valid());

    let (config, net) = checkpoint::decode(&fs::read(out.join("agent.ckpt")).unwrap()).unwrap();
    assert_eq!(config, RunConfig::default().dqn);
    assert_eq!(net.outputs(), 10);

    let echoed = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed.seed, 3);
    assert_eq!(echoed.episodes, 6);

    let allocations = fs::read_to_string(out.join("allocations.csv")).unwrap();
    assert_eq!(allocations.lines().count(), 1 + 6 * 50);
}

#[test]
fn metric_costs_match_ledger_payments_on_a_drained_run() {
    let dir = TempDir::new().unwrap();
    run_ok(&dir, "scenario = \"train\"\nagent = \"la\"\nepisodes = 5\nsteps_per_episode = 80\n", &[]);
    let out = dir.path().join("out");
    let from_metrics: f64 = metrics(&out)
        .iter()
        .map(|r| r.mean_cost * (80 - r.rejections) as f64)
        .sum();
    let chain = Chain::from_dump(&fs::read(out.join("chain.jsonl")).unwrap(), 32, 10_000).unwrap();
    let from_ledger: f64 = chain.payments().map(|p| p.amount).sum();
    let s = summary(&out);
    let paid = s.agents[0].total_payments;
    assert!((from_metrics - paid).abs() <= 1e-9 * paid, "{from_metrics} vs {paid}");
    // Dumped amounts carry six decimals.
    let quantum = 0.5e-6 * chain.payments().count() as f64;
    assert!((paid - from_ledger).abs() <= quantum, "{paid} vs {from_ledger}");
    assert_eq!(chain.experience_count() as u64, s.agents[0].transactions);
    assert_eq!(s.agents[0].transactions, 400);
}

#[test]
fn churn_drops_the_fleet_from_ten_to_seven() {
    let dir = TempDir::new().unwrap();
    let body = "scenario = \"churn\"\nagent = \"oracle\"\nepisodes = 8\nsteps_per_episode = 30\n\
                [[churn_schedule]]\nat_episode = 3\nkind = { remove_devices = [0, 4, 9] }\n";
    run_ok(&dir, body, &[]);
    let active: Vec<usize> = metrics(&dir.path().join("out")).iter().map(|r| r.active_devices).collect();
    assert_eq!(active, vec![10, 10, 10, 7, 7, 7, 7, 7]);
}

#[test]
fn default_churn_schedule_fires_both_events() {
    let dir = TempDir::new().unwrap();
    run_ok(&dir, "scenario = \"churn\"\nagent = \"la\"\nepisodes = 8\nsteps_per_episode = 30\n", &[]);
    let rows = metrics(&dir.path().join("out"));
    let active: Vec<usize> = rows.iter().map(|r| r.active_devices).collect();
    assert_eq!(active, vec![10, 10, 10, 10, 7, 7, 7, 7]);
}

#[test]
fn compare_with_only_the_oracle_is_flat() {
    let dir = TempDir::new().unwrap();
    let body = "scenario = \"compare\"\ncompare_agents = [\"oracle\"]\nepisodes = 300\nsteps_per_episode = 100\n";
    run_ok(&dir, body, &[]);
    let out = dir.path().join("out");
    let rows = metrics(&out);
    assert!(rows.iter().all(|r| r.agent == "oracle"));
    let settled: Vec<f64> = rows[100..].iter().map(|r| r.rolling).collect();
    let lo = settled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = settled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi - lo < 0.05 * hi, "rolling reward ranges over [{lo}, {hi}]");
    assert!(out.join("oracle").join("chain.jsonl").is_file());
    assert!((summary(&out).agents[0].oracle_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn compare_co_writes_every_agent() {
    let dir = TempDir::new().unwrap();
    run_ok(&dir, "scenario = \"compare\"\nepisodes = 3\nsteps_per_episode = 40\n", &[]);
    let out = dir.path().join("out");
    let rows = metrics(&out);
    assert_eq!(rows.len(), 12);
    for agent in ["dqn", "la", "random", "oracle"] {
        assert_eq!(rows.iter().filter(|r| r.agent == agent).count(), 3);
        assert!(out.join(agent).join("chain.jsonl").is_file());
    }
    assert!(out.join("dqn").join("agent.ckpt").is_file());
    assert_eq!(summary(&out).agents.len(), 4);
}

#[test]
fn flaas_writes_its_report() {
    let dir = TempDir::new().unwrap();
    run_ok(&dir, "scenario = \"flaas\"\nagent = \"la\"\nepisodes = 2\nsteps_per_episode = 20\n", &[]);
    let out = dir.path().join("out");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("flaas_report.json")).unwrap()).unwrap();
    assert_eq!(report["transactions"], 25);
    assert_eq!(report["rounds"].as_array().unwrap().len(), 5);
    assert_eq!(summary(&out).flaas.unwrap().transactions, 25);
    assert!(verify_dump(&fs::read(out.join("chain.jsonl")).unwrap()).is_valid());
}

#[test]
fn flags_override_the_file() {
    let dir = TempDir::new().unwrap();
    let output = run_ok(
        &dir,
        "scenario = \"churn\"\nagent = \"dqn\"\nepisodes = 2\nsteps_per_episode = 10\n",
        &["--scenario", "train", "--agent", "random", "--seed", "11"],
    );
    assert!(String::from_utf8_lossy(&output.stdout).contains("random"));
    let s = summary(&dir.path().join("out"));
    assert_eq!(s.seed, 11);
    assert_eq!(s.scenario, paiaas::Scenario::Train);
    assert_eq!(s.agents[0].agent.name(), "random");
}

#[test]
fn same_seed_gives_identical_files() {
    let read = |dir: &TempDir| {
        let out = dir.path().join("out");
        (fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("chain.jsonl")).unwrap())
    };
    let body = "scenario = \"train\"\nepisodes = 4\nsteps_per_episode = 60\nseed = 5\n";
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_ok(&a, body, &[]);
    run_ok(&b, body, &[]);
    assert!(read(&a) == read(&b));
}

#[test]
fn bad_configs_fail_with_the_field_named() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("episodes = 0\n", "episodes"),
        ("episodez = 10\n", "episodez"),
        ("[env]\nnum_devices = 0\n", "env.num_devices"),
        ("[dqn]\ngamma = \"high\"\n", "dqn.gamma"),
        ("steps_per_episode = [\n", "steps_per_episode"),
    ];
    for (body, field) in cases {
        let config = write_config(dir.path(), body);
        let output = paiaas(&["run", "--config", &config]);
        assert!(!output.status.success(), "{body}");
        let stderr = String::from_utf8_lossy(&output.stderr);
        assert!(stderr.contains(field), "{body}: {stderr}");
    }
    let missing = paiaas(&["run", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
    let bad_flag = paiaas(&["run", "--config", "x.toml", "--agent", "greedy"]);
    assert!(!bad_flag.status.success());
}

#[test]
fn unwritable_out_dir_is_an_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"").unwrap();
    let config = write_config(dir.path(), "episodes = 1\nsteps_per_episode = 5\n");
    let output = paiaas(&["run", "--config", &config, "--out-dir", blocker.join("sub").to_str().unwrap()]);
    assert!(!output.status.success());
}

#[test]
fn printed_defaults_parse_back() {
    let output = paiaas(&["defaults"]);
    assert!(output.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8(output.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
