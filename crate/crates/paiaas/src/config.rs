//! Run configuration: a TOML file with documented defaults for every
//! omitted field. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use paiaas_core::agents::{AgentError, AgentKind, DqnConfig, DEFAULT_OMEGA};
use paiaas_core::env::{ChurnEvent, ChurnKind, EnvConfig, EnvError};
use paiaas_core::flaas::{FlaasError, FlaasSession};
use paiaas_core::sc::Terms;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: String, message: String },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Dotted path of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Syntax { path, .. } => Some(path),
            ConfigError::Invalid { field, .. } => Some(field),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[serde(alias = "Train")]
    Train,
    #[serde(alias = "Churn")]
    Churn,
    #[serde(alias = "CapacityCut")]
    CapacityCut,
    #[serde(alias = "Compare")]
    Compare,
    #[serde(alias = "Flaas")]
    Flaas,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Train,
        Scenario::Churn,
        Scenario::CapacityCut,
        Scenario::Compare,
        Scenario::Flaas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Train => "train",
            Scenario::Churn => "churn",
            Scenario::CapacityCut => "capacity_cut",
            Scenario::Compare => "compare",
            Scenario::Flaas => "flaas",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s.chars().filter(|c| *c != '_' && *c != '-').collect();
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().replace('_', "").eq_ignore_ascii_case(&folded))
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                format!("unknown scenario `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Factor applied by the default capacity cut.
pub const DEFAULT_CAPACITY_FACTOR: f64 = 0.5;
/// Devices leaving the fleet in the default churn event.
pub const DEFAULT_REMOVED_DEVICES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// Policy for the single-agent scenarios.
    pub agent: AgentKind,
    /// Policies run side by side by the compare scenario.
    pub compare_agents: Vec<AgentKind>,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Load threshold of the load-aware baseline.
    pub omega: f64,
    /// Master seed; the environment uses it directly, agents derive theirs.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Overrides the scenario's default schedule when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub churn_schedule: Option<Vec<ChurnEvent>>,
    pub env: EnvConfig,
    pub dqn: DqnConfig,
    pub terms: Terms,
    pub flaas: FlaasSession,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Train,
            agent: AgentKind::Dqn,
            compare_agents: AgentKind::ALL.to_vec(),
            episodes: 3000,
            steps_per_episode: 200,
            omega: DEFAULT_OMEGA,
            seed: 0,
            out_dir: PathBuf::from("out"),
            churn_schedule: None,
            env: EnvConfig::default(),
            dqn: DqnConfig::default(),
            terms: Terms::default(),
            flaas: FlaasSession::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax {
            path: String::from("<document>"),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Syntax {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.episodes == 0 {
            return Err(ConfigError::invalid("episodes", "must be at least 1"));
        }
        if self.steps_per_episode == 0 {
            return Err(ConfigError::invalid("steps_per_episode", "must be at least 1"));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(ConfigError::invalid("omega", "must lie in (0, 1]"));
        }
        if self.compare_agents.is_empty() {
            return Err(ConfigError::invalid("compare_agents", "must name at least one agent"));
        }
        for (i, kind) in self.compare_agents.iter().enumerate() {
            if self.compare_agents[..i].contains(kind) {
                return Err(ConfigError::invalid(format!("compare_agents[{i}]"), format!("`{kind}` listed twice")));
            }
        }
        self.env.validate().map_err(|e| match e {
            EnvError::Config { field, reason } => ConfigError::invalid(format!("env.{field}"), reason),
            other => ConfigError::invalid("env", other.to_string()),
        })?;
        self.dqn.validate().map_err(|e| match e {
            AgentError::Config(field) => ConfigError::invalid(format!("dqn.{field}"), "out of range"),
            other => ConfigError::invalid("dqn", other.to_string()),
        })?;
        if self.terms.max_cost_per_transaction.is_nan() || self.terms.max_cost_per_transaction <= 0.0 {
            return Err(ConfigError::invalid("terms.max_cost_per_transaction", "must be positive"));
        }
        if self.terms.block_size == 0 {
            return Err(ConfigError::invalid("terms.block_size", "must be at least 1"));
        }
        self.flaas.validate().map_err(|e| match e {
            FlaasError::Invalid(field) => ConfigError::invalid(format!("flaas.{field}"), "out of range"),
            other => ConfigError::invalid("flaas", other.to_string()),
        })?;
        if let Some(schedule) = &self.churn_schedule {
            self.validate_schedule(schedule)?;
        }
        Ok(())
    }

    fn validate_schedule(&self, schedule: &[ChurnEvent]) -> Result<(), ConfigError> {
        for (i, event) in schedule.iter().enumerate() {
            let field = |name: &str| format!("churn_schedule[{i}].{name}");
            if i > 0 && schedule[i - 1].at_episode > event.at_episode {
                return Err(ConfigError::invalid(field("at_episode"), "events must be sorted by episode"));
            }
            if event.at_episode >= self.episodes {
                return Err(ConfigError::invalid(field("at_episode"), "beyond the last episode"));
            }
            match &event.kind {
                ChurnKind::RemoveDevices(ids) => {
                    if let Some(id) = ids.iter().find(|&&id| id >= self.env.num_devices) {
                        return Err(ConfigError::invalid(field("kind"), format!("unknown device {id}")));
                    }
                }
                ChurnKind::ScaleCapacity(f) => {
                    if !(*f > 0.0 && *f <= 1.0) {
                        return Err(ConfigError::invalid(field("kind"), "capacity factor must lie in (0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn agent_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_documented_defaults() {
        let cfg = RunConfig::from_toml("scenario = \"Train\"\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.env.num_devices, 10);
        assert_eq!((cfg.env.capacity_range.0, cfg.env.capacity_range.1), (0.2e9, 0.8e9));
        assert_eq!((cfg.env.cost_range.0, cfg.env.cost_range.1), (1e-9, 1e-8));
        assert_eq!((cfg.env.demand_range.0, cfg.env.demand_range.1), (0.1e9, 2e9));
        assert_eq!(cfg.episodes, 3000);
        assert_eq!(cfg.steps_per_episode, 200);
    }

    #[test]
    fn zero_episodes_names_the_field() {
        let err = RunConfig::from_toml("episodes = 0\n").unwrap_err();
        assert_eq!(err.field(), Some("episodes"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = RunConfig::from_toml("episode = 10\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { .. }), "{err}");
        assert!(err.to_string().contains("episode"), "{err}");

        let err = RunConfig::from_toml("[env]\nnum_device = 3\n").unwrap_err();
        assert!(err.field().unwrap().starts_with("env"), "{err}");
    }

    #[test]
    fn nested_type_errors_carry_the_path() {
        let err = RunConfig::from_toml("[dqn]\nbatch_size = \"big\"\n").unwrap_err();
        assert_eq!(err.field(), Some("dqn.batch_size"), "{err}");
    }

    #[test]
    fn nested_validation_errors_carry_the_path() {
        let err = RunConfig::from_toml("[env]\nnum_devices = 0\n").unwrap_err();
        assert_eq!(err.field(), Some("env.num_devices"));
        let err = RunConfig::from_toml("[flaas]\nrounds = 0\n").unwrap_err();
        assert_eq!(err.field(), Some("flaas.rounds"));
    }

    #[test]
    fn malformed_syntax_is_an_error() {
        assert!(matches!(RunConfig::from_toml("episodes = ["), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn schedule_checks() {
        let unsorted = "episodes = 10\n\
            [[churn_schedule]]\nat_episode = 5\nkind = { scale_capacity = 0.5 }\n\
            [[churn_schedule]]\nat_episode = 2\nkind = { scale_capacity = 0.5 }\n";
        assert_eq!(RunConfig::from_toml(unsorted).unwrap_err().field(), Some("churn_schedule[1].at_episode"));

        let unknown = "episodes = 10\n[[churn_schedule]]\nat_episode = 5\nkind = { remove_devices = [1, 10] }\n";
        assert_eq!(RunConfig::from_toml(unknown).unwrap_err().field(), Some("churn_schedule[0].kind"));
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = RunConfig {
            scenario: Scenario::Churn,
            agent: AgentKind::La,
            compare_agents: vec![AgentKind::Oracle, AgentKind::Dqn],
            episodes: 40,
            seed: 99,
            churn_schedule: Some(vec![
                ChurnEvent { at_episode: 10, kind: ChurnKind::RemoveDevices(vec![1, 2]) },
                ChurnEvent { at_episode: 30, kind: ChurnKind::ScaleCapacity(0.25) },
            ]),
            ..RunConfig::default()
        };
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
        assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }

    #[test]
    fn scenario_names() {
        for sc in Scenario::ALL {
            assert_eq!(sc.name().parse::<Scenario>().unwrap(), sc);
        }
        assert_eq!("CapacityCut".parse::<Scenario>().unwrap(), Scenario::CapacityCut);
        assert_eq!("capacity-cut".parse::<Scenario>().unwrap(), Scenario::CapacityCut);
        assert!("warmup".parse::<Scenario>().is_err());
    }
}
