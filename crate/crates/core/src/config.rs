//! TOML deployment configuration.
//!
//! ```toml
//! out_dir = "out"
//!
//! [orchestrator]
//! threshold = 0.6
//! max_depth = 4
//! max_iterations = 16
//!
//! [planner]
//! kind = "mock"            # or "remote"
//! templates = "templates.json"
//! url = "http://127.0.0.1:8080/complete"
//! timeout_ms = 10000
//!
//! [data]
//! registry = "skills.json"
//! rules = "rules.json"
//! world = "worlds/field.json"
//!
//! [tiers]
//! transport = "tcp"
//! cloud_addr = "127.0.0.1:7401"
//! edge_addr = "127.0.0.1:7402"
//! device_addr = "127.0.0.1:7403"
//!
//! [world]
//! quadruped_speed = 1.0
//! ```
//!
//! Every table is optional. Relative paths resolve against the directory of
//! the config file. Anything left out falls back to the bundled data.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cloud_policy::RuleSet;
use crate::orchestrator::OrchestratorConfig;
use crate::planner::{MockPlanner, Planner, PlannerTemplateSet, RemotePlanner};
use crate::skills::{load_registry, SkillRegistry};
use crate::tiers::{Deployment, Transport};
use crate::world::{WorldConfig, WorldFixture};

pub const CONFIG_ENV: &str = "HIERTASK_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub out_dir: Option<PathBuf>,
    pub orchestrator: OrchestratorConfig,
    pub planner: PlannerConfig,
    pub data: DataConfig,
    pub tiers: TierConfig,
    pub world: WorldConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    pub templates: Option<PathBuf>,
    pub url: Option<String>,
    pub timeout_ms: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { kind: PlannerKind::Mock, templates: None, url: None, timeout_ms: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub registry: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    /// Overrides the world named by a scenario.
    pub world: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TierConfig {
    pub transport: Transport,
    pub cloud_addr: String,
    pub edge_addr: String,
    pub device_addr: String,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            transport: Transport::InProcess,
            cloud_addr: "127.0.0.1:7401".into(),
            edge_addr: "127.0.0.1:7402".into(),
            device_addr: "127.0.0.1:7403".into(),
        }
    }
}

impl TierConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut ports = BTreeSet::new();
        for (tier, addr) in [("cloud", &self.cloud_addr), ("edge", &self.edge_addr), ("device", &self.device_addr)] {
            let parsed: SocketAddr =
                addr.parse().map_err(|_| ConfigError::Invalid(format!("{tier}_addr `{addr}` is not host:port")))?;
            if self.transport == Transport::Tcp && !ports.insert(parsed.port()) {
                return Err(ConfigError::Invalid(format!("{tier}_addr reuses port {}", parsed.port())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("loading {what}: {message}")]
    Data { what: &'static str, message: String },
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads `path` and makes its relative paths absolute against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg =
            Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.out_dir,
            &mut cfg.planner.templates,
            &mut cfg.data.registry,
            &mut cfg.data.rules,
            &mut cfg.data.world,
        ] {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `explicit`, else the file named by `HIERTASK_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.orchestrator.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tiers.validate()?;
        if self.planner.kind == PlannerKind::Remote && self.planner.url.is_none() {
            return Err(ConfigError::Invalid("remote planner needs `url`".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<SkillRegistry, ConfigError> {
        match &self.data.registry {
            Some(p) => load_registry(p).map_err(|e| ConfigError::Data { what: "registry", message: e.to_string() }),
            None => Ok(SkillRegistry::bundled()),
        }
    }

    pub fn rules(&self) -> Result<RuleSet, ConfigError> {
        match &self.data.rules {
            Some(p) => RuleSet::load(p).map_err(|e| ConfigError::Data { what: "rules", message: e.to_string() }),
            None => Ok(RuleSet::bundled()),
        }
    }

    pub fn planner(&self) -> Result<Arc<dyn Planner>, ConfigError> {
        Ok(match self.planner.kind {
            PlannerKind::Mock => {
                let templates = match &self.planner.templates {
                    Some(p) => PlannerTemplateSet::load(p)
                        .map_err(|e| ConfigError::Data { what: "templates", message: e.to_string() })?,
                    None => PlannerTemplateSet::bundled(),
                };
                Arc::new(MockPlanner::new(templates))
            }
            PlannerKind::Remote => {
                let url = self
                    .planner
                    .url
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("remote planner needs `url`".into()))?;
                Arc::new(RemotePlanner::new(url, self.planner.timeout_ms))
            }
        })
    }

    /// The world file from the config, else the bundled world `name`.
    pub fn world_fixture(&self, name: &str) -> Result<WorldFixture, ConfigError> {
        match &self.data.world {
            Some(p) => WorldFixture::load(p).map_err(|e| ConfigError::Data { what: "world", message: e.to_string() }),
            None => WorldFixture::bundled(name)
                .ok_or_else(|| ConfigError::Data { what: "world", message: format!("no bundled world `{name}`") }),
        }
    }

    pub fn deployment(&self, world: &str) -> Result<Deployment, ConfigError> {
        Ok(Deployment {
            registry: self.registry()?,
            planner: self.planner()?,
            rules: self.rules()?,
            world: self.world_fixture(world)?,
            world_config: self.world.clone(),
            orchestrator: self.orchestrator.clone(),
            out_dir: self.out_dir.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        c.validate().unwrap();
        assert_eq!(c.orchestrator.max_depth, 4);
        assert_eq!(c.tiers.transport, Transport::InProcess);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "out_dir = \"out\"\n[data]\nrules = \"r.json\"\n[orchestrator]\nthreshold = 0.5\n")
            .unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.out_dir.unwrap(), dir.path().join("out"));
        assert_eq!(c.data.rules.unwrap(), dir.path().join("r.json"));
        assert_eq!(c.orchestrator.threshold, 0.5);
        assert_eq!(c.orchestrator.max_iterations, 16);
    }

    #[test]
    fn tcp_ports_must_differ() {
        let mut t = TierConfig { transport: Transport::Tcp, ..TierConfig::default() };
        t.validate().unwrap();
        t.device_addr = t.cloud_addr.clone();
        assert!(t.validate().is_err());
        t.transport = Transport::InProcess;
        t.validate().unwrap();
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Config::from_toml("[orchestrator]\nbogus = 1\n").is_err());
        let c = Config::from_toml("[orchestrator]\nthreshold = 1.5\n").unwrap();
        assert!(c.validate().is_err());
        let c = Config::from_toml("[planner]\nkind = \"remote\"\n").unwrap();
        assert!(c.validate().is_err());
        let c = Config::from_toml("[tiers]\nedge_addr = \"nowhere\"\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_data_file_is_reported() {
        let c = Config::from_toml("[data]\nregistry = \"/nonexistent/skills.json\"\n").unwrap();
        assert!(matches!(c.registry(), Err(ConfigError::Data { what: "registry", .. })));
        assert!(c.deployment("field").is_err());
        assert!(Config::default().world_fixture("moon").is_err());
    }

    #[test]
    fn defaults_build_a_deployment() {
        let d = Config::default().deployment("field").unwrap();
        assert_eq!(d.fleet().robots.len(), 2);
    }
}
