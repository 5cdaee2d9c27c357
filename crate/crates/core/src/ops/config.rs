use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fabric::ExecutorConfig;
use crate::llm::RateTable;
use crate::manager::ManagerConfig;

use super::OpsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Scripted {
        fixture: PathBuf,
        #[serde(default)]
        latency_ms: u64,
    },
    /// A hosted provider profile. Accepted by the parser so configs can
    /// name one; this build has no network adapter and refuses to start.
    Remote { profile: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub registry_addr: String,
    pub proxy_addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { registry_addr: "127.0.0.1:7401".into(), proxy_addr: "127.0.0.1:7402".into() }
    }
}

/// Everything a run depends on besides the fixture and the scripted
/// behavior. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Holds `blobs/`, `state/`, `ws/` and the ingest catalog.
    pub root: PathBuf,
    pub backend: BackendConfig,
    #[serde(default)]
    pub registry_seed: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default = "proxy_cache")]
    pub proxy_cache_bytes: u64,
    #[serde(default)]
    pub rate_limit_per_s: Option<f64>,
    #[serde(default)]
    pub executor: ExecutorConfig,
    #[serde(default)]
    pub manager: ManagerConfig,
    #[serde(default)]
    pub rates: RateTable,
    #[serde(default)]
    pub serve: ServeConfig,
}

fn proxy_cache() -> u64 {
    64 << 20
}

impl RuntimeConfig {
    pub fn scripted(root: impl Into<PathBuf>, fixture: impl Into<PathBuf>) -> Self {
        RuntimeConfig {
            root: root.into(),
            backend: BackendConfig::Scripted { fixture: fixture.into(), latency_ms: 0 },
            registry_seed: None,
            prompts_dir: None,
            proxy_cache_bytes: proxy_cache(),
            rate_limit_per_s: None,
            executor: ExecutorConfig::default(),
            manager: ManagerConfig::default(),
            rates: RateTable::default(),
            serve: ServeConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, OpsError> {
        toml::from_str(text).map_err(|e| OpsError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, OpsError> {
        let text = std::fs::read_to_string(path).map_err(|e| OpsError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| OpsError::Config(format!("{}: {e}", path.display())))?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.root);
        if let BackendConfig::Scripted { fixture, .. } = &mut self.backend {
            fix(fixture);
        }
        if let Some(p) = &mut self.registry_seed {
            fix(p);
        }
        if let Some(p) = &mut self.prompts_dir {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_rebases() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RuntimeConfig::scripted("run", "fixtures/script.json");
        cfg.manager.round_budget = 6;
        cfg.executor.llm_only_cap = 8;
        let path = dir.path().join("fanout.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        let back = RuntimeConfig::load(&path).unwrap();
        assert_eq!(back.root, dir.path().join("run"));
        assert_eq!(back.backend, BackendConfig::Scripted { fixture: dir.path().join("fixtures/script.json"), latency_ms: 0 });
        assert_eq!(back.manager.round_budget, 6);
        assert_eq!(back.executor.llm_only_cap, 8);
        assert_eq!(RuntimeConfig { root: back.root.clone(), backend: back.backend.clone(), ..cfg }, back);
    }

    #[test]
    fn minimal_and_bad_configs() {
        let cfg = RuntimeConfig::parse("root = \"r\"\n[backend]\nkind = \"remote\"\nprofile = \"hosted\"\n").unwrap();
        assert_eq!(cfg.executor, ExecutorConfig::default());
        assert!(matches!(RuntimeConfig::parse("root = 3"), Err(OpsError::Config(_))));
        assert!(matches!(RuntimeConfig::parse("root = \"r\"\nbogus = 1\n[backend]\nkind = \"remote\"\nprofile = \"x\""), Err(OpsError::Config(_))));
        assert!(matches!(RuntimeConfig::load(Path::new("/nonexistent/fanout.toml")), Err(OpsError::Config(_))));
    }
}
