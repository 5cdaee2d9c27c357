//! Worker capabilities and agent presets.
//!
//! The registry only describes capabilities. Each carries an opaque
//! `locator` that the worker runtime's launcher table maps to something
//! runnable; nothing here executes capability code.
//!
//! Seed files are TOML:
//!
//! ```toml
//! [[capability]]
//! id = "word_count"
//! name = "Word counter"
//! description = "Counts words in a text argument."
//! kind = "tool"
//! locator = "builtin:word_count"
//! ```

mod net;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ModelGrade;

pub use net::{RegistryClient, RegistryServer, PROTOCOL};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
    #[error("duplicate capability `{0}`")]
    DuplicateCapability(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error("bad registry seed: {0}")]
    Seed(String),
    #[error("registry endpoint {addr}: {reason}")]
    Remote { addr: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityKind {
    /// Long-lived for the enclosing subtask.
    Service,
    /// Stateless, one invocation at a time.
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub id: String,
    pub name: String,
    pub description: String,
    pub kind: CapabilityKind,
    pub locator: String,
}

/// Read access to a capability registry, local or remote.
pub trait CapabilitySource: Send + Sync {
    fn list(&self) -> Result<Vec<Capability>, RegistryError>;
    fn get(&self, id: &str) -> Result<Capability, RegistryError>;
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    caps: BTreeMap<String, Capability>,
}

#[derive(Deserialize)]
struct Seed {
    #[serde(default)]
    capability: Vec<Capability>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_capabilities(caps: impl IntoIterator<Item = Capability>) -> Result<Registry, RegistryError> {
        let mut r = Registry::new();
        for c in caps {
            r.insert(c)?;
        }
        Ok(r)
    }

    pub fn from_seed(toml_text: &str) -> Result<Registry, RegistryError> {
        let seed: Seed = toml::from_str(toml_text).map_err(|e| RegistryError::Seed(e.to_string()))?;
        Registry::from_capabilities(seed.capability)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Registry, RegistryError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| RegistryError::Seed(format!("{}: {e}", path.as_ref().display())))?;
        Registry::from_seed(&text)
    }

    pub fn insert(&mut self, cap: Capability) -> Result<(), RegistryError> {
        if cap.id.is_empty() {
            return Err(RegistryError::Seed("capability id must not be empty".into()));
        }
        if self.caps.contains_key(&cap.id) {
            return Err(RegistryError::DuplicateCapability(cap.id));
        }
        self.caps.insert(cap.id.clone(), cap);
        Ok(())
    }

    /// Capabilities whose name or description mention `needle`, case-insensitively.
    pub fn search(&self, needle: &str) -> Vec<Capability> {
        let needle = needle.to_lowercase();
        self.caps
            .values()
            .filter(|c| c.name.to_lowercase().contains(&needle) || c.description.to_lowercase().contains(&needle) || c.id.contains(&needle))
            .cloned()
            .collect()
    }
}

impl CapabilitySource for Registry {
    fn list(&self) -> Result<Vec<Capability>, RegistryError> {
        Ok(self.caps.values().cloned().collect())
    }

    fn get(&self, id: &str) -> Result<Capability, RegistryError> {
        self.caps.get(id).cloned().ok_or_else(|| RegistryError::UnknownCapability(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPreset {
    pub name: String,
    pub prompt: String,
    #[serde(default)]
    pub capabilities: Vec<String>,
    #[serde(default)]
    pub model_hint: Option<ModelGrade>,
}

impl AgentPreset {
    pub fn new(name: impl Into<String>, prompt: impl Into<String>, capabilities: Vec<String>) -> Self {
        AgentPreset { name: name.into(), prompt: prompt.into(), capabilities, model_hint: None }
    }

    /// Resolves capability ids at launch time.
    pub fn resolve(&self, source: &dyn CapabilitySource) -> Result<Vec<Capability>, RegistryError> {
        self.capabilities.iter().map(|id| source.get(id)).collect()
    }
}

/// The presets of one task. Upserts are serialized.
#[derive(Debug, Default)]
pub struct PresetStore {
    presets: Mutex<BTreeMap<String, AgentPreset>>,
}

impl PresetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_presets(presets: Vec<AgentPreset>) -> Self {
        PresetStore { presets: Mutex::new(presets.into_iter().map(|p| (p.name.clone(), p)).collect()) }
    }

    /// Creates or replaces a preset. Every capability id must resolve now.
    pub fn upsert(&self, preset: AgentPreset, source: &dyn CapabilitySource) -> Result<AgentPreset, RegistryError> {
        if preset.name.trim().is_empty() {
            return Err(RegistryError::InvalidPreset("preset name must not be empty".into()));
        }
        preset.resolve(source)?;
        self.presets.lock().unwrap().insert(preset.name.clone(), preset.clone());
        Ok(preset)
    }

    pub fn get(&self, name: &str) -> Result<AgentPreset, RegistryError> {
        self.presets.lock().unwrap().get(name).cloned().ok_or_else(|| RegistryError::UnknownPreset(name.to_string()))
    }

    pub fn list(&self) -> Vec<AgentPreset> {
        self.presets.lock().unwrap().values().cloned().collect()
    }

    pub fn delete(&self, name: &str) -> Result<(), RegistryError> {
        self.presets.lock().unwrap().remove(name).map(|_| ()).ok_or_else(|| RegistryError::UnknownPreset(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEED: &str = r#"
[[capability]]
id = "web_surfer"
name = "Web surfer"
description = "A browsing agent that navigates web pages and reports findings."
kind = "service"
locator = "exec:web-surfer"

[[capability]]
id = "word_count"
name = "Word counter"
description = "Counts words."
kind = "tool"
locator = "builtin:word_count"
"#;

    #[test]
    fn seed_and_lookup() {
        assert!(Registry::new().list().unwrap().is_empty());
        let r = Registry::from_seed(SEED).unwrap();
        assert_eq!(r.list().unwrap().len(), 2);
        assert_eq!(r.get("web_surfer").unwrap().kind, CapabilityKind::Service);
        assert_eq!(r.search("browsing")[0].id, "web_surfer");
        assert!(matches!(r.get("nope"), Err(RegistryError::UnknownCapability(_))));
        let dup = format!("{SEED}\n[[capability]]\nid = \"word_count\"\nname = \"x\"\ndescription = \"\"\nkind = \"tool\"\nlocator = \"\"\n");
        assert!(matches!(Registry::from_seed(&dup), Err(RegistryError::DuplicateCapability(_))));
    }

    #[test]
    fn presets_upsert_and_validate() {
        let r = Registry::from_seed(SEED).unwrap();
        let p = PresetStore::new();
        let s = p.upsert(AgentPreset::new("summarizer", "first", vec![]), &r).unwrap();
        assert!(s.capabilities.is_empty());
        p.upsert(AgentPreset::new("summarizer", "second", vec![]), &r).unwrap();
        assert_eq!(p.get("summarizer").unwrap().prompt, "second");
        assert_eq!(p.list().len(), 1);
        match p.upsert(AgentPreset::new("bad", "x", vec!["ghost".into()]), &r) {
            Err(RegistryError::UnknownCapability(id)) => assert_eq!(id, "ghost"),
            other => panic!("{other:?}"),
        }
        p.delete("summarizer").unwrap();
        assert!(matches!(p.delete("summarizer"), Err(RegistryError::UnknownPreset(_))));
    }
}
