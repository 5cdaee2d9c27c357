use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use crate::blob::{BlobProxy, BlobRef, BlobStore};
use crate::fabric::Executor;
use crate::llm::{Fixture, Gateway, ScriptedBackend, UsageReport};
use crate::manager::{Manager, ManagerDeps, Prompts, TaskOutcome};
use crate::registry::{CapabilitySource, PresetStore, Registry};
use crate::state::StateStore;
use crate::table::{codec, Schema, Table, TableDigest, TableStore};
use crate::worker::{LauncherTable, WorkerRuntime};

use super::{BackendConfig, OpsError, RuntimeConfig};

const CATALOG_FILE: &str = "catalog.json";

/// A local runtime over the stores under `config.root`.
pub struct Runtime {
    cfg: RuntimeConfig,
    blobs: Arc<BlobStore>,
    state: Arc<StateStore>,
    registry: Arc<Registry>,
    proxy: Arc<BlobProxy>,
    gateway: Arc<Gateway>,
    executor: Arc<Executor>,
    prompts: Prompts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub task_id: String,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub table: String,
    pub name: String,
    pub rows: usize,
    pub bytes: usize,
    /// Replayed serialization equals the stored one.
    pub identical: bool,
    pub digest: TableDigest,
}

impl Runtime {
    pub fn open(cfg: RuntimeConfig) -> Result<Runtime, OpsError> {
        let other = |e: &dyn std::fmt::Display| OpsError::Other(e.to_string());
        let backend = match &cfg.backend {
            BackendConfig::Scripted { fixture, latency_ms } => {
                let f = Fixture::load(fixture).map_err(OpsError::Config)?;
                Arc::new(ScriptedBackend::new(f).with_latency(*latency_ms))
            }
            BackendConfig::Remote { profile } => {
                return Err(OpsError::Config(format!("remote profile `{profile}`: this build only supports scripted backends")))
            }
        };
        std::fs::create_dir_all(&cfg.root).map_err(|e| OpsError::Config(format!("{}: {e}", cfg.root.display())))?;
        let blobs = Arc::new(BlobStore::open(cfg.root.join("blobs")).map_err(|e| other(&e))?);
        let state = Arc::new(StateStore::open_with(cfg.root.join("state"), cfg.executor.max_attempts, Some(blobs.clone()))?);
        let registry = Arc::new(match &cfg.registry_seed {
            Some(p) => Registry::load(p).map_err(|e| OpsError::Config(e.to_string()))?,
            None => Registry::new(),
        });
        let prompts = match &cfg.prompts_dir {
            Some(d) => Prompts::load(d)?,
            None => Prompts::builtin(),
        };
        let mut gateway = Gateway::new(backend, cfg.rates.clone());
        if let Some(r) = cfg.rate_limit_per_s {
            gateway = gateway.with_rate_limit(r);
        }
        let gateway = Arc::new(gateway);
        let proxy = Arc::new(BlobProxy::new(blobs.clone(), cfg.proxy_cache_bytes));
        let caps: Arc<dyn CapabilitySource> = registry.clone();
        let worker = WorkerRuntime::new(gateway.clone(), proxy.clone(), caps, cfg.root.join("ws")).with_launchers(LauncherTable::with_builtins());
        let executor = Arc::new(Executor::new(cfg.executor.clone(), Arc::new(worker)).map_err(|e| OpsError::Config(e.to_string()))?);
        Ok(Runtime { cfg, blobs, state, registry, proxy, gateway, executor, prompts })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn state(&self) -> &Arc<StateStore> {
        &self.state
    }

    pub fn blobs(&self) -> &Arc<BlobStore> {
        &self.blobs
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn proxy(&self) -> &Arc<BlobProxy> {
        &self.proxy
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    fn catalog_path(&self) -> PathBuf {
        self.cfg.root.join(CATALOG_FILE)
    }

    /// The catalog of ingested tables every new task starts from.
    pub fn catalog(&self) -> Result<TableStore, OpsError> {
        let path = self.catalog_path();
        if !path.exists() {
            return Ok(TableStore::new(self.blobs.clone()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| OpsError::Other(format!("{}: {e}", path.display())))?;
        let r: BlobRef = serde_json::from_str(&text).map_err(|e| OpsError::Other(format!("{}: {e}", path.display())))?;
        Ok(TableStore::restore(self.blobs.clone(), &r)?)
    }

    /// Loads a CSV or JSON-lines file as a leaf table in the ingest catalog.
    pub fn ingest(&self, path: &Path, name: &str, schema: Schema, id_column: Option<&str>) -> Result<Table, OpsError> {
        let bytes = std::fs::read(path).map_err(|e| OpsError::NotFound(format!("{}: {e}", path.display())))?;
        let records = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => codec::read_csv(bytes.as_slice(), &schema, id_column)?,
            Some("jsonl") | Some("json") => codec::read_jsonl(bytes.as_slice(), &schema, id_column)?,
            other => return Err(OpsError::Config(format!("unsupported input format {other:?}; use .csv or .jsonl"))),
        };
        let source = self.blobs.put_with_hint(&bytes, path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()).map_err(|e| OpsError::Other(e.to_string()))?;
        let catalog = self.catalog()?;
        if let Some(old) = catalog.find_live(name) {
            catalog.archive(&old.id)?;
        }
        let table = catalog.register_leaf(name, schema, vec![source], records)?;
        let snap = catalog.snapshot()?;
        std::fs::write(self.catalog_path(), serde_json::to_vec(&snap).expect("blob ref serializes")).map_err(|e| OpsError::Other(e.to_string()))?;
        Ok(table)
    }

    fn deps(&self) -> ManagerDeps {
        ManagerDeps {
            gateway: self.gateway.clone(),
            executor: self.executor.clone(),
            state: self.state.clone(),
            blobs: self.blobs.clone(),
            registry: self.registry.clone(),
        }
    }

    fn next_task_id(&self) -> String {
        let n = self.state.tasks().len() + 1;
        format!("task-{n:04}")
    }

    /// Registers a task over the ingest catalog and runs it until it
    /// finalizes, fails or halts.
    pub async fn submit(&self, task_id: Option<&str>, query: &str, halt_after_round: Option<u32>) -> Result<Submission, OpsError> {
        let task_id = task_id.map(str::to_string).unwrap_or_else(|| self.next_task_id());
        let catalog = self.catalog()?;
        let inputs = vec![catalog.snapshot()?];
        self.state.create_task(&task_id, query, inputs)?;
        let cfg = crate::manager::ManagerConfig { halt_after_round, ..self.cfg.manager.clone() };
        let manager = Manager::new(cfg, self.deps(), &task_id, Arc::new(catalog), PresetStore::new())?.with_prompts(self.prompts.clone());
        self.drive(task_id, manager).await
    }

    /// Continues a task from its latest checkpoint.
    pub async fn resume(&self, task_id: &str, halt_after_round: Option<u32>) -> Result<Submission, OpsError> {
        let cfg = crate::manager::ManagerConfig { halt_after_round, ..self.cfg.manager.clone() };
        let manager = Manager::resume(cfg, self.deps(), task_id)?.with_prompts(self.prompts.clone());
        self.drive(task_id.to_string(), manager).await
    }

    async fn drive(&self, task_id: String, mut manager: Manager) -> Result<Submission, OpsError> {
        let result = manager.run().await;
        let usage = self.gateway.usage_report(&task_id).unwrap_or_else(|_| UsageReport { scope: task_id.clone(), ..Default::default() });
        self.state.append_event(&task_id, "usage", json!(usage))?;
        Ok(Submission { task_id, outcome: result? })
    }

    /// Tables as of the task's latest checkpoint, or its starting catalog.
    pub fn task_tables(&self, task_id: &str) -> Result<TableStore, OpsError> {
        let task = self.state.task(task_id)?;
        let snap = match self.state.recover_latest_checkpoint(task_id) {
            Ok(cp) => cp.catalog,
            Err(crate::state::StateError::NoCheckpoint(_)) => match task.inputs.first() {
                Some(r) => r.clone(),
                None => return Ok(TableStore::new(self.blobs.clone())),
            },
            Err(e) => return Err(e.into()),
        };
        Ok(TableStore::restore(self.blobs.clone(), &snap)?)
    }

    /// Token totals summed over every process that worked on the task.
    pub fn task_usage(&self, task_id: &str) -> Result<UsageReport, OpsError> {
        let mut total = UsageReport { scope: task_id.to_string(), ..Default::default() };
        for e in self.state.events(task_id, 0, usize::MAX)?.into_iter().filter(|e| e.kind == "usage") {
            let u: UsageReport = serde_json::from_value(e.payload).map_err(|e| OpsError::Other(e.to_string()))?;
            total.completions += u.completions;
            total.input_tokens += u.input_tokens;
            total.output_tokens += u.output_tokens;
            total.cost += u.cost;
        }
        Ok(total)
    }

    /// Re-materializes a table from lineage and compares it with the
    /// stored serialization.
    pub fn replay(&self, task_id: &str, table: &str) -> Result<ReplayReport, OpsError> {
        let tables = self.task_tables(task_id)?;
        let t = tables.resolve(table)?;
        let stored = tables.serialization(&t.id)?;
        let replayed = tables.replay_lineage(&t.id)?.encode();
        let digest = tables.digest(&t.id, 1024)?;
        Ok(ReplayReport { table: t.id.to_string(), name: t.name.clone(), rows: t.row_count, bytes: replayed.len(), identical: stored == replayed, digest })
    }
}
