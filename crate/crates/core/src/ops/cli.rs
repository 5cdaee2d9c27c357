//! The `fanout` command line. Output goes to a caller-supplied writer so the
//! verbs can be driven from tests.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::{json, Value as J};

use crate::blob::ProxyServer;
use crate::manager::TaskOutcome;
use crate::registry::RegistryServer;
use crate::state::{RunStatus, TaskStatus};
use crate::table::{analytics, Field, FieldType, Schema};

use super::{exit, structural_score, BenchmarkContract, OpsError, Runtime, RuntimeConfig};

#[derive(Debug, Parser)]
#[command(name = "fanout", version, about = "Run and inspect parallel manager/worker tasks")]
pub struct Cli {
    /// Runtime config (TOML).
    #[arg(long, short, global = true, default_value = "fanout.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Host the capability registry and blob proxy until interrupted.
    Serve {
        /// Stop after this many milliseconds.
        #[arg(long)]
        for_ms: Option<u64>,
    },
    /// Load a CSV or JSON-lines file into the ingest catalog.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        name: String,
        /// Comma-separated `name:type`, with a trailing `?` for nullable.
        #[arg(long)]
        schema: String,
        #[arg(long)]
        id_column: Option<String>,
    },
    /// Register a task and run it, or continue one with `--resume`.
    Submit {
        #[arg(long, conflicts_with_all = ["query_file", "resume"])]
        query: Option<String>,
        #[arg(long, conflicts_with = "resume")]
        query_file: Option<PathBuf>,
        #[arg(long)]
        task_id: Option<String>,
        /// Continue this task from its latest checkpoint.
        #[arg(long)]
        resume: Option<String>,
        /// Stop after checkpointing this round.
        #[arg(long)]
        halt_after_round: Option<u32>,
    },
    /// Show a task and its event log.
    Status {
        task: String,
        #[arg(long, default_value_t = 0)]
        after: u64,
        #[arg(long, default_value_t = 200)]
        limit: usize,
        /// Keep polling until the task leaves the running state.
        #[arg(long)]
        follow: bool,
    },
    /// List a task's tables, or page through one.
    Tables {
        task: String,
        #[arg(long)]
        archived: bool,
        #[arg(long)]
        show: Option<String>,
        #[arg(long, default_value_t = 1)]
        page: usize,
        #[arg(long, default_value_t = 10)]
        page_size: usize,
    },
    /// List executed subtasks, or show one run.
    Subtasks {
        task: String,
        #[arg(long, value_parser = parse_status)]
        status: Option<RunStatus>,
        #[arg(long)]
        show: Option<String>,
        #[arg(long, default_value_t = 1)]
        page: usize,
        #[arg(long, default_value_t = 20)]
        page_size: usize,
    },
    /// List artifacts, or print one.
    Artifacts {
        task: String,
        #[arg(long)]
        subtask: Option<String>,
        #[arg(long)]
        show: Option<String>,
        #[arg(long, default_value_t = 1)]
        page: usize,
        #[arg(long, default_value_t = 20)]
        page_size: usize,
    },
    /// Structural score against a benchmark contract, with time and cost.
    Score {
        task: String,
        #[arg(long)]
        contract: PathBuf,
    },
    /// Rebuild a table from lineage and compare with the stored copy.
    Replay { task: String, table: String },
}

fn parse_status(s: &str) -> Result<RunStatus, String> {
    serde_json::from_value(J::String(s.into())).map_err(|_| format!("`{s}` is not success or logical_failure"))
}

/// Parses `id:text,act:integer,note:text?`.
pub fn parse_schema(spec: &str) -> Result<Schema, OpsError> {
    let mut fields = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, ty) = part.split_once(':').ok_or_else(|| OpsError::Config(format!("schema entry `{part}` lacks `:type`")))?;
        let (ty, nullable) = match ty.strip_suffix('?') {
            Some(t) => (t, true),
            None => (ty, false),
        };
        let ty: FieldType = serde_json::from_value(J::String(ty.trim().into())).map_err(|_| OpsError::Config(format!("unknown field type `{ty}`")))?;
        fields.push(if nullable { Field::nullable(name.trim(), ty) } else { Field::new(name.trim(), ty) });
    }
    Schema::new(fields).map_err(|e| OpsError::Config(e.to_string()))
}

fn line(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), OpsError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| OpsError::Other(e.to_string()))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn outcome_code(task: &str, outcome: &TaskOutcome) -> Result<i32, OpsError> {
    match outcome {
        TaskOutcome::Failed { report, .. } => Err(OpsError::TaskFailed {
            task: task.to_string(),
            reason: report.get("reason").and_then(J::as_str).unwrap_or("see report").to_string(),
        }),
        _ => Ok(exit::OK),
    }
}

/// Runs one verb. Returns the exit code for successful verbs; errors carry
/// their own.
pub async fn run(cli: Cli, out: &mut dyn Write) -> Result<i32, OpsError> {
    let cfg = RuntimeConfig::load(&cli.config)?;
    let rt = Runtime::open(cfg)?;
    match cli.command {
        Command::Serve { for_ms } => {
            let registry = RegistryServer::bind(&rt.config().serve.registry_addr, rt.registry().clone()).await.map_err(|e| OpsError::Config(format!("registry bind: {e}")))?;
            let proxy = ProxyServer::bind(&rt.config().serve.proxy_addr, rt.proxy().clone()).await.map_err(|e| OpsError::Config(format!("proxy bind: {e}")))?;
            line(out, format!("registry listening on {}", registry.local_addr()))?;
            line(out, format!("blob proxy listening on {}", proxy.local_addr()))?;
            match for_ms {
                Some(ms) => tokio::time::sleep(Duration::from_millis(ms)).await,
                None => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
            registry.shutdown();
            proxy.shutdown();
            line(out, "stopped")?;
            Ok(exit::OK)
        }
        Command::Ingest { file, name, schema, id_column } => {
            let schema = parse_schema(&schema)?;
            let t = rt.ingest(&file, &name, schema, id_column.as_deref())?;
            line(out, format!("ingested {} as {} ({} rows)", t.name, t.id, t.row_count))?;
            Ok(exit::OK)
        }
        Command::Submit { query, query_file, task_id, resume, halt_after_round } => {
            let sub = match resume {
                Some(task) => rt.resume(&task, halt_after_round).await?,
                None => {
                    let query = match (query, query_file) {
                        (Some(q), _) => q,
                        (None, Some(p)) => std::fs::read_to_string(&p).map_err(|e| OpsError::NotFound(format!("{}: {e}", p.display())))?,
                        (None, None) => return Err(OpsError::Config("submit needs --query, --query-file or --resume".into())),
                    };
                    rt.submit(task_id.as_deref(), &query, halt_after_round).await?
                }
            };
            match &sub.outcome {
                TaskOutcome::Finalized { rounds, report } => {
                    line(out, format!("task {} finalized after {rounds} rounds", sub.task_id))?;
                    line(out, pretty(report))?;
                }
                TaskOutcome::Failed { rounds, report } => {
                    line(out, format!("task {} failed after {rounds} rounds", sub.task_id))?;
                    line(out, pretty(report))?;
                }
                TaskOutcome::Halted { round } => line(out, format!("task {} halted after round {round}; continue with --resume {}", sub.task_id, sub.task_id))?,
            }
            outcome_code(&sub.task_id, &sub.outcome)
        }
        Command::Status { task, after, limit, follow } => {
            let mut after = after;
            loop {
                let events = rt.state().events(&task, after, limit)?;
                for e in &events {
                    line(out, format!("{:>6} {} {:<14} {}", e.seq, e.ts_ms, e.kind, e.payload))?;
                    after = e.seq;
                }
                let t = rt.state().task(&task)?;
                if !follow || (t.status != TaskStatus::Running && events.is_empty()) {
                    line(out, format!("task {} {}", t.task_id, json!(t.status).as_str().unwrap_or_default()))?;
                    return Ok(exit::OK);
                }
                tokio::time::sleep(Duration::from_millis(200)).await;
            }
        }
        Command::Tables { task, archived, show, page, page_size } => {
            let tables = rt.task_tables(&task)?;
            match show {
                Some(name) => {
                    let t = tables.resolve(&name)?;
                    let data = tables.data(&t.id)?;
                    let p = analytics::preview_rows(&data, page, page_size)?;
                    line(out, format!("{} `{}` page {}/{} ({} rows)", t.id, t.name, p.page, p.total_pages, p.total_rows))?;
                    for r in &p.rows {
                        line(out, r.to_json(None).to_string())?;
                    }
                }
                None => {
                    for t in tables.list(archived).iter() {
                        let kind = json!(t.kind);
                        line(out, format!("{:<24} {:<28} {:<8} {:>7} rows{}", t.id, t.name, kind.as_str().unwrap_or_default(), t.row_count, if t.archived { " (archived)" } else { "" }))?;
                    }
                }
            }
            Ok(exit::OK)
        }
        Command::Subtasks { task, status, show, page, page_size } => {
            match show {
                Some(id) => line(out, pretty(&rt.state().run(&id)?))?,
                None => {
                    rt.state().task(&task)?;
                    let p = rt.state().runs(&task, status, page, page_size)?;
                    line(out, format!("page {} of {} runs", p.page, p.total))?;
                    for r in &p.items {
                        let err = r.attempts.last().and_then(|a| a.error.clone()).unwrap_or_default();
                        line(out, format!("{:<24} {:<6} {:<16} attempts={} {err}", r.subtask_id, r.batch_id, json!(r.status).as_str().unwrap_or_default(), r.attempts.len()))?;
                    }
                }
            }
            Ok(exit::OK)
        }
        Command::Artifacts { task, subtask, show, page, page_size } => {
            match show {
                Some(id) => {
                    let a = rt.state().artifact(&id)?;
                    let bytes = rt.blobs().get(&a.blob).map_err(|e| OpsError::Other(e.to_string()))?;
                    out.write_all(&bytes).map_err(|e| OpsError::Other(e.to_string()))?;
                }
                None => {
                    rt.state().task(&task)?;
                    let p = rt.state().artifacts(&task, subtask.as_deref(), page, page_size)?;
                    line(out, format!("page {} of {} artifacts", p.page, p.total))?;
                    for a in &p.items {
                        line(out, format!("{:<40} {:>9} bytes  {}", a.artifact_id, a.blob.size, a.preview.lines().next().unwrap_or_default()))?;
                    }
                }
            }
            Ok(exit::OK)
        }
        Command::Score { task, contract } => {
            let contract = BenchmarkContract::load(&contract)?;
            let record = rt.state().task(&task)?;
            let tables = rt.task_tables(&task)?;
            let score = structural_score(&tables, &contract);
            let usage = rt.task_usage(&task)?;
            let wall_ms = record.finished_ms.map(|f| f.saturating_sub(record.created_ms));
            line(
                out,
                pretty(&json!({
                    "task_id": task,
                    "status": record.status,
                    "structural": score.score,
                    "checks_passed": score.passed,
                    "checks_total": score.total,
                    "checks": score.checks,
                    "wall_ms": wall_ms,
                    "input_tokens": usage.input_tokens,
                    "output_tokens": usage.output_tokens,
                    "cost": usage.cost,
                })),
            )?;
            Ok(exit::OK)
        }
        Command::Replay { task, table } => {
            let r = rt.replay(&task, &table)?;
            line(out, pretty(&r))?;
            Ok(if r.identical { exit::OK } else { exit::OTHER })
        }
    }
}

/// Parses `args`, runs the verb on a fresh tokio runtime and returns the
/// process exit code. Errors are written to `err`.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit::OTHER;
        }
    };
    match rt.block_on(run(cli, out)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
