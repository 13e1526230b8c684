//! Worker-side task execution.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use super::{Artifact, ObjectStore, SchedulerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("unknown task kind {0}")]
    UnknownTaskKind(String),
    #[error("{0}")]
    Failed(String),
    #[error("task panicked: {0}")]
    Panicked(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("object store: {0}")]
    Store(String),
}

/// How a running task reaches the object store.
pub trait ArtifactAccess: Send + Sync {
    fn fetch(&self, artifact_id: &str) -> Result<Vec<u8>, TaskError>;
    fn store(&self, producer: &str, artifact_id: &str, bytes: Vec<u8>) -> Result<(), TaskError>;
}

impl ArtifactAccess for ObjectStore {
    fn fetch(&self, artifact_id: &str) -> Result<Vec<u8>, TaskError> {
        self.get(artifact_id)
            .map(|a| a.bytes.clone())
            .map_err(|e| TaskError::Store(e.to_string()))
    }

    fn store(&self, producer: &str, artifact_id: &str, bytes: Vec<u8>) -> Result<(), TaskError> {
        self.put(Artifact::new(artifact_id, bytes, producer))
            .map_err(|e: SchedulerError| TaskError::Store(e.to_string()))
    }
}

/// What a task body sees.
pub struct TaskContext<'a> {
    pub job_id: &'a str,
    pub params: &'a BTreeMap<String, Value>,
    pub deps: &'a [String],
    pub produces: &'a [String],
    access: &'a dyn ArtifactAccess,
}

impl TaskContext<'_> {
    pub fn fetch(&self, artifact_id: &str) -> Result<Vec<u8>, String> {
        self.access.fetch(artifact_id).map_err(|e| e.to_string())
    }

    pub fn str_param(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Value::as_str)
    }

    pub fn u64_param(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(Value::as_u64)
    }
}

pub type TaskOutput = Vec<(String, Vec<u8>)>;
pub type TaskFn = dyn Fn(&TaskContext<'_>) -> Result<TaskOutput, String> + Send + Sync;

/// Named task bodies known to a cluster.
#[derive(Clone, Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, Arc<TaskFn>>,
}

impl std::fmt::Debug for TaskRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.tasks.keys()).finish()
    }
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the stock task kinds: `echo`, `concat`, `sleep`,
    /// `fail`, `panic` and `actor_rollout`.
    pub fn with_builtins() -> Self {
        let mut r = TaskRegistry::new();
        r.register("echo", echo);
        r.register("concat", concat);
        r.register("sleep", sleep);
        r.register("fail", |ctx| {
            Err(ctx.str_param("message").unwrap_or("task failed").to_string())
        });
        r.register("panic", |ctx| {
            panic!("{}", ctx.str_param("message").unwrap_or("task panicked"))
        });
        r.register("actor_rollout", crate::bench::actor_task);
        r
    }

    pub fn register<F>(&mut self, name: &str, body: F)
    where
        F: Fn(&TaskContext<'_>) -> Result<TaskOutput, String> + Send + Sync + 'static,
    {
        self.tasks.insert(name.to_string(), Arc::new(body));
    }

    pub fn kinds(&self) -> BTreeSet<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.tasks.contains_key(kind)
    }
}

/// One assignment as received by a worker.
#[derive(Debug, Clone)]
pub struct TaskInvocation {
    pub job_id: String,
    pub task_kind: String,
    pub params: BTreeMap<String, Value>,
    pub deps: Vec<String>,
    pub produces: Vec<String>,
}

/// Runs the registered body for `inv`, checks that it emitted exactly the
/// declared artifacts, and stores each of them once. Returns the stored ids.
pub fn run_task(
    registry: &TaskRegistry,
    inv: &TaskInvocation,
    access: &dyn ArtifactAccess,
) -> Result<Vec<String>, TaskError> {
    let body = registry
        .tasks
        .get(&inv.task_kind)
        .ok_or_else(|| TaskError::UnknownTaskKind(inv.task_kind.clone()))?;
    let ctx = TaskContext {
        job_id: &inv.job_id,
        params: &inv.params,
        deps: &inv.deps,
        produces: &inv.produces,
        access,
    };
    let output = match panic::catch_unwind(AssertUnwindSafe(|| body(&ctx))) {
        Ok(Ok(out)) => out,
        Ok(Err(msg)) => return Err(TaskError::Failed(msg)),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "non-string panic payload".into());
            return Err(TaskError::Panicked(msg));
        }
    };

    let declared: BTreeSet<&str> = inv.produces.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    for (id, _) in &output {
        if !declared.contains(id.as_str()) {
            return Err(TaskError::ContractViolation(format!("undeclared artifact {id}")));
        }
        if !seen.insert(id.as_str()) {
            return Err(TaskError::ContractViolation(format!("artifact {id} emitted twice")));
        }
    }
    if let Some(missing) = declared.iter().find(|d| !seen.contains(*d)) {
        return Err(TaskError::ContractViolation(format!(
            "declared artifact {missing} not produced"
        )));
    }

    let mut stored = Vec::with_capacity(output.len());
    for (id, bytes) in output {
        access.store(&inv.job_id, &id, bytes)?;
        stored.push(id);
    }
    Ok(stored)
}

fn emit_all(ctx: &TaskContext<'_>, bytes: &[u8]) -> TaskOutput {
    let mut out: TaskOutput = ctx.produces.iter().map(|id| (id.clone(), bytes.to_vec())).collect();
    if let Some(extra) = ctx.params.get("extra_outputs").and_then(Value::as_array) {
        out.extend(
            extra
                .iter()
                .filter_map(Value::as_str)
                .map(|id| (id.to_string(), bytes.to_vec())),
        );
    }
    out
}

fn echo(ctx: &TaskContext<'_>) -> Result<TaskOutput, String> {
    let msg = ctx.str_param("message").unwrap_or(ctx.job_id);
    Ok(emit_all(ctx, msg.as_bytes()))
}

/// Concatenates dependency payloads in id order, followed by `message`.
fn concat(ctx: &TaskContext<'_>) -> Result<TaskOutput, String> {
    let mut deps: Vec<&String> = ctx.deps.iter().collect();
    deps.sort();
    let mut buf = Vec::new();
    for d in deps {
        buf.extend(ctx.fetch(d)?);
    }
    if let Some(m) = ctx.str_param("message") {
        buf.extend_from_slice(m.as_bytes());
    }
    Ok(emit_all(ctx, &buf))
}

fn sleep(ctx: &TaskContext<'_>) -> Result<TaskOutput, String> {
    thread::sleep(Duration::from_millis(ctx.u64_param("ms").unwrap_or(0)));
    Ok(emit_all(ctx, b""))
}
