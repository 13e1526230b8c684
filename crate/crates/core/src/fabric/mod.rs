//! Simulated batch allocator. An allocation is N copies of one agent program,
//! each an OS process with its own sandbox directory and slot budget, all
//! bounded by a walltime.

mod bundle;
mod process;

use std::fs::{self, File};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{
    sha256_hex, stage_dir, verify_staged, wait_for_staged, Bundle, Manifest, MANIFEST_NAME,
};
pub use process::{
    audit_agents, environ_var, pid_alive, terminate_detached, wait_exec, KillReport,
};

use crate::node::AgentEnv;

pub const GRACE_PERIOD: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("invalid allocation request: {0}")]
    InvalidRequest(String),
    #[error("failed to spawn agent for node {node_index}: {reason}")]
    SpawnFailed { node_index: u32, reason: String },
    #[error("digest mismatch on node {node_index} for entry {entry}")]
    DigestMismatch { node_index: u32, entry: String },
    #[error("staging failed on node {0}: {1}")]
    StagingFailed(u32, String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("allocation is {0:?}")]
    InvalidState(AllocationState),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl FabricError {
    pub(crate) fn io(path: &Path, e: io::Error) -> Self {
        FabricError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocationState {
    Pending,
    Running,
    Expired,
    TornDown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_index: u32,
    pub cpu_slots: u32,
    pub sandbox_dir: PathBuf,
}

/// The program every node runs. Nodes differ only in the environment the
/// allocator adds on top of `env`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
}

impl AgentCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        AgentCommand {
            program: program.into(),
            args: Vec::new(),
            env: Vec::new(),
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn env(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.env.push((k.into(), v.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRequest {
    /// Also the cluster id every agent sees.
    pub allocation_id: String,
    pub n_nodes: u32,
    pub cpus_per_node: u32,
    pub walltime: Duration,
    /// Parent of the per-allocation sandbox tree.
    pub sandbox_root: PathBuf,
    /// Shared rendezvous directory handed to agents.
    pub store_root: PathBuf,
    pub grace: Duration,
}

impl AllocationRequest {
    pub fn new(
        allocation_id: &str,
        n_nodes: u32,
        cpus_per_node: u32,
        walltime: Duration,
        sandbox_root: impl Into<PathBuf>,
        store_root: impl Into<PathBuf>,
    ) -> Self {
        AllocationRequest {
            allocation_id: allocation_id.to_string(),
            n_nodes,
            cpus_per_node,
            walltime,
            sandbox_root: sandbox_root.into(),
            store_root: store_root.into(),
            grace: GRACE_PERIOD,
        }
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        let bad = |m: &str| Err(FabricError::InvalidRequest(m.to_string()));
        if self.n_nodes == 0 {
            return bad("n_nodes must be at least 1");
        }
        if self.cpus_per_node == 0 {
            return bad("cpus_per_node must be at least 1");
        }
        if self.walltime.is_zero() {
            return bad("walltime must be positive");
        }
        if crate::rendezvous::validate_component(&self.allocation_id).is_err() {
            return bad("allocation_id must be a plain file name");
        }
        Ok(())
    }

    pub fn allocation_dir(&self) -> PathBuf {
        self.sandbox_root.join(&self.allocation_id)
    }
}

#[derive(Debug)]
struct Agent {
    node_index: u32,
    pid: u32,
    child: Child,
}

impl Agent {
    fn alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }
}

#[derive(Debug)]
struct Inner {
    request: AllocationRequest,
    command: AgentCommand,
    nodes: Vec<NodeSpec>,
    started: Instant,
    state: Mutex<AllocationState>,
    changed: Condvar,
    agents: Mutex<Vec<Agent>>,
    expiry: Mutex<Option<KillReport>>,
}

/// Handle to a running allocation. Clones share the same processes.
#[derive(Debug, Clone)]
pub struct Allocation {
    inner: Arc<Inner>,
}

fn node_env(req: &AllocationRequest, node: &NodeSpec) -> AgentEnv {
    AgentEnv {
        cluster_id: req.allocation_id.clone(),
        node_index: node.node_index,
        cpu_slots: node.cpu_slots,
        sandbox_dir: node.sandbox_dir.clone(),
        store_root: req.store_root.clone(),
        walltime: Duration::from_secs(req.walltime.as_secs_f64().ceil() as u64),
        node_count: req.n_nodes,
        bind_addr: [127, 0, 0, 1].into(),
    }
}

fn spawn_agent(req: &AllocationRequest, cmd: &AgentCommand, node: &NodeSpec) -> io::Result<Child> {
    if node.sandbox_dir.exists() {
        fs::remove_dir_all(&node.sandbox_dir)?;
    }
    fs::create_dir_all(&node.sandbox_dir)?;
    let tmp = node.sandbox_dir.join("tmp");
    let log = File::create(node.sandbox_dir.join("agent.log"))?;
    let mut command = Command::new(&cmd.program);
    command
        .args(&cmd.args)
        .current_dir(&node.sandbox_dir)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log)
        .env("TMPDIR", &tmp)
        .process_group(0);
    for (k, v) in &cmd.env {
        command.env(k, v);
    }
    for (k, v) in node_env(req, node).to_vars() {
        command.env(k, v);
    }
    fs::create_dir_all(&tmp)?;
    command.spawn()
}

/// Launches `n_nodes` copies of `command`. If any spawn fails, every agent
/// already started is terminated and the error names the failing node.
pub fn allocate(req: AllocationRequest, command: AgentCommand) -> Result<Allocation, FabricError> {
    req.validate()?;
    let dir = req.allocation_dir();
    let nodes: Vec<NodeSpec> = (0..req.n_nodes)
        .map(|i| NodeSpec {
            node_index: i,
            cpu_slots: req.cpus_per_node,
            sandbox_dir: dir.join(format!("node-{i}")),
        })
        .collect();
    let inner = Arc::new(Inner {
        request: req,
        command,
        nodes,
        started: Instant::now(),
        state: Mutex::new(AllocationState::Pending),
        changed: Condvar::new(),
        agents: Mutex::new(Vec::new()),
        expiry: Mutex::new(None),
    });
    let alloc = Allocation { inner };
    for node in &alloc.inner.nodes {
        match spawn_agent(&alloc.inner.request, &alloc.inner.command, node) {
            Ok(child) => alloc.lock_agents().push(Agent {
                node_index: node.node_index,
                pid: child.id(),
                child,
            }),
            Err(e) => {
                alloc.kill_all(Duration::ZERO);
                alloc.set_state(AllocationState::TornDown);
                return Err(FabricError::SpawnFailed {
                    node_index: node.node_index,
                    reason: e.to_string(),
                });
            }
        }
    }
    for (_, pid) in alloc.pids() {
        process::wait_exec(pid, Duration::from_secs(5));
    }
    alloc.set_state(AllocationState::Running);
    log::info!(
        "allocation {} running with {} agents",
        alloc.id(),
        alloc.inner.nodes.len()
    );
    Ok(alloc)
}

impl Allocation {
    fn lock_agents(&self) -> MutexGuard<'_, Vec<Agent>> {
        self.inner.agents.lock().expect("agents lock poisoned")
    }

    fn set_state(&self, s: AllocationState) {
        *self.inner.state.lock().expect("state lock poisoned") = s;
        self.inner.changed.notify_all();
    }

    pub fn id(&self) -> &str {
        &self.inner.request.allocation_id
    }

    pub fn request(&self) -> &AllocationRequest {
        &self.inner.request
    }

    pub fn command(&self) -> &AgentCommand {
        &self.inner.command
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.inner.nodes
    }

    pub fn walltime(&self) -> Duration {
        self.inner.request.walltime
    }

    pub fn state(&self) -> AllocationState {
        *self.inner.state.lock().expect("state lock poisoned")
    }

    pub fn elapsed(&self) -> Duration {
        self.inner.started.elapsed()
    }

    /// The environment node `i` was launched with, on top of the shared command.
    pub fn node_env(&self, node_index: u32) -> Option<AgentEnv> {
        self.inner
            .nodes
            .get(node_index as usize)
            .map(|n| node_env(&self.inner.request, n))
    }

    /// (node_index, pid) of every agent, dead or alive.
    pub fn pids(&self) -> Vec<(u32, u32)> {
        self.lock_agents()
            .iter()
            .map(|a| (a.node_index, a.pid))
            .collect()
    }

    pub fn alive_pids(&self) -> Vec<u32> {
        self.lock_agents()
            .iter_mut()
            .filter_map(|a| a.alive().then_some(a.pid))
            .collect()
    }

    /// Exit code per node; `None` while running or when killed by a signal.
    pub fn exit_codes(&self) -> Vec<(u32, Option<i32>)> {
        self.lock_agents()
            .iter_mut()
            .map(|a| {
                let code = a.child.try_wait().ok().flatten().and_then(|s| s.code());
                (a.node_index, code)
            })
            .collect()
    }

    /// Blocks until every agent has exited or `timeout` passes.
    pub fn wait_exit(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.alive_pids().is_empty() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    fn kill_all(&self, grace: Duration) -> KillReport {
        let pids: Vec<u32> = self.lock_agents().iter().map(|a| a.pid).collect();
        process::terminate(&pids, grace, |pid| {
            self.lock_agents()
                .iter_mut()
                .find(|a| a.pid == pid)
                .is_some_and(|a| a.alive())
        })
    }

    /// Copies `bundle` into every node's sandbox and verifies each file.
    /// Returns the number of verified files across all nodes.
    pub fn stage_bundle(&self, bundle: &Bundle) -> Result<usize, FabricError> {
        match self.state() {
            AllocationState::Pending | AllocationState::Running => {}
            other => return Err(FabricError::InvalidState(other)),
        }
        bundle.verify()?;
        let mut total = 0;
        for node in &self.inner.nodes {
            total += bundle::stage_into(&node.sandbox_dir, node.node_index, bundle)?;
        }
        Ok(total)
    }

    /// Starts the walltime timer. When it fires on a running allocation the
    /// state becomes Expired and every agent gets SIGTERM, then SIGKILL
    /// after the grace period. A teardown beforehand makes it a no-op.
    pub fn enforce_walltime(&self) -> JoinHandle<Option<KillReport>> {
        let alloc = self.clone();
        thread::Builder::new()
            .name(format!("walltime-{}", self.id()))
            .spawn(move || {
                let deadline = alloc.inner.started + alloc.walltime();
                let mut state = alloc.inner.state.lock().expect("state lock poisoned");
                loop {
                    if matches!(*state, AllocationState::TornDown | AllocationState::Expired) {
                        return None;
                    }
                    let now = Instant::now();
                    if now >= deadline {
                        break;
                    }
                    state = alloc
                        .inner
                        .changed
                        .wait_timeout(state, deadline - now)
                        .expect("state lock poisoned")
                        .0;
                }
                *state = AllocationState::Expired;
                drop(state);
                alloc.inner.changed.notify_all();
                let report = alloc.kill_all(alloc.inner.request.grace);
                if !report.unkillable.is_empty() {
                    log::error!("allocation {}: unkillable agents {:?}", alloc.id(), report.unkillable);
                }
                *alloc.inner.expiry.lock().expect("expiry lock poisoned") = Some(report.clone());
                Some(report)
            })
            .expect("spawn walltime thread")
    }

    /// Report from walltime enforcement, once it has fired.
    pub fn expiry_report(&self) -> Option<KillReport> {
        self.inner.expiry.lock().expect("expiry lock poisoned").clone()
    }

    /// Terminates every agent and marks the allocation TornDown. Sandboxes
    /// are deleted unless `retain_sandbox`. Calling it again is a no-op.
    pub fn teardown(&self, retain_sandbox: bool) -> KillReport {
        {
            let mut state = self.inner.state.lock().expect("state lock poisoned");
            if *state == AllocationState::TornDown {
                return KillReport::default();
            }
            *state = AllocationState::TornDown;
        }
        self.inner.changed.notify_all();
        let report = self.kill_all(self.inner.request.grace);
        if !retain_sandbox {
            let dir = self.inner.request.allocation_dir();
            if let Err(e) = fs::remove_dir_all(&dir) {
                if e.kind() != io::ErrorKind::NotFound {
                    log::warn!("could not remove {}: {e}", dir.display());
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::{ENV_CLUSTER_ID, ENV_NODE_INDEX, ENV_SANDBOX_DIR};

    fn request(dir: &Path, id: &str, n: u32, walltime: Duration) -> AllocationRequest {
        AllocationRequest::new(id, n, 2, walltime, dir.join("sb"), dir.join("store"))
    }

    fn sh(script: &str) -> AgentCommand {
        AgentCommand::new("/bin/sh").arg("-c").arg(script)
    }

    #[test]
    fn rejects_bad_requests() {
        let d = tempfile::tempdir().unwrap();
        for (n, c, w) in [(0, 2, 10), (1, 0, 10), (1, 2, 0)] {
            let mut r = request(d.path(), "a", n, Duration::from_secs(w));
            r.cpus_per_node = c;
            assert!(matches!(
                allocate(r, sh("true")),
                Err(FabricError::InvalidRequest(_))
            ));
        }
        assert!(audit_agents(Some("a")).is_empty());
    }

    #[test]
    fn spawns_identical_copies_with_node_env() {
        let d = tempfile::tempdir().unwrap();
        let script = format!(
            "echo \"${ENV_NODE_INDEX} ${ENV_SANDBOX_DIR} $(pwd)\" > out.txt; sleep 30"
        );
        let alloc = allocate(request(d.path(), "fab-env", 3, Duration::from_secs(60)), sh(&script)).unwrap();
        assert_eq!(alloc.state(), AllocationState::Running);
        assert_eq!(alloc.pids().len(), 3);
        let cmdlines: Vec<Vec<u8>> = alloc
            .pids()
            .iter()
            .map(|(_, pid)| fs::read(format!("/proc/{pid}/cmdline")).unwrap())
            .collect();
        assert!(cmdlines.windows(2).all(|w| w[0] == w[1]));
        for (i, pid) in alloc.pids() {
            assert_eq!(environ_var(pid, ENV_CLUSTER_ID).as_deref(), Some("fab-env"));
            assert_eq!(environ_var(pid, ENV_NODE_INDEX), Some(i.to_string()));
        }
        for node in alloc.nodes() {
            let out = node.sandbox_dir.join("out.txt");
            let deadline = Instant::now() + Duration::from_secs(5);
            while !out.exists() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(10));
            }
            let text = fs::read_to_string(&out).unwrap();
            let sb = node.sandbox_dir.display().to_string();
            assert_eq!(text.trim(), format!("{} {sb} {sb}", node.node_index));
        }
        alloc.teardown(false);
        assert!(audit_agents(Some("fab-env")).is_empty());
        assert!(!alloc.request().allocation_dir().exists());
    }

    #[test]
    fn spawn_failure_rolls_back() {
        let d = tempfile::tempdir().unwrap();
        let cmd = AgentCommand::new(d.path().join("no-such-program"));
        let err = allocate(request(d.path(), "fab-missing", 2, Duration::from_secs(5)), cmd).unwrap_err();
        assert!(matches!(err, FabricError::SpawnFailed { node_index: 0, .. }));
    }

    #[test]
    fn staging_counts_files_across_nodes() {
        let d = tempfile::tempdir().unwrap();
        let alloc = allocate(request(d.path(), "fab-stage", 4, Duration::from_secs(30)), sh("sleep 30")).unwrap();
        let bundle = Bundle::new()
            .with_entry("a", b"1".to_vec())
            .unwrap()
            .with_entry("b", b"2".to_vec())
            .unwrap()
            .with_entry("c/d", b"3".to_vec())
            .unwrap();
        assert_eq!(alloc.stage_bundle(&bundle).unwrap(), 12);
        assert_eq!(alloc.stage_bundle(&bundle).unwrap(), 12);
        alloc.teardown(true);
        assert!(alloc.nodes()[3].sandbox_dir.join("bundle/c/d").exists());
        assert_eq!(
            alloc.stage_bundle(&bundle),
            Err(FabricError::InvalidState(AllocationState::TornDown))
        );
    }

    #[test]
    fn teardown_before_expiry_disarms_enforcer() {
        let d = tempfile::tempdir().unwrap();
        let alloc = allocate(request(d.path(), "fab-td", 1, Duration::from_secs(30)), sh("sleep 30")).unwrap();
        let timer = alloc.enforce_walltime();
        let report = alloc.teardown(false);
        assert_eq!(report.signaled, 1);
        assert_eq!(timer.join().unwrap(), None);
        assert_eq!(alloc.state(), AllocationState::TornDown);
        assert_eq!(alloc.teardown(false), KillReport::default());
    }

    #[test]
    fn expiry_with_agents_already_gone_kills_nothing() {
        let d = tempfile::tempdir().unwrap();
        let alloc = allocate(request(d.path(), "fab-quick", 2, Duration::from_secs(1)), sh("sleep 0.2")).unwrap();
        let report = alloc.enforce_walltime().join().unwrap().unwrap();
        assert_eq!(alloc.state(), AllocationState::Expired);
        assert_eq!(report, KillReport::default());
        alloc.teardown(false);
        assert_eq!(alloc.state(), AllocationState::TornDown);
    }
}
