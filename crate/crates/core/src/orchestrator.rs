//! Cluster lifecycle: stage the bundle on a fresh allocation, wait for the
//! elected head, wait for every worker to register, run workloads, shut down.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{
    self, allocate, AgentCommand, Allocation, AllocationRequest, Bundle, FabricError,
};
use crate::node::{ClientError, HeadClient};
use crate::rendezvous::{
    head_lock_key, head_record_key, read_head, FileStore, HeadRecord, RendezvousError,
    RendezvousStore,
};
use crate::scheduler::{Event, JobPhase, JobSpec, JobStatus, WorkerState};

/// Env var naming the agent executable when the config does not.
pub const ENV_AGENT_BIN: &str = "NESTOR_AGENT_BIN";
const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub cluster_id: String,
    pub n_nodes: u32,
    pub cpus_per_node: u32,
    pub walltime_s: u64,
    pub store_root: PathBuf,
    #[serde(default)]
    pub bundle_path: Option<PathBuf>,
    #[serde(default)]
    pub retain_sandbox: bool,
    /// Defaults to 60 s, scaled by n_nodes / 10 beyond ten nodes.
    #[serde(default)]
    pub formation_timeout_s: Option<f64>,
    /// Parent of the node sandboxes; defaults to the system temp dir.
    #[serde(default)]
    pub sandbox_root: Option<PathBuf>,
    /// Agent executable; defaults to `$NESTOR_AGENT_BIN`, then this program.
    #[serde(default)]
    pub agent_program: Option<PathBuf>,
    /// In-memory bundle taking precedence over `bundle_path`.
    #[serde(skip)]
    pub bundle: Option<Bundle>,
}

impl ClusterConfig {
    pub fn new(cluster_id: &str, n_nodes: u32, cpus_per_node: u32, store_root: impl Into<PathBuf>) -> Self {
        ClusterConfig {
            cluster_id: cluster_id.to_string(),
            n_nodes,
            cpus_per_node,
            walltime_s: 3600,
            store_root: store_root.into(),
            bundle_path: None,
            retain_sandbox: false,
            formation_timeout_s: None,
            sandbox_root: None,
            agent_program: None,
            bundle: None,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, OrchestratorError> {
        serde_json::from_slice(bytes).map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let bytes = fs::read(path)
            .map_err(|e| OrchestratorError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        if self.n_nodes == 0 {
            return bad("n_nodes must be at least 1".into());
        }
        if self.cpus_per_node == 0 {
            return bad("cpus_per_node must be at least 1".into());
        }
        if self.walltime_s == 0 {
            return bad("walltime_s must be positive".into());
        }
        if let Some(t) = self.formation_timeout_s {
            if !(t > 0.0) {
                return bad("formation_timeout_s must be positive".into());
            }
        }
        if crate::rendezvous::validate_component(&self.cluster_id).is_err() {
            return bad(format!("cluster_id {:?} is not a plain name", self.cluster_id));
        }
        Ok(())
    }

    pub fn formation_timeout(&self) -> Duration {
        let secs = self
            .formation_timeout_s
            .unwrap_or(60.0 * (self.n_nodes as f64 / 10.0).max(1.0));
        Duration::from_secs_f64(secs)
    }

    /// Slots available to jobs: the head keeps a whole node to itself
    /// unless it is the only node.
    pub fn expected_worker_slots(&self) -> u32 {
        if self.n_nodes > 1 {
            (self.n_nodes - 1) * self.cpus_per_node
        } else {
            self.cpus_per_node
        }
    }

    pub fn expected_workers(&self) -> usize {
        if self.n_nodes > 1 {
            self.n_nodes as usize - 1
        } else {
            1
        }
    }

    pub fn sandbox_root(&self) -> PathBuf {
        self.sandbox_root
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("nestor-sandboxes"))
    }

    pub fn resolve_agent_program(&self) -> Result<PathBuf, OrchestratorError> {
        if let Some(p) = &self.agent_program {
            return Ok(p.clone());
        }
        if let Some(p) = std::env::var_os(ENV_AGENT_BIN) {
            return Ok(PathBuf::from(p));
        }
        std::env::current_exe().map_err(|e| OrchestratorError::InvalidConfig(format!("agent program: {e}")))
    }

    /// The bundle to stage: in-memory, else loaded from `bundle_path`, else
    /// a one-file bundle holding this config.
    pub fn resolve_bundle(&self) -> Result<Bundle, FabricError> {
        if let Some(b) = &self.bundle {
            b.verify()?;
            return Ok(b.clone());
        }
        match &self.bundle_path {
            Some(p) => Bundle::load(p),
            None => Bundle::new().with_entry(
                "cluster.json",
                serde_json::to_vec_pretty(self).expect("config serializes"),
            ),
        }
    }

    pub fn handle_path(&self) -> PathBuf {
        handle_path(&self.store_root, &self.cluster_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Staging,
    HeadUp,
    Forming,
    Ready,
    ShuttingDown,
    Down,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpFailure {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("shared store unusable: {0}")]
    Store(String),
    #[error("cluster {0} is already running")]
    AlreadyRunning(String),
    #[error("all agents exited: {0}")]
    AgentsExited(String),
    #[error("{registered} of {expected} worker slots registered before the formation timeout")]
    FormationTimeout { expected: u32, registered: u32 },
    #[error("cancelled by shutdown")]
    Cancelled,
    #[error("head unreachable: {0}")]
    HeadUnreachable(String),
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("{phase:?} phase failed: {failure}")]
    Up { phase: Phase, failure: UpFailure },
    #[error("cluster is not ready (phase {0:?})")]
    ClusterNotReady(Phase),
    #[error("job {job_id} failed: {error}")]
    WorkloadFailed { job_id: String, error: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("handle file {path}: {message}")]
    HandleFile { path: PathBuf, message: String },
}

fn up_err(phase: Phase, failure: impl Into<UpFailure>) -> OrchestratorError {
    OrchestratorError::Up {
        phase,
        failure: failure.into(),
    }
}

fn store_failure(e: RendezvousError) -> UpFailure {
    UpFailure::Store(e.to_string())
}

#[derive(Debug)]
struct State {
    phase: Phase,
    head: Option<HeadRecord>,
    workers: Vec<WorkerState>,
}

#[derive(Debug)]
struct Inner {
    config: ClusterConfig,
    allocation: Allocation,
    state: Mutex<State>,
    cancel: AtomicBool,
    down_lock: Mutex<()>,
}

/// Shared handle to one cluster. Queries are safe from any thread.
#[derive(Debug, Clone)]
pub struct ClusterHandle {
    inner: Arc<Inner>,
}

/// Runs all four phases. On any failure the allocation is torn down before
/// the error is returned.
pub fn up(config: ClusterConfig) -> Result<ClusterHandle, OrchestratorError> {
    let handle = launch(config)?;
    match handle.form() {
        Ok(()) => Ok(handle),
        Err(e) => {
            handle.down();
            Err(e)
        }
    }
}

/// Phase 1 only: allocate the nodes and stage the bundle. The returned
/// handle is in `Staging` until [`ClusterHandle::form`] drives it on.
pub fn launch(config: ClusterConfig) -> Result<ClusterHandle, OrchestratorError> {
    config.validate()?;
    let bundle = config
        .resolve_bundle()
        .map_err(|e| up_err(Phase::Staging, e))?;
    let program = config.resolve_agent_program()?;
    claim_cluster_id(&config)?;

    let mut req = AllocationRequest::new(
        &config.cluster_id,
        config.n_nodes,
        config.cpus_per_node,
        Duration::from_secs(config.walltime_s),
        config.sandbox_root(),
        &config.store_root,
    );
    req.grace = fabric::GRACE_PERIOD;
    let allocation =
        allocate(req, AgentCommand::new(program).arg("agent")).map_err(|e| up_err(Phase::Staging, e))?;
    allocation.enforce_walltime();
    let handle = ClusterHandle {
        inner: Arc::new(Inner {
            config,
            allocation,
            state: Mutex::new(State {
                phase: Phase::Staging,
                head: None,
                workers: Vec::new(),
            }),
            cancel: AtomicBool::new(false),
            down_lock: Mutex::new(()),
        }),
    };
    if let Err(e) = handle.inner.allocation.stage_bundle(&bundle) {
        handle.down();
        return Err(up_err(Phase::Staging, e));
    }
    Ok(handle)
}

/// Refuses to start a second cluster under a live cluster id and clears
/// rendezvous leftovers of a dead one.
fn claim_cluster_id(config: &ClusterConfig) -> Result<(), OrchestratorError> {
    let store = FileStore::new(&config.store_root);
    let lock = store
        .get(&head_lock_key(&config.cluster_id))
        .map_err(|e| up_err(Phase::Staging, store_failure(e)))?;
    if lock.is_some() || store.get(&head_record_key(&config.cluster_id)).ok().flatten().is_some() {
        if !fabric::audit_agents(Some(&config.cluster_id)).is_empty() {
            return Err(up_err(
                Phase::Staging,
                UpFailure::AlreadyRunning(config.cluster_id.clone()),
            ));
        }
        log::warn!("clearing stale rendezvous state of {}", config.cluster_id);
        clear_rendezvous(&store, &config.cluster_id);
    }
    Ok(())
}

fn clear_rendezvous(store: &FileStore, cluster_id: &str) {
    for key in [head_record_key(cluster_id), head_lock_key(cluster_id)] {
        if let Err(e) = store.remove(&key) {
            log::warn!("could not remove {key}: {e}");
        }
    }
}

impl ClusterHandle {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.inner.state.lock().expect("cluster state poisoned")
    }

    fn set_phase(&self, phase: Phase) {
        self.lock().phase = phase;
    }

    fn cancelled(&self) -> bool {
        self.inner.cancel.load(Ordering::SeqCst)
    }

    pub fn cluster_id(&self) -> &str {
        &self.inner.config.cluster_id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.inner.config
    }

    pub fn allocation(&self) -> &Allocation {
        &self.inner.allocation
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn head_record(&self) -> Option<HeadRecord> {
        self.lock().head.clone()
    }

    pub fn registered_workers(&self) -> Vec<WorkerState> {
        self.lock().workers.clone()
    }

    /// Total worker slots of a Ready cluster.
    pub fn worker_slots(&self) -> Result<u32, OrchestratorError> {
        let st = self.lock();
        if st.phase != Phase::Ready {
            return Err(OrchestratorError::ClusterNotReady(st.phase));
        }
        Ok(st.workers.iter().map(|w| w.cpu_slots_total).sum())
    }

    /// A fresh connection to the head of a Ready cluster.
    pub fn client(&self) -> Result<HeadClient, OrchestratorError> {
        let (phase, head) = {
            let st = self.lock();
            (st.phase, st.head.clone())
        };
        match (phase, head) {
            (Phase::Ready, Some(h)) => Ok(HeadClient::attach(&h, Duration::from_secs(10))?),
            (p, _) => Err(OrchestratorError::ClusterNotReady(p)),
        }
    }

    /// Phases 2 to 4: wait for the head record, then for every worker to
    /// register. Does not tear down on failure; [`up`] does.
    pub fn form(&self) -> Result<(), OrchestratorError> {
        if self.phase() != Phase::Staging {
            return Err(OrchestratorError::ClusterNotReady(self.phase()));
        }
        let cfg = &self.inner.config;
        let deadline = Instant::now() + cfg.formation_timeout();

        self.set_phase(Phase::HeadUp);
        let store = FileStore::new(&cfg.store_root);
        let head = loop {
            if self.cancelled() {
                return Err(up_err(Phase::HeadUp, UpFailure::Cancelled));
            }
            match read_head(&store, &cfg.cluster_id) {
                Ok(Some(h)) => break h,
                Ok(None) => {}
                Err(e @ RendezvousError::StoreUnreachable { .. }) => {
                    return Err(up_err(Phase::HeadUp, store_failure(e)))
                }
                Err(e) => log::debug!("head record not usable yet: {e}"),
            }
            self.check_agents(Phase::HeadUp)?;
            if Instant::now() >= deadline {
                return Err(up_err(
                    Phase::HeadUp,
                    UpFailure::FormationTimeout {
                        expected: cfg.expected_worker_slots(),
                        registered: 0,
                    },
                ));
            }
            thread::sleep(POLL);
        };
        self.lock().head = Some(head.clone());
        log::info!("head of {} at {}", cfg.cluster_id, head.socket_addr());

        self.set_phase(Phase::Forming);
        let expected = cfg.expected_worker_slots();
        let mut client: Option<HeadClient> = None;
        let mut registered = 0;
        loop {
            if self.cancelled() {
                return Err(up_err(Phase::Forming, UpFailure::Cancelled));
            }
            if client.is_none() {
                match HeadClient::attach(&head, Duration::from_secs(2)) {
                    Ok(c) => client = Some(c),
                    Err(e) => log::debug!("attach to head failed: {e}"),
                }
            }
            if let Some(c) = client.as_mut() {
                match c.describe() {
                    Ok((workers, _)) => {
                        registered = workers.iter().map(|w| w.cpu_slots_total).sum();
                        if registered == expected && workers.len() == cfg.expected_workers() {
                            self.lock().workers = workers;
                            break;
                        }
                    }
                    Err(e) => {
                        log::debug!("describe failed: {e}");
                        client = None;
                    }
                }
            }
            self.check_agents(Phase::Forming)?;
            if Instant::now() >= deadline {
                return Err(up_err(
                    Phase::Forming,
                    UpFailure::FormationTimeout { expected, registered },
                ));
            }
            thread::sleep(POLL);
        }

        let mut st = self.lock();
        if self.cancelled() {
            return Err(up_err(Phase::Forming, UpFailure::Cancelled));
        }
        st.phase = Phase::Ready;
        log::info!(
            "cluster {} ready: {} workers, {} slots",
            cfg.cluster_id,
            st.workers.len(),
            expected
        );
        Ok(())
    }

    fn check_agents(&self, phase: Phase) -> Result<(), OrchestratorError> {
        let alloc = &self.inner.allocation;
        if !alloc.alive_pids().is_empty() {
            return Ok(());
        }
        let codes = alloc.exit_codes();
        // agents exit with 3 when the shared store is unusable
        let failure = if codes.iter().any(|(_, c)| *c == Some(3)) {
            UpFailure::Store(format!("agents could not use {}", self.inner.config.store_root.display()))
        } else {
            UpFailure::AgentsExited(format!("exit codes {codes:?}"))
        };
        Err(up_err(phase, failure))
    }

    /// Stops the head, lets workers drain, tears the allocation down and
    /// clears rendezvous state. Safe to call repeatedly and concurrently
    /// with [`ClusterHandle::form`].
    pub fn down(&self) {
        self.inner.cancel.store(true, Ordering::SeqCst);
        let _serial = self.inner.down_lock.lock().expect("down lock poisoned");
        let head = {
            let mut st = self.lock();
            if st.phase == Phase::Down {
                return;
            }
            st.phase = Phase::ShuttingDown;
            st.head.clone()
        };
        let cfg = &self.inner.config;
        if let Some(h) = head {
            match HeadClient::attach(&h, Duration::from_secs(2)).and_then(|mut c| c.stop()) {
                Ok(()) => {
                    if !self.inner.allocation.wait_exit(Duration::from_secs(5)) {
                        log::warn!("agents of {} still running after STOP", cfg.cluster_id);
                    }
                }
                Err(e) => log::warn!("could not stop head of {}: {e}", cfg.cluster_id),
            }
        }
        let report = self.inner.allocation.teardown(cfg.retain_sandbox);
        if report.killed > 0 || !report.unkillable.is_empty() {
            log::warn!("teardown of {}: {report:?}", cfg.cluster_id);
        }
        clear_rendezvous(&FileStore::new(&cfg.store_root), &cfg.cluster_id);
        self.set_phase(Phase::Down);
    }

    /// Snapshot for the operator handle file.
    pub fn handle_file(&self) -> HandleFile {
        let st = self.lock();
        let cfg = &self.inner.config;
        HandleFile {
            cluster_id: cfg.cluster_id.clone(),
            phase: st.phase,
            head: st.head.clone(),
            workers: st.workers.clone(),
            agents: self.inner.allocation.pids(),
            n_nodes: cfg.n_nodes,
            cpus_per_node: cfg.cpus_per_node,
            worker_slots: st.workers.iter().map(|w| w.cpu_slots_total).sum(),
            walltime_s: cfg.walltime_s,
            sandbox_dir: self.inner.allocation.request().allocation_dir(),
            retain_sandbox: cfg.retain_sandbox,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

/// What a workload submits and which artifacts it wants back.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub jobs: Vec<JobSpec>,
    /// Artifacts to fetch after completion; `None` fetches every declared output.
    pub fetch: Option<Vec<String>>,
}

impl Workload {
    pub fn new(jobs: Vec<JobSpec>) -> Self {
        Workload { jobs, fetch: None }
    }

    pub fn fetch_only(mut self, ids: Vec<String>) -> Self {
        self.fetch = Some(ids);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadResult {
    pub statuses: Vec<JobStatus>,
    pub artifacts: BTreeMap<String, Vec<u8>>,
    pub events: Vec<Event>,
}

/// Submits the job graph through the head and blocks until every job is
/// terminal. The first failed job, in submission order, is reported.
pub fn run_script(handle: &ClusterHandle, workload: &Workload) -> Result<WorkloadResult, OrchestratorError> {
    let mut client = handle.client()?;
    client.set_timeout(None)?;
    let ids = client.submit(workload.jobs.clone())?;
    let statuses = client.wait(&ids)?;
    if let Some(bad) = statuses.iter().find(|s| s.phase != JobPhase::Succeeded) {
        return Err(OrchestratorError::WorkloadFailed {
            job_id: bad.job_id.clone(),
            error: bad.error.clone().unwrap_or_else(|| format!("{:?}", bad.phase)),
        });
    }
    let wanted: Vec<String> = match &workload.fetch {
        Some(ids) => ids.clone(),
        None => workload
            .jobs
            .iter()
            .flat_map(|j| j.produces.iter().cloned())
            .collect(),
    };
    let mut artifacts = BTreeMap::new();
    for id in wanted {
        if let Some(bytes) = client.get(&id)? {
            artifacts.insert(id, bytes);
        }
    }
    let events = client.events()?;
    Ok(WorkloadResult {
        statuses,
        artifacts,
        events,
    })
}

pub fn handle_path(store_root: &Path, cluster_id: &str) -> PathBuf {
    store_root.join(cluster_id).join("handle.json")
}

/// Persistent description of a cluster started by one operator command and
/// managed by later ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleFile {
    pub cluster_id: String,
    pub phase: Phase,
    pub head: Option<HeadRecord>,
    pub workers: Vec<WorkerState>,
    /// (node_index, pid)
    pub agents: Vec<(u32, u32)>,
    pub n_nodes: u32,
    pub cpus_per_node: u32,
    pub worker_slots: u32,
    pub walltime_s: u64,
    pub sandbox_dir: PathBuf,
    pub retain_sandbox: bool,
    pub created_at: u64,
}

impl HandleFile {
    pub fn save(&self, store_root: &Path) -> Result<(), OrchestratorError> {
        let path = handle_path(store_root, &self.cluster_id);
        let err = |e: std::io::Error| OrchestratorError::HandleFile {
            path: path.clone(),
            message: e.to_string(),
        };
        fs::create_dir_all(path.parent().expect("handle path has a parent")).map_err(err)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self).expect("handle serializes")).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)
    }

    pub fn load(store_root: &Path, cluster_id: &str) -> Result<Option<Self>, OrchestratorError> {
        let path = handle_path(store_root, cluster_id);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| OrchestratorError::HandleFile {
                    path,
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(OrchestratorError::HandleFile {
                path,
                message: e.to_string(),
            }),
        }
    }

    pub fn alive_agents(&self) -> Vec<u32> {
        self.agents
            .iter()
            .map(|(_, pid)| *pid)
            .filter(|&pid| {
                fabric::pid_alive(pid)
                    && fabric::environ_var(pid, crate::node::ENV_CLUSTER_ID).as_deref()
                        == Some(self.cluster_id.as_str())
            })
            .collect()
    }

    /// A Ready cluster whose agents are still running.
    pub fn is_live(&self) -> bool {
        self.phase == Phase::Ready && !self.alive_agents().is_empty()
    }
}

/// Shuts down a cluster known only through its handle file: STOP the head,
/// wait for the agents, kill leftovers, remove sandboxes and rendezvous
/// state. A missing handle file is not an error.
pub fn down_detached(store_root: &Path, cluster_id: &str) -> Result<fabric::KillReport, OrchestratorError> {
    let Some(h) = HandleFile::load(store_root, cluster_id)? else {
        return Ok(fabric::KillReport::default());
    };
    if let Some(head) = &h.head {
        if let Err(e) = HeadClient::attach(head, Duration::from_secs(2)).and_then(|mut c| c.stop()) {
            log::warn!("could not stop head of {cluster_id}: {e}");
        }
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while !h.alive_agents().is_empty() && Instant::now() < deadline {
        thread::sleep(POLL);
    }
    let pids: Vec<u32> = h.agents.iter().map(|(_, p)| *p).collect();
    let report = fabric::terminate_detached(cluster_id, &pids, fabric::GRACE_PERIOD);
    if !h.retain_sandbox {
        let _ = fs::remove_dir_all(&h.sandbox_dir);
    }
    clear_rendezvous(&FileStore::new(store_root), cluster_id);
    let path = handle_path(store_root, cluster_id);
    if let Err(e) = fs::remove_file(&path) {
        if e.kind() != std::io::ErrorKind::NotFound {
            return Err(OrchestratorError::HandleFile {
                path,
                message: e.to_string(),
            });
        }
    }
    Ok(report)
}
