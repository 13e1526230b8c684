//! Dependency-driven job scheduling for the head node.
//!
//! A job becomes `Ready` once every artifact it depends on is in the object
//! store, and `Running` once the dispatcher finds a worker with enough free
//! CPU slots. All state lives in one [`Scheduler`] value owned by the head's
//! event loop; nothing here is shared across threads except the
//! [`ObjectStore`].

mod store;
pub mod tasks;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use store::{get_artifact, put_artifact, Artifact, ObjectStore, EXTERNAL_PRODUCER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("duplicate job id {0}")]
    DuplicateJob(String),
    #[error("unknown task kind {0}")]
    UnknownTaskKind(String),
    #[error("job {job_id} needs {cpu_req} slots but the largest worker has {largest}")]
    OversizedRequest {
        job_id: String,
        cpu_req: u32,
        largest: u32,
    },
    #[error("invalid job {job_id}: {reason}")]
    InvalidJob { job_id: String, reason: String },
    #[error("artifact {0} already exists or is already declared by another job")]
    DuplicateArtifact(String),
    #[error("artifact {0} not found")]
    NotFound(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {job_id} is {phase:?}, expected {expected:?}")]
    IllegalTransition {
        job_id: String,
        phase: JobPhase,
        expected: JobPhase,
    },
}

impl SchedulerError {
    /// Stable category name used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            SchedulerError::DuplicateJob(_) => "DuplicateJob",
            SchedulerError::UnknownTaskKind(_) => "UnknownTaskKind",
            SchedulerError::OversizedRequest { .. } => "OversizedRequest",
            SchedulerError::InvalidJob { .. } => "InvalidJob",
            SchedulerError::DuplicateArtifact(_) => "DuplicateArtifact",
            SchedulerError::NotFound(_) => "NotFound",
            SchedulerError::UnknownJob(_) => "UnknownJob",
            SchedulerError::IllegalTransition { .. } => "IllegalTransition",
        }
    }
}

fn one() -> u32 {
    1
}

/// A schedulable unit of work.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub job_id: String,
    pub task_kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default = "one")]
    pub cpu_req: u32,
    #[serde(default)]
    pub data_deps: BTreeSet<String>,
    #[serde(default)]
    pub produces: BTreeSet<String>,
}

impl JobSpec {
    pub fn new(job_id: impl Into<String>, task_kind: impl Into<String>) -> Self {
        JobSpec {
            job_id: job_id.into(),
            task_kind: task_kind.into(),
            params: BTreeMap::new(),
            cpu_req: 1,
            data_deps: BTreeSet::new(),
            produces: BTreeSet::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn cpus(mut self, cpu_req: u32) -> Self {
        self.cpu_req = cpu_req;
        self
    }

    pub fn depends_on<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.data_deps.extend(deps.into_iter().map(Into::into));
        self
    }

    pub fn produces<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.produces.extend(ids.into_iter().map(Into::into));
        self
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let invalid = |reason: &str| SchedulerError::InvalidJob {
            job_id: self.job_id.clone(),
            reason: reason.to_string(),
        };
        if self.job_id.is_empty() {
            return Err(invalid("empty job_id"));
        }
        if self.cpu_req < 1 {
            return Err(invalid("cpu_req must be >= 1"));
        }
        if let Some(id) = self.produces.intersection(&self.data_deps).next() {
            return Err(invalid(&format!("artifact {id} is both a dependency and an output")));
        }
        if self.produces.iter().chain(&self.data_deps).any(|id| id.is_empty()) {
            return Err(invalid("empty artifact id"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JobPhase {
    Queued,
    Ready,
    Running,
    Succeeded,
    Failed,
}

impl JobPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobPhase::Succeeded | JobPhase::Failed)
    }

    /// Position along the legal chain Queued → Ready → Running → terminal.
    pub fn rank(self) -> u8 {
        match self {
            JobPhase::Queued => 0,
            JobPhase::Ready => 1,
            JobPhase::Running => 2,
            JobPhase::Succeeded | JobPhase::Failed => 3,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct JobStatus {
    pub job_id: String,
    pub phase: JobPhase,
    #[serde(default)]
    pub worker_id: Option<u32>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub worker_id: u32,
    pub cpu_slots_total: u32,
    pub cpu_slots_free: u32,
    pub running: BTreeSet<String>,
    pub last_seen: f64,
}

impl WorkerState {
    pub fn new(worker_id: u32, cpu_slots: u32) -> Self {
        WorkerState {
            worker_id,
            cpu_slots_total: cpu_slots,
            cpu_slots_free: cpu_slots,
            running: BTreeSet::new(),
            last_seen: unix_now(),
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Submitted { job_id: String },
    Ready { job_id: String },
    Dispatched { job_id: String, worker_id: u32 },
    ArtifactStored { artifact_id: String, producer: String },
    Finished {
        job_id: String,
        phase: JobPhase,
        #[serde(default)]
        error: Option<String>,
    },
    WorkerJoined { worker_id: u32, cpu_slots: u32 },
    WorkerLost { worker_id: u32 },
}

/// One entry of the head's event log. `at` is seconds since the scheduler
/// was created; `seq` totally orders events.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Event {
    pub seq: u64,
    pub at: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub job_id: String,
    pub worker_id: u32,
}

/// True iff every data dependency is in `store_view` and some worker has
/// enough free slots for the job.
pub fn deps_satisfied(job: &JobSpec, store_view: &HashSet<String>, workers: &[WorkerState]) -> bool {
    job.data_deps.iter().all(|d| store_view.contains(d))
        && workers.iter().any(|w| w.cpu_slots_free >= job.cpu_req)
}

#[derive(Debug)]
struct JobEntry {
    spec: JobSpec,
    status: JobStatus,
}

#[derive(Debug)]
pub struct Scheduler {
    kinds: Option<BTreeSet<String>>,
    store: ObjectStore,
    jobs: HashMap<String, JobEntry>,
    order: Vec<String>,
    produced_by: HashMap<String, String>,
    workers: BTreeMap<u32, WorkerState>,
    events: Vec<Event>,
    started: Instant,
}

impl Scheduler {
    /// `kinds` restricts submissions to registered task kinds; `None` accepts
    /// any kind.
    pub fn new(store: ObjectStore, kinds: Option<BTreeSet<String>>) -> Self {
        Scheduler {
            kinds,
            store,
            jobs: HashMap::new(),
            order: Vec::new(),
            produced_by: HashMap::new(),
            workers: BTreeMap::new(),
            events: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    fn log(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64;
        let at = self.started.elapsed().as_secs_f64();
        self.events.push(Event { seq, at, kind });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn register_worker(&mut self, worker_id: u32, cpu_slots: u32) {
        self.workers.insert(worker_id, WorkerState::new(worker_id, cpu_slots));
        self.log(EventKind::WorkerJoined {
            worker_id,
            cpu_slots,
        });
    }

    pub fn touch_worker(&mut self, worker_id: u32) {
        if let Some(w) = self.workers.get_mut(&worker_id) {
            w.last_seen = unix_now();
        }
    }

    /// Drops a worker. Jobs it was running fail.
    pub fn remove_worker(&mut self, worker_id: u32) -> Vec<String> {
        let Some(w) = self.workers.remove(&worker_id) else {
            return Vec::new();
        };
        self.log(EventKind::WorkerLost { worker_id });
        let lost: Vec<String> = w.running.into_iter().collect();
        for job_id in &lost {
            self.finish(job_id, JobPhase::Failed, Some(format!("worker {worker_id} lost")));
        }
        lost
    }

    pub fn workers(&self) -> Vec<WorkerState> {
        self.workers.values().cloned().collect()
    }

    fn check_new(
        &self,
        job: &JobSpec,
        batch_jobs: &HashSet<&str>,
        batch_outputs: &HashSet<&str>,
    ) -> Result<(), SchedulerError> {
        job.validate()?;
        if self.jobs.contains_key(&job.job_id) || batch_jobs.contains(job.job_id.as_str()) {
            return Err(SchedulerError::DuplicateJob(job.job_id.clone()));
        }
        if let Some(kinds) = &self.kinds {
            if !kinds.contains(&job.task_kind) {
                return Err(SchedulerError::UnknownTaskKind(job.task_kind.clone()));
            }
        }
        if !self.workers.is_empty() {
            let largest = self.workers.values().map(|w| w.cpu_slots_total).max().unwrap_or(0);
            if job.cpu_req > largest {
                return Err(SchedulerError::OversizedRequest {
                    job_id: job.job_id.clone(),
                    cpu_req: job.cpu_req,
                    largest,
                });
            }
        }
        for out in &job.produces {
            if self.produced_by.contains_key(out)
                || self.store.contains(out)
                || batch_outputs.contains(out.as_str())
            {
                return Err(SchedulerError::DuplicateArtifact(out.clone()));
            }
        }
        Ok(())
    }

    pub fn submit(&mut self, job: JobSpec) -> Result<String, SchedulerError> {
        self.submit_batch(vec![job]).map(|mut ids| ids.remove(0))
    }

    /// Admits all jobs or none.
    pub fn submit_batch(&mut self, jobs: Vec<JobSpec>) -> Result<Vec<String>, SchedulerError> {
        {
            let mut ids = HashSet::new();
            let mut outputs = HashSet::new();
            for job in &jobs {
                self.check_new(job, &ids, &outputs)?;
                ids.insert(job.job_id.as_str());
                outputs.extend(job.produces.iter().map(String::as_str));
            }
        }
        let mut accepted = Vec::with_capacity(jobs.len());
        for job in jobs {
            let job_id = job.job_id.clone();
            for out in &job.produces {
                self.produced_by.insert(out.clone(), job_id.clone());
            }
            let ready = job.data_deps.iter().all(|d| self.store.contains(d));
            self.jobs.insert(
                job_id.clone(),
                JobEntry {
                    spec: job,
                    status: JobStatus {
                        job_id: job_id.clone(),
                        phase: JobPhase::Queued,
                        worker_id: None,
                        error: None,
                    },
                },
            );
            self.order.push(job_id.clone());
            self.log(EventKind::Submitted {
                job_id: job_id.clone(),
            });
            if ready {
                self.mark_ready(&job_id);
            }
            accepted.push(job_id);
        }
        Ok(accepted)
    }

    fn mark_ready(&mut self, job_id: &str) {
        let entry = self.jobs.get_mut(job_id).expect("known job");
        debug_assert_eq!(entry.status.phase, JobPhase::Queued);
        entry.status.phase = JobPhase::Ready;
        self.log(EventKind::Ready {
            job_id: job_id.to_string(),
        });
    }

    /// Stores an artifact and promotes queued jobs whose dependencies are now
    /// all present.
    pub fn put_artifact(&mut self, artifact: Artifact) -> Result<(), SchedulerError> {
        let id = artifact.artifact_id.clone();
        let producer = artifact.producer.clone();
        self.store.put(artifact)?;
        self.log(EventKind::ArtifactStored {
            artifact_id: id.clone(),
            producer,
        });
        let unblocked: Vec<String> = self
            .order
            .iter()
            .filter(|j| {
                let e = &self.jobs[*j];
                e.status.phase == JobPhase::Queued
                    && e.spec.data_deps.contains(&id)
                    && e.spec.data_deps.iter().all(|d| self.store.contains(d))
            })
            .cloned()
            .collect();
        for j in unblocked {
            self.mark_ready(&j);
        }
        Ok(())
    }

    /// Producer recorded for `artifact_id`, or `external` when no job declares it.
    pub fn producer_of(&self, artifact_id: &str) -> &str {
        self.produced_by
            .get(artifact_id)
            .map(String::as_str)
            .unwrap_or(EXTERNAL_PRODUCER)
    }

    pub fn get_artifact(&self, artifact_id: &str) -> Result<std::sync::Arc<Artifact>, SchedulerError> {
        self.store.get(artifact_id)
    }

    /// Assigns ready jobs in submission order, each to the lowest-numbered
    /// worker with enough free slots. Jobs that do not fit anywhere wait
    /// without blocking later, smaller jobs.
    pub fn schedule_tick(&mut self) -> Vec<Assignment> {
        let mut out = Vec::new();
        for idx in 0..self.order.len() {
            let job_id = &self.order[idx];
            let entry = &self.jobs[job_id];
            if entry.status.phase != JobPhase::Ready {
                continue;
            }
            let need = entry.spec.cpu_req;
            let Some(worker) = self.workers.values_mut().find(|w| w.cpu_slots_free >= need) else {
                continue;
            };
            worker.cpu_slots_free -= need;
            worker.running.insert(job_id.clone());
            let worker_id = worker.worker_id;
            let job_id = job_id.clone();
            let entry = self.jobs.get_mut(&job_id).expect("known job");
            entry.status.phase = JobPhase::Running;
            entry.status.worker_id = Some(worker_id);
            self.log(EventKind::Dispatched {
                job_id: job_id.clone(),
                worker_id,
            });
            out.push(Assignment { job_id, worker_id });
        }
        out
    }

    /// Records the outcome reported for a running job and releases its slots.
    /// A success report for a job whose declared outputs are missing is
    /// turned into a failure.
    pub fn complete(&mut self, job_id: &str, outcome: Result<(), String>) -> Result<JobPhase, SchedulerError> {
        let entry = self
            .jobs
            .get(job_id)
            .ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
        if entry.status.phase != JobPhase::Running {
            return Err(SchedulerError::IllegalTransition {
                job_id: job_id.to_string(),
                phase: entry.status.phase,
                expected: JobPhase::Running,
            });
        }
        let (phase, error) = match outcome {
            Ok(()) => match entry.spec.produces.iter().find(|a| !self.store.contains(a)) {
                None => (JobPhase::Succeeded, None),
                Some(missing) => (
                    JobPhase::Failed,
                    Some(format!("declared artifact {missing} was not stored")),
                ),
            },
            Err(e) => (JobPhase::Failed, Some(e)),
        };
        self.finish(job_id, phase, error);
        Ok(phase)
    }

    fn finish(&mut self, job_id: &str, phase: JobPhase, error: Option<String>) {
        let entry = self.jobs.get_mut(job_id).expect("known job");
        let cpu = entry.spec.cpu_req;
        entry.status.phase = phase;
        entry.status.error = error.clone();
        if let Some(wid) = entry.status.worker_id {
            if let Some(w) = self.workers.get_mut(&wid) {
                if w.running.remove(job_id) {
                    w.cpu_slots_free += cpu;
                }
            }
        }
        self.log(EventKind::Finished {
            job_id: job_id.to_string(),
            phase,
            error,
        });
    }

    pub fn job_status(&self, job_id: &str) -> Result<JobStatus, SchedulerError> {
        self.jobs
            .get(job_id)
            .map(|e| e.status.clone())
            .ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))
    }

    pub fn job_spec(&self, job_id: &str) -> Option<&JobSpec> {
        self.jobs.get(job_id).map(|e| &e.spec)
    }

    /// Statuses in submission order.
    pub fn statuses(&self) -> Vec<JobStatus> {
        self.order.iter().map(|j| self.jobs[j].status.clone()).collect()
    }

    /// A queued job is stalled when one of its missing dependencies can never
    /// be produced: nobody declares it, its producer failed, or its producer
    /// is itself stalled (which covers dependency cycles).
    pub fn is_stalled(&self, job_id: &str) -> bool {
        let mut visiting = HashSet::new();
        self.stalled_inner(job_id, &mut visiting)
    }

    fn stalled_inner<'a>(&'a self, job_id: &'a str, visiting: &mut HashSet<&'a str>) -> bool {
        let Some(entry) = self.jobs.get(job_id) else {
            return true;
        };
        if entry.status.phase != JobPhase::Queued {
            return false;
        }
        if !visiting.insert(job_id) {
            return true;
        }
        let stalled = entry.spec.data_deps.iter().any(|d| {
            if self.store.contains(d) {
                return false;
            }
            match self.produced_by.get(d) {
                None => true,
                Some(p) => match self.jobs[p].status.phase {
                    JobPhase::Succeeded | JobPhase::Failed => true,
                    JobPhase::Ready | JobPhase::Running => false,
                    JobPhase::Queued => self.stalled_inner(p, visiting),
                },
            }
        });
        visiting.remove(job_id);
        stalled
    }

    /// Terminal, or stalled forever.
    pub fn is_settled(&self, job_id: &str) -> bool {
        match self.jobs.get(job_id) {
            None => true,
            Some(e) if e.status.phase.is_terminal() => true,
            Some(_) => self.is_stalled(job_id),
        }
    }

    pub fn has_work_in_flight(&self) -> bool {
        self.jobs
            .values()
            .any(|e| matches!(e.status.phase, JobPhase::Ready | JobPhase::Running))
    }
}
