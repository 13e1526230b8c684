//! Throughput benchmark: one actor job per worker slot, each stepping a
//! synthetic environment through a fixed sample budget.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::node::{ClientError, HeadClient};
use crate::orchestrator::ClusterHandle;
use crate::scheduler::tasks::{TaskContext, TaskOutput};
use crate::scheduler::{EventKind, JobPhase, JobSpec};

pub const DEFAULT_SAMPLES_PER_WORKER: u64 = 1000;
pub const DEFAULT_REPETITIONS: u32 = 4;
pub const ACTOR_TASK: &str = "actor_rollout";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("records mix different benchmark configurations")]
    Heterogeneous,
    #[error("unknown environment preset {0:?}")]
    UnknownPreset(String),
    #[error("cluster has {actual} worker slots but the run asks for {expected}")]
    SlotMismatch { expected: u32, actual: u32 },
    #[error("actor {job_id} failed: {error}")]
    ActorFailed { job_id: String, error: String },
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("sample count {collected} differs from budget {expected}")]
    SampleShortfall { expected: u64, collected: u64 },
    #[error(transparent)]
    Cluster(#[from] crate::orchestrator::OrchestratorError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Per-step cost knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    /// Policy stand-in: one dense `matvec_dim x matvec_dim` product per step.
    pub matvec_dim: u32,
    /// Extra busy work per step, charged as thread CPU time.
    pub extra_busy_us: u64,
    /// Bytes of trajectory data per step returned to the head.
    #[serde(default)]
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub env_name: String,
    pub state_dim: u32,
    pub action_dim: u32,
    pub cost: StepCost,
    pub seed: u64,
}

const CLASSIC: StepCost = StepCost {
    matvec_dim: 16,
    extra_busy_us: 100,
    payload_bytes: 0,
};
const MUJOCO: StepCost = StepCost {
    matvec_dim: 64,
    extra_busy_us: 1000,
    payload_bytes: 0,
};
const MUJOCO_HEAVY_IO: StepCost = StepCost {
    matvec_dim: 64,
    extra_busy_us: 1000,
    payload_bytes: 4096,
};

/// (preset, state_dim, action_dim, cost)
const PRESETS: &[(&str, u32, u32, StepCost)] = &[
    ("acrobot", 6, 3, CLASSIC),
    ("cartpole", 4, 2, CLASSIC),
    ("pendulum", 3, 1, CLASSIC),
    ("inverted_pendulum", 4, 1, MUJOCO),
    ("inverted_double_pendulum", 9, 1, MUJOCO),
    ("reacher", 10, 2, MUJOCO),
    ("swimmer", 8, 2, MUJOCO),
    ("hopper", 11, 3, MUJOCO),
    ("walker2d", 17, 6, MUJOCO),
    ("half_cheetah", 17, 6, MUJOCO),
    ("ant", 27, 8, MUJOCO),
    ("pusher", 23, 7, MUJOCO),
    ("humanoid", 376, 17, MUJOCO_HEAVY_IO),
    ("humanoid_standup", 376, 17, MUJOCO_HEAVY_IO),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Accepts `half_cheetah`, `Half Cheetah`, `half-cheetah` and so on.
pub fn normalize_preset_name(name: &str) -> String {
    name.trim()
        .to_ascii_lowercase()
        .replace([' ', '-'], "_")
        .replace("stand_up", "standup")
}

impl SyntheticEnv {
    pub fn preset(name: &str, seed: u64) -> Result<Self, BenchError> {
        let key = normalize_preset_name(name);
        let (n, s, a, cost) = PRESETS
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| BenchError::UnknownPreset(name.to_string()))?;
        Ok(SyntheticEnv {
            env_name: n.to_string(),
            state_dim: *s,
            action_dim: *a,
            cost: *cost,
            seed,
        })
    }
}

fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: valid pointer to a timespec owned by this frame
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "CLOCK_THREAD_CPUTIME_ID unavailable");
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

fn burn_cpu(d: Duration) -> u64 {
    if d.is_zero() {
        return 0;
    }
    let until = thread_cpu_time() + d;
    let mut acc = 0u64;
    while thread_cpu_time() < until {
        for i in 0..64u64 {
            acc = acc.wrapping_mul(6364136223846793005).wrapping_add(i);
        }
        std::hint::black_box(acc);
    }
    acc
}

/// Environment plus policy state during a rollout.
struct Stepper {
    env: SyntheticEnv,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
    state: Vec<f64>,
    features: Vec<f64>,
    hidden: Vec<f64>,
}

impl Stepper {
    fn new(env: &SyntheticEnv) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(env.seed);
        let d = env.cost.matvec_dim.max(1) as usize;
        let scale = 1.0 / (d as f64).sqrt();
        let weights = (0..d * d)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        let state = (0..env.state_dim.max(1))
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Stepper {
            env: env.clone(),
            rng,
            weights,
            state,
            features: vec![0.0; d],
            hidden: vec![0.0; d],
        }
    }

    /// One state -> action -> state interaction.
    fn step(&mut self, payload: &mut Vec<u8>) {
        let d = self.features.len();
        let n = self.state.len();
        for (i, f) in self.features.iter_mut().enumerate() {
            *f = self.state[i % n];
        }
        for (row, h) in self.hidden.iter_mut().enumerate() {
            let w = &self.weights[row * d..(row + 1) * d];
            *h = w.iter().zip(&self.features).map(|(a, b)| a * b).sum::<f64>().tanh();
        }
        let a = (self.env.action_dim.max(1) as usize).min(d);
        for (i, s) in self.state.iter_mut().enumerate() {
            let noise: f64 = self.rng.random_range(-0.01..0.01);
            *s = 0.9 * *s + 0.1 * self.hidden[i % a] + noise;
        }
        burn_cpu(Duration::from_micros(self.env.cost.extra_busy_us));
        if self.env.cost.payload_bytes > 0 {
            let start = payload.len();
            payload.resize(start + self.env.cost.payload_bytes as usize, 0);
            self.rng.fill_bytes(&mut payload[start..]);
        }
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.state {
            h.update(s.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub samples: u64,
    pub elapsed_s: f64,
    /// SHA-256 over the final state vector.
    pub checksum: String,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

/// Runs exactly `n_steps` interactions. The trajectory depends only on the
/// env and its seed.
pub fn actor_rollout(env: &SyntheticEnv, n_steps: u64) -> Rollout {
    let start = Instant::now();
    let mut stepper = Stepper::new(env);
    let mut payload = Vec::with_capacity((env.cost.payload_bytes * n_steps) as usize);
    for _ in 0..n_steps {
        stepper.step(&mut payload);
    }
    Rollout {
        samples: n_steps,
        elapsed_s: start.elapsed().as_secs_f64(),
        checksum: stepper.checksum(),
        payload,
    }
}

pub fn summary_artifact(job_id: &str) -> String {
    format!("{job_id}/summary")
}

pub fn trajectory_artifact(job_id: &str) -> String {
    format!("{job_id}/trajectory")
}

/// Task body registered as `actor_rollout`. Params: `env` (preset name),
/// `seed`, `steps`, optional cost overrides `matvec_dim`, `extra_busy_us`,
/// `payload_bytes`. Writes a JSON [`Rollout`] to every declared
/// `*/summary` output and the raw payload to every other output.
pub fn actor_task(ctx: &TaskContext<'_>) -> Result<TaskOutput, String> {
    let name = ctx.str_param("env").ok_or("missing param env")?;
    let mut env = SyntheticEnv::preset(name, ctx.u64_param("seed").unwrap_or(0))
        .map_err(|e| e.to_string())?;
    if let Some(v) = ctx.u64_param("matvec_dim") {
        env.cost.matvec_dim = v as u32;
    }
    if let Some(v) = ctx.u64_param("extra_busy_us") {
        env.cost.extra_busy_us = v;
    }
    if let Some(v) = ctx.u64_param("payload_bytes") {
        env.cost.payload_bytes = v;
    }
    let steps = ctx.u64_param("steps").ok_or("missing param steps")?;
    let rollout = actor_rollout(&env, steps);
    let summary = serde_json::to_vec(&rollout).map_err(|e| e.to_string())?;
    Ok(ctx
        .produces
        .iter()
        .map(|id| {
            let bytes = if id.ends_with("/summary") {
                summary.clone()
            } else {
                rollout.payload.clone()
            };
            (id.clone(), bytes)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRunSpec {
    pub env_name: String,
    pub total_cpu_workers: u32,
    pub samples_per_worker: u64,
    pub repetitions: u32,
    pub cost: StepCost,
    pub seed: u64,
}

impl BenchRunSpec {
    pub fn new(preset: &str, total_cpu_workers: u32) -> Result<Self, BenchError> {
        let env = SyntheticEnv::preset(preset, 0)?;
        Ok(BenchRunSpec {
            env_name: env.env_name,
            total_cpu_workers,
            samples_per_worker: DEFAULT_SAMPLES_PER_WORKER,
            repetitions: DEFAULT_REPETITIONS,
            cost: env.cost,
            seed: 0,
        })
    }

    pub fn total_samples(&self) -> u64 {
        self.samples_per_worker * self.total_cpu_workers as u64
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions == 0 {
            return Err(BenchError::InvalidSpec("repetitions must be at least 1".into()));
        }
        if self.total_cpu_workers == 0 {
            return Err(BenchError::InvalidSpec("total_cpu_workers must be at least 1".into()));
        }
        SyntheticEnv::preset(&self.env_name, 0).map(|_| ())
    }

    /// Actor jobs for one repetition. `tag` keeps ids unique across runs
    /// on the same cluster.
    pub fn actor_jobs(&self, tag: &str, rep: u32) -> Vec<JobSpec> {
        (0..self.total_cpu_workers)
            .map(|i| {
                let id = format!("bench-{tag}-r{rep}-a{i}");
                let mut produces = vec![summary_artifact(&id)];
                if self.cost.payload_bytes > 0 {
                    produces.push(trajectory_artifact(&id));
                }
                JobSpec::new(&id, ACTOR_TASK)
                    .param("env", self.env_name.as_str())
                    .param("seed", self.seed.wrapping_add(i as u64))
                    .param("steps", self.samples_per_worker)
                    .param("matvec_dim", self.cost.matvec_dim)
                    .param("extra_busy_us", self.cost.extra_busy_us)
                    .param("payload_bytes", self.cost.payload_bytes)
                    .produces(produces)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub env_name: String,
    pub total_cpu_workers: u32,
    pub repetition_index: u32,
    pub samples_collected: u64,
    pub wall_seconds: f64,
    pub throughput: f64,
}

impl BenchRecord {
    pub fn new(env: &str, cpus: u32, rep: u32, samples: u64, wall_seconds: f64) -> Self {
        BenchRecord {
            env_name: env.to_string(),
            total_cpu_workers: cpus,
            repetition_index: rep,
            samples_collected: samples,
            wall_seconds,
            throughput: samples as f64 / wall_seconds,
        }
    }
}

/// Executes `spec.repetitions` rounds of one actor per worker slot.
pub fn run_benchmark(handle: &ClusterHandle, spec: &BenchRunSpec) -> Result<Vec<BenchRecord>, BenchError> {
    spec.validate()?;
    let slots = handle.worker_slots()?;
    if slots != spec.total_cpu_workers {
        return Err(BenchError::SlotMismatch {
            expected: spec.total_cpu_workers,
            actual: slots,
        });
    }
    let mut client = handle.client()?;
    run_benchmark_with(&mut client, spec)
}

/// Same as [`run_benchmark`] against an already attached client. The
/// caller is responsible for the slot count.
pub fn run_benchmark_with(client: &mut HeadClient, spec: &BenchRunSpec) -> Result<Vec<BenchRecord>, BenchError> {
    spec.validate()?;
    let tag = format!("{}-{:08x}", spec.env_name, rand::rng().next_u32());
    client.set_timeout(None)?;
    let mut records = Vec::with_capacity(spec.repetitions as usize);
    for rep in 0..spec.repetitions {
        let jobs = spec.actor_jobs(&tag, rep);
        let ids = client.submit(jobs)?;
        let statuses = client.wait(&ids)?;
        if let Some(bad) = statuses.iter().find(|s| s.phase != JobPhase::Succeeded) {
            return Err(BenchError::ActorFailed {
                job_id: bad.job_id.clone(),
                error: bad.error.clone().unwrap_or_else(|| format!("{:?}", bad.phase)),
            });
        }
        let wall = wall_clock(&client.events()?, &ids).ok_or_else(|| {
            BenchError::InvalidSpec("event log lacks dispatch or finish events".into())
        })?;
        let mut samples = 0;
        for id in &ids {
            let raw = client
                .get(&summary_artifact(id))?
                .ok_or_else(|| BenchError::ActorFailed {
                    job_id: id.clone(),
                    error: "summary artifact missing".into(),
                })?;
            let r: Rollout = serde_json::from_slice(&raw).map_err(|e| BenchError::ActorFailed {
                job_id: id.clone(),
                error: e.to_string(),
            })?;
            samples += r.samples;
        }
        if samples != spec.total_samples() {
            return Err(BenchError::SampleShortfall {
                expected: spec.total_samples(),
                collected: samples,
            });
        }
        let rec = BenchRecord::new(&spec.env_name, spec.total_cpu_workers, rep, samples, wall);
        log::info!(
            "{} cpus={} rep={} samples={} wall={:.3}s throughput={:.1}",
            rec.env_name,
            rec.total_cpu_workers,
            rep,
            samples,
            wall,
            rec.throughput
        );
        records.push(rec);
    }
    Ok(records)
}

/// Seconds from the first dispatch to the last finish among `job_ids`.
pub fn wall_clock(events: &[crate::scheduler::Event], job_ids: &[String]) -> Option<f64> {
    let wanted: std::collections::HashSet<&str> = job_ids.iter().map(String::as_str).collect();
    let mut first: Option<f64> = None;
    let mut last: Option<f64> = None;
    for ev in events {
        match &ev.kind {
            EventKind::Dispatched { job_id, .. } if wanted.contains(job_id.as_str()) => {
                first = Some(first.map_or(ev.at, |f| f.min(ev.at)));
            }
            EventKind::Finished { job_id, .. } if wanted.contains(job_id.as_str()) => {
                last = Some(last.map_or(ev.at, |l| l.max(ev.at)));
            }
            _ => {}
        }
    }
    let wall = last? - first?;
    Some(wall.max(1e-9))
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for one value).
pub fn mean_stddev(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

pub fn aggregate(records: &[BenchRecord]) -> Result<(f64, f64), BenchError> {
    let first = records.first().ok_or(BenchError::EmptyInput)?;
    if records
        .iter()
        .any(|r| r.env_name != first.env_name || r.total_cpu_workers != first.total_cpu_workers)
    {
        return Err(BenchError::Heterogeneous);
    }
    let t: Vec<f64> = records.iter().map(|r| r.throughput).collect();
    Ok(mean_stddev(&t).expect("non-empty"))
}

/// Row layout of the bench CSV.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    env: String,
    total_cpus: u32,
    rep: u32,
    samples: u64,
    wall_s: f64,
    throughput: f64,
}

pub const CSV_HEADER: &str = "env,total_cpus,rep,samples,wall_s,throughput";

/// Appends records to a bench CSV, writing the header if the file is new
/// or empty.
pub fn append_csv(path: &Path, records: &[BenchRecord]) -> Result<(), BenchError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(CsvRow {
            env: r.env_name.clone(),
            total_cpus: r.total_cpu_workers,
            rep: r.repetition_index,
            samples: r.samples_collected,
            wall_s: r.wall_seconds,
            throughput: r.throughput,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(reader: impl io::Read) -> Result<Vec<BenchRecord>, BenchError> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(BenchRecord {
                env_name: row.env,
                total_cpu_workers: row.total_cpus,
                repetition_index: row.rep,
                samples_collected: row.samples,
                wall_seconds: row.wall_s,
                throughput: row.throughput,
            })
        })
        .collect()
}

pub fn write_json(path: &Path, records: &[BenchRecord]) -> Result<(), BenchError> {
    std::fs::write(path, serde_json::to_vec_pretty(records).expect("records serialize"))?;
    Ok(())
}

/// Groups records by (env, total_cpus) preserving first-seen env order.
pub fn group(records: &[BenchRecord]) -> Vec<((String, u32), Vec<BenchRecord>)> {
    let mut order: Vec<(String, u32)> = Vec::new();
    let mut map: HashMap<(String, u32), Vec<BenchRecord>> = HashMap::new();
    for r in records {
        let key = (r.env_name.clone(), r.total_cpu_workers);
        if !map.contains_key(&key) {
            order.push(key.clone());
        }
        map.entry(key).or_default().push(r.clone());
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).expect("key recorded");
            (k, v)
        })
        .collect()
}

/// Params for a single actor job, exposed for ad-hoc workloads.
pub fn actor_params(env: &str, seed: u64, steps: u64) -> BTreeMap<String, Value> {
    let mut p = BTreeMap::new();
    p.insert("env".into(), Value::from(env));
    p.insert("seed".into(), Value::from(seed));
    p.insert("steps".into(), Value::from(steps));
    p
}
