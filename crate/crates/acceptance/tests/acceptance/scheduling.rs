use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nestor::orchestrator;
use nestor::scheduler::{Artifact, Event, EventKind, JobPhase, JobSpec, ObjectStore, Scheduler};

use crate::support::{config, orphans};
use crate::ensure;

const TRIALS: u64 = 500;
/// Declared by nobody, so anything depending on it can never run.
const NEVER: &str = "never";

#[derive(Debug, Clone)]
struct Dag {
    /// Indexed by job number; job k produces `o{k}` and may only consume
    /// outputs of lower-numbered jobs.
    deps: Vec<Vec<usize>>,
    blocked: Vec<bool>,
    fails: Vec<bool>,
    cpus: Vec<u32>,
    /// Submission order as job numbers.
    order: Vec<usize>,
    workers: Vec<u32>,
}

impl Dag {
    fn random(rng: &mut ChaCha8Rng, single_slot: bool) -> Dag {
        let n = rng.random_range(1..=8usize);
        let workers: Vec<u32> = if single_slot {
            vec![1]
        } else {
            (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=3)).collect()
        };
        let max_slots = *workers.iter().max().unwrap();
        let deps = (0..n)
            .map(|k| (0..k).filter(|_| rng.random_bool(0.35)).collect())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Dag {
            deps,
            blocked: (0..n).map(|_| rng.random_bool(0.08)).collect(),
            fails: (0..n).map(|_| rng.random_bool(0.15)).collect(),
            cpus: (0..n).map(|_| rng.random_range(1..=max_slots)).collect(),
            order,
            workers,
        }
    }

    fn n(&self) -> usize {
        self.deps.len()
    }

    fn spec(&self, k: usize, task: Option<&str>) -> JobSpec {
        let kind = task.map_or("sim", |t| if self.fails[k] { "fail" } else { t });
        let mut deps: Vec<String> = self.deps[k].iter().map(|d| format!("o{d}")).collect();
        if self.blocked[k] {
            deps.push(NEVER.into());
        }
        JobSpec::new(format!("j{k}"), kind)
            .cpus(self.cpus[k])
            .depends_on(deps)
            .produces([format!("o{k}")])
    }

    /// Largest set of jobs that can all run: every dependency of a member is
    /// produced by a member that succeeds. Valid sets are closed under
    /// union, so the largest one is unique. Found by checking every subset.
    fn oracle(&self) -> BTreeSet<usize> {
        let n = self.n();
        let mut best = 0u32;
        for mask in 0u32..(1 << n) {
            let ok = (0..n).filter(|k| mask & (1 << k) != 0).all(|k| {
                !self.blocked[k]
                    && self.deps[k]
                        .iter()
                        .all(|&d| mask & (1 << d) != 0 && !self.fails[d])
            });
            if ok && mask.count_ones() > best.count_ones() {
                best = mask;
            }
        }
        (0..n).filter(|k| best & (1 << k) != 0).collect()
    }

    /// Single worker, single slot: repeatedly run the earliest-submitted job
    /// whose inputs all exist.
    fn kahn_order(&self) -> Vec<usize> {
        let mut have: HashSet<usize> = HashSet::new();
        let mut done: HashSet<usize> = HashSet::new();
        let mut out = Vec::new();
        while let Some(&k) = self
            .order
            .iter()
            .find(|&&k| !done.contains(&k) && !self.blocked[k] && self.deps[k].iter().all(|d| have.contains(d)))
        {
            done.insert(k);
            out.push(k);
            if !self.fails[k] {
                have.insert(k);
            }
        }
        out
    }
}

fn job_num(id: &str) -> usize {
    id[1..].parse().unwrap()
}

/// Drives the scheduler with a random completion order standing in for
/// workers.
fn simulate(dag: &Dag, rng: &mut ChaCha8Rng) -> Result<Scheduler, String> {
    let mut s = Scheduler::new(ObjectStore::new(), None);
    for (i, slots) in dag.workers.iter().enumerate() {
        s.register_worker(i as u32 + 1, *slots);
    }
    s.submit_batch(dag.order.iter().map(|&k| dag.spec(k, None)).collect())
        .map_err(|e| e.to_string())?;
    let mut running: Vec<String> = Vec::new();
    for _ in 0..1000 {
        running.extend(s.schedule_tick().into_iter().map(|a| a.job_id));
        if running.is_empty() {
            return Ok(s);
        }
        running.shuffle(rng);
        let finish = rng.random_range(1..=running.len());
        for id in running.drain(..finish) {
            let k = job_num(&id);
            let outcome = if dag.fails[k] {
                Err("simulated failure".to_string())
            } else {
                s.put_artifact(Artifact::new(format!("o{k}"), vec![k as u8], &id))
                    .map_err(|e| e.to_string())?;
                Ok(())
            };
            s.complete(&id, outcome).map_err(|e| e.to_string())?;
        }
    }
    Err("simulation did not settle".into())
}

/// Happens-before, slot and outcome checks on an event log. Returns the set
/// of jobs that were dispatched.
fn check_log(dag: &Dag, events: &[Event], slots: &HashMap<u32, u32>) -> Result<BTreeSet<usize>, String> {
    let mut dispatched: HashMap<usize, u64> = HashMap::new();
    let mut stored: HashMap<String, u64> = HashMap::new();
    let mut placed: HashMap<usize, u32> = HashMap::new();
    let mut used: HashMap<u32, u32> = HashMap::new();
    for ev in events {
        match &ev.kind {
            EventKind::Dispatched { job_id, worker_id } => {
                let k = job_num(job_id);
                ensure!(dispatched.insert(k, ev.seq).is_none(), "{job_id} dispatched twice");
                placed.insert(k, *worker_id);
                let u = used.entry(*worker_id).or_default();
                *u += dag.cpus[k];
                ensure!(*u <= slots[worker_id], "worker {worker_id} over-committed: {u}");
            }
            EventKind::Finished { job_id, phase, .. } => {
                let k = job_num(job_id);
                let want = if dag.fails[k] { JobPhase::Failed } else { JobPhase::Succeeded };
                ensure!(*phase == want, "{job_id} finished {phase:?}, expected {want:?}");
                *used.get_mut(&placed[&k]).unwrap() -= dag.cpus[k];
            }
            EventKind::ArtifactStored { artifact_id, .. } => {
                stored.insert(artifact_id.clone(), ev.seq);
            }
            _ => {}
        }
    }
    for (&k, &at) in &dispatched {
        ensure!(!dag.blocked[k], "j{k} ran without its unavailable input");
        for d in &dag.deps[k] {
            let s = stored.get(&format!("o{d}")).copied();
            ensure!(s.is_some_and(|s| s < at), "j{k} dispatched at {at} before o{d} was stored ({s:?})");
        }
    }
    for k in 0..dag.n() {
        if dag.fails[k] {
            ensure!(!stored.contains_key(&format!("o{k}")), "failed j{k} stored its output");
        }
    }
    Ok(dispatched.into_keys().collect())
}

fn dispatch_order(events: &[Event]) -> Vec<usize> {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Dispatched { job_id, .. } => Some(job_num(job_id)),
            _ => None,
        })
        .collect()
}

fn slot_map(workers: &[u32]) -> HashMap<u32, u32> {
    workers.iter().enumerate().map(|(i, s)| (i as u32 + 1, *s)).collect()
}

/// Expected bytes of `o{k}` under the concat task: inputs in id order, then
/// the job's own message.
fn expected_bytes(dag: &Dag, k: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for d in &dag.deps[k] {
        out.extend(expected_bytes(dag, *d));
    }
    out.extend(format!("{k}").bytes());
    out
}

fn live_runs(seeds: &[u64]) -> Result<usize, String> {
    let d = tempfile::tempdir().map_err(|e| e.to_string())?;
    let h = orchestrator::up(config(d.path(), "acc-dag", 3, 2)).map_err(|e| e.to_string())?;
    let result = (|| {
        let mut client = h.client().map_err(|e| e.to_string())?;
        let mut checked = 0;
        for (round, &seed) in seeds.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dag = Dag::random(&mut rng, false);
            dag.cpus.iter_mut().for_each(|c| *c = (*c).min(2));
            let prefix = format!("r{round}-");
            let jobs: Vec<JobSpec> = dag
                .order
                .iter()
                .map(|&k| {
                    let mut j = dag.spec(k, Some("concat")).param("message", k.to_string());
                    j.job_id = format!("{prefix}{}", j.job_id);
                    j.produces = [format!("{prefix}o{k}")].into();
                    j.data_deps = j
                        .data_deps
                        .iter()
                        .map(|a| if a == NEVER { a.clone() } else { format!("{prefix}{a}") })
                        .collect();
                    j
                })
                .collect();
            let ids = client.submit(jobs).map_err(|e| e.to_string())?;
            client.wait(&ids).map_err(|e| e.to_string())?;
            let events: Vec<Event> = client
                .events()
                .map_err(|e| e.to_string())?
                .into_iter()
                .filter_map(|mut e| strip(&mut e.kind, &prefix).then_some(e))
                .collect();
            let slots = h
                .registered_workers()
                .iter()
                .map(|w| (w.worker_id, w.cpu_slots_total))
                .collect();
            let ran = check_log(&dag, &events, &slots)?;
            ensure!(ran == dag.oracle(), "live round {round}: ran {ran:?}, oracle {:?}", dag.oracle());
            for &k in &ran {
                if dag.fails[k] {
                    continue;
                }
                let got = client
                    .get(&format!("{prefix}o{k}"))
                    .map_err(|e| e.to_string())?
                    .ok_or_else(|| format!("o{k} missing"))?;
                ensure!(got == expected_bytes(&dag, k), "live round {round}: o{k} = {got:?}");
            }
            checked += 1;
        }
        Ok(checked)
    })();
    h.down();
    ensure!(orphans("acc-dag").is_empty(), "agents left after down");
    result
}

/// Keeps events of one live round and removes its id prefix.
fn strip(kind: &mut EventKind, prefix: &str) -> bool {
    let id = match kind {
        EventKind::Dispatched { job_id, .. } | EventKind::Finished { job_id, .. } => job_id,
        EventKind::ArtifactStored { artifact_id, .. } => artifact_id,
        _ => return false,
    };
    match id.strip_prefix(prefix) {
        Some(rest) => {
            *id = rest.to_string();
            true
        }
        None => false,
    }
}

pub fn scheduler_correctness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut edges = 0;
    let mut stalled = 0;
    for trial in 0..TRIALS {
        let dag = Dag::random(&mut rng, false);
        let s = simulate(&dag, &mut rng).map_err(|e| format!("trial {trial}: {e}"))?;
        let ran = check_log(&dag, s.events(), &slot_map(&dag.workers)).map_err(|e| format!("trial {trial}: {e} {dag:?}"))?;
        let oracle = dag.oracle();
        ensure!(ran == oracle, "trial {trial}: ran {ran:?}, oracle {oracle:?} for {dag:?}");
        for k in (0..dag.n()).filter(|k| !ran.contains(k)) {
            ensure!(s.is_stalled(&format!("j{k}")), "trial {trial}: j{k} neither ran nor stalled");
            stalled += 1;
        }
        edges += dag.deps.iter().map(Vec::len).sum::<usize>();
    }

    for trial in 0..TRIALS {
        let dag = Dag::random(&mut rng, true);
        let s = simulate(&dag, &mut rng).map_err(|e| format!("1x1 trial {trial}: {e}"))?;
        let got = dispatch_order(s.events());
        let want = dag.kahn_order();
        ensure!(got == want, "1x1 trial {trial}: order {got:?}, expected {want:?} for {dag:?}");
    }

    let live = live_runs(&[11, 12, 13, 14])?;
    Ok(format!(
        "{TRIALS} random DAGs ({edges} edges, {stalled} stalled jobs) match the subset oracle; \
         {TRIALS} single-slot runs follow submission-order topological order; {live} live DAGs agree"
    ))
}
