use std::thread;
use std::time::{Duration, Instant};

use nestor::fabric::{allocate, audit_agents, environ_var, AgentCommand, AllocationRequest, AllocationState};
use nestor::orchestrator;

use crate::support::config;
use crate::ensure;

const SLACK: f64 = 6.0;

/// Seconds since allocation start at which no agent of `id` is left, or
/// None if some survive past `limit`.
fn gone_by(id: &str, elapsed: impl Fn() -> Duration, limit: f64) -> Option<f64> {
    loop {
        let t = elapsed().as_secs_f64();
        if audit_agents(Some(id)).is_empty() {
            return Some(t);
        }
        if t > limit + 1.0 {
            return None;
        }
        thread::sleep(Duration::from_millis(50));
    }
}

pub fn lifecycle_hygiene() -> Result<String, String> {
    let d = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Agents that ignore SIGTERM need the SIGKILL after the grace period.
    let walltime = 2.0;
    let req = AllocationRequest::new(
        "acc-stubborn",
        3,
        1,
        Duration::from_secs_f64(walltime),
        d.path().join("sb"),
        d.path().join("store"),
    );
    let alloc = allocate(req, AgentCommand::new("/bin/sh").arg("-c").arg("trap '' TERM; sleep 120"))
        .map_err(|e| e.to_string())?;
    let enforcer = alloc.enforce_walltime();
    let stubborn = gone_by("acc-stubborn", || alloc.elapsed(), walltime + SLACK);
    let report = enforcer.join().map_err(|_| "walltime thread panicked")?;
    alloc.teardown(false);
    let stubborn = stubborn.ok_or("TERM-ignoring agents outlived walltime + 6 s")?;
    ensure!(stubborn <= walltime + SLACK, "TERM-ignoring agents gone only after {stubborn:.1}s");
    ensure!(
        report.as_ref().is_some_and(|r| r.killed == 3 && r.unkillable.is_empty()),
        "unexpected kill report {report:?}"
    );

    // A formed cluster left running past its walltime.
    let mut cfg = config(d.path(), "acc-expire", 3, 1);
    cfg.walltime_s = 3;
    let h = orchestrator::up(cfg).map_err(|e| e.to_string())?;
    let alloc = h.allocation().clone();
    let cluster = gone_by("acc-expire", || alloc.elapsed(), 3.0 + SLACK);
    let state = alloc.state();
    h.down();
    let cluster = cluster.ok_or("cluster agents outlived walltime + 6 s")?;
    ensure!(state == AllocationState::Expired, "allocation state {state:?}");

    // Nothing launched by any criterion may survive.
    let deadline = Instant::now() + Duration::from_secs(3);
    let leftovers = loop {
        let left: Vec<(u32, String)> = audit_agents(None)
            .into_iter()
            .filter_map(|p| environ_var(p, "NESTOR_CLUSTER_ID").map(|id| (p, id)))
            .filter(|(_, id)| id.starts_with("acc-"))
            .collect();
        if left.is_empty() || Instant::now() > deadline {
            break left;
        }
        thread::sleep(Duration::from_millis(50));
    };
    ensure!(leftovers.is_empty(), "orphaned agents: {leftovers:?}");
    Ok(format!(
        "TERM-ignoring agents gone {stubborn:.1}s after start (walltime {walltime}s), \
         expired cluster gone at {cluster:.1}s (walltime 3s), 0 orphans"
    ))
}
