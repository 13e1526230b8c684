use std::path::Path;
use std::time::{Duration, Instant};

use nestor::fabric::audit_agents;
use nestor::orchestrator::ClusterConfig;

pub const AGENT_BIN: &str = env!("CARGO_BIN_EXE_acceptance-agent");
pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures");

/// Config whose store and sandboxes live under `dir`.
pub fn config(dir: &Path, id: &str, n_nodes: u32, cpus: u32) -> ClusterConfig {
    let mut cfg = ClusterConfig::new(id, n_nodes, cpus, dir.join("store"));
    cfg.sandbox_root = Some(dir.join("sandboxes"));
    cfg.agent_program = Some(AGENT_BIN.into());
    cfg.walltime_s = 300;
    cfg.formation_timeout_s = Some(30.0);
    cfg
}

/// Survivors among the agents of `cluster_id` after a short wait.
pub fn orphans(cluster_id: &str) -> Vec<u32> {
    let deadline = Instant::now() + Duration::from_secs(3);
    loop {
        let left = audit_agents(Some(cluster_id));
        if left.is_empty() || Instant::now() >= deadline {
            return left;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}
