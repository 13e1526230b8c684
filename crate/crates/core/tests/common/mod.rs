#![allow(dead_code)]

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nestor::fabric::audit_agents;
use nestor::orchestrator::{ClusterConfig, ClusterHandle};

pub const AGENT_BIN: &str = env!("CARGO_BIN_EXE_nestor");

/// Config whose store and sandboxes live under `dir`.
pub fn config(dir: &Path, id: &str, n_nodes: u32, cpus: u32) -> ClusterConfig {
    let mut cfg = ClusterConfig::new(id, n_nodes, cpus, dir.join("store"));
    cfg.sandbox_root = Some(dir.join("sandboxes"));
    cfg.agent_program = Some(AGENT_BIN.into());
    cfg.walltime_s = 300;
    cfg.formation_timeout_s = Some(30.0);
    cfg
}

/// Waits briefly for agents of `cluster_id` to disappear and returns the
/// survivors.
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

fn socket_inodes(pid: u32) -> HashSet<u64> {
    let Ok(dir) = fs::read_dir(format!("/proc/{pid}/fd")) else {
        return HashSet::new();
    };
    dir.filter_map(|e| {
        let target = fs::read_link(e.ok()?.path()).ok()?;
        let t = target.to_str()?;
        t.strip_prefix("socket:[")?.strip_suffix(']')?.parse().ok()
    })
    .collect()
}

/// Ports of TCP sockets in LISTEN state owned by `pid`.
pub fn listening_ports(pid: u32) -> Vec<u16> {
    let mine = socket_inodes(pid);
    let mut ports = Vec::new();
    for table in ["/proc/net/tcp", "/proc/net/tcp6"] {
        let Ok(text) = fs::read_to_string(table) else { continue };
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 10 || cols[3] != "0A" {
                continue;
            }
            let inode: u64 = cols[9].parse().unwrap_or(0);
            if mine.contains(&inode) {
                let port = cols[1].rsplit(':').next().unwrap();
                ports.push(u16::from_str_radix(port, 16).unwrap());
            }
        }
    }
    ports.sort_unstable();
    ports
}

/// Brings the cluster down on drop so a failed assertion leaves no agents behind.
pub struct Guard(pub ClusterHandle);

impl std::ops::Deref for Guard {
    type Target = ClusterHandle;

    fn deref(&self) -> &ClusterHandle {
        &self.0
    }
}

impl Drop for Guard {
    fn drop(&mut self) {
        self.0.down();
    }
}
