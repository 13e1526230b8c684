//! Thin helpers over `/proc` and signals for agents that may not be our
//! children (an operator command re-attaching to a running cluster).

use std::fs;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::node::ENV_CLUSTER_ID;

/// Outcome of a terminate pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillReport {
    /// Processes that were alive and received SIGTERM.
    pub signaled: usize,
    /// Processes that outlived the grace period and received SIGKILL.
    pub killed: usize,
    /// Pids still alive after SIGKILL.
    pub unkillable: Vec<u32>,
}

impl KillReport {
    pub fn merge(&mut self, other: KillReport) {
        self.signaled += other.signaled;
        self.killed += other.killed;
        self.unkillable.extend(other.unkillable);
    }
}

/// True if `pid` exists and is not a zombie.
pub fn pid_alive(pid: u32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        // the state field follows the parenthesised command name
        Ok(stat) => match stat.rfind(')') {
            Some(i) => !matches!(stat[i + 1..].trim_start().chars().next(), Some('Z' | 'X')),
            None => false,
        },
        Err(_) => false,
    }
}

/// Waits until `pid` has replaced its image (its cmdline becomes visible)
/// or has died. Spawning returns before exec completes.
pub fn wait_exec(pid: u32, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        let execd = fs::read(format!("/proc/{pid}/cmdline")).is_ok_and(|c| !c.is_empty());
        if execd || !pid_alive(pid) {
            return execd;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(2));
    }
}

/// Reads one variable from another process's initial environment.
pub fn environ_var(pid: u32, key: &str) -> Option<String> {
    let raw = fs::read(format!("/proc/{pid}/environ")).ok()?;
    raw.split(|b| *b == 0).find_map(|kv| {
        let kv = std::str::from_utf8(kv).ok()?;
        let (k, v) = kv.split_once('=')?;
        (k == key).then(|| v.to_string())
    })
}

/// Live processes whose environment marks them as agents of `cluster_id`,
/// or of any cluster when `cluster_id` is `None`.
pub fn audit_agents(cluster_id: Option<&str>) -> Vec<u32> {
    let Ok(dir) = fs::read_dir("/proc") else {
        return Vec::new();
    };
    let mut out: Vec<u32> = dir
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u32>().ok())
        .filter(|&pid| match environ_var(pid, ENV_CLUSTER_ID) {
            Some(c) => cluster_id.is_none_or(|want| want == c),
            None => false,
        })
        .filter(|&pid| pid_alive(pid))
        .collect();
    out.sort_unstable();
    out
}

fn signal_group(pid: u32, sig: libc::c_int) {
    // agents lead their own process group, so this reaches helpers they spawned
    unsafe {
        if libc::killpg(pid as libc::pid_t, sig) != 0 {
            libc::kill(pid as libc::pid_t, sig);
        }
    }
}

/// SIGTERM every live pid, wait up to `grace`, SIGKILL the rest.
/// `alive` decides liveness so callers can reap their own children.
pub fn terminate(pids: &[u32], grace: Duration, mut alive: impl FnMut(u32) -> bool) -> KillReport {
    let mut report = KillReport::default();
    let targets: Vec<u32> = pids.iter().copied().filter(|&p| alive(p)).collect();
    for &pid in &targets {
        signal_group(pid, libc::SIGTERM);
        report.signaled += 1;
    }
    let deadline = Instant::now() + grace;
    let mut remaining = targets;
    loop {
        remaining.retain(|&p| alive(p));
        if remaining.is_empty() || Instant::now() >= deadline {
            break;
        }
        thread::sleep(Duration::from_millis(20));
    }
    for &pid in &remaining {
        signal_group(pid, libc::SIGKILL);
        report.killed += 1;
    }
    let deadline = Instant::now() + Duration::from_secs(1);
    loop {
        remaining.retain(|&p| alive(p));
        if remaining.is_empty() || Instant::now() >= deadline {
            break;
        }
        thread::sleep(Duration::from_millis(20));
    }
    report.unkillable = remaining;
    report
}

/// Terminates pids recorded by another process. A pid is only signalled
/// while its environment still names `cluster_id`, so a recycled pid is
/// never touched.
pub fn terminate_detached(cluster_id: &str, pids: &[u32], grace: Duration) -> KillReport {
    let ours = |pid: u32| {
        pid_alive(pid) && environ_var(pid, ENV_CLUSTER_ID).as_deref() == Some(cluster_id)
    };
    terminate(pids, grace, ours)
}
