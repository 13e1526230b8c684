use std::env;
use std::net::IpAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::{run_worker, HeadServer, NodeError};
use crate::fabric::{self, FabricError};
use crate::rendezvous::{
    acquire_head_role, discover_head, publish_head, FileStore, RendezvousError, WorkerRegistration,
    DEFAULT_DISCOVERY_TIMEOUT, DEFAULT_POLL_INTERVAL,
};
use crate::scheduler::tasks::TaskRegistry;

pub const ENV_CLUSTER_ID: &str = "NESTOR_CLUSTER_ID";
pub const ENV_NODE_INDEX: &str = "NESTOR_NODE_INDEX";
pub const ENV_CPU_SLOTS: &str = "NESTOR_CPU_SLOTS";
pub const ENV_SANDBOX_DIR: &str = "NESTOR_SANDBOX_DIR";
pub const ENV_STORE_ROOT: &str = "NESTOR_STORE_ROOT";
pub const ENV_WALLTIME_S: &str = "NESTOR_WALLTIME_S";
/// Number of nodes in the allocation; a lone node hosts a worker itself.
pub const ENV_NODE_COUNT: &str = "NESTOR_NODE_COUNT";
/// Address the head binds and advertises. Defaults to loopback.
pub const ENV_BIND_ADDR: &str = "NESTOR_BIND_ADDR";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("bad agent environment: {0}")]
    Env(String),
    #[error(transparent)]
    Bundle(#[from] FabricError),
    #[error(transparent)]
    Rendezvous(#[from] RendezvousError),
    #[error(transparent)]
    Node(#[from] NodeError),
}

impl AgentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AgentError::Rendezvous(RendezvousError::StoreUnreachable { .. })
            | AgentError::Node(NodeError::Rendezvous(RendezvousError::StoreUnreachable { .. })) => 3,
            AgentError::Env(_) => 2,
            _ => 10,
        }
    }
}

/// Everything a node agent learns from the allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEnv {
    pub cluster_id: String,
    pub node_index: u32,
    pub cpu_slots: u32,
    pub sandbox_dir: PathBuf,
    pub store_root: PathBuf,
    pub walltime: Duration,
    pub node_count: u32,
    pub bind_addr: IpAddr,
}

impl AgentEnv {
    pub fn from_env() -> Result<Self, AgentError> {
        Self::from_lookup(|k| env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, AgentError> {
        let need = |k: &str| get(k).ok_or_else(|| AgentError::Env(format!("{k} is not set")));
        let num = |k: &str| -> Result<u64, AgentError> {
            need(k)?
                .parse::<u64>()
                .map_err(|e| AgentError::Env(format!("{k}: {e}")))
        };
        let cpu_slots = num(ENV_CPU_SLOTS)? as u32;
        if cpu_slots == 0 {
            return Err(AgentError::Env(format!("{ENV_CPU_SLOTS} must be > 0")));
        }
        let bind_addr = match get(ENV_BIND_ADDR) {
            Some(a) => a
                .parse()
                .map_err(|e| AgentError::Env(format!("{ENV_BIND_ADDR}: {e}")))?,
            None => IpAddr::from([127, 0, 0, 1]),
        };
        Ok(AgentEnv {
            cluster_id: need(ENV_CLUSTER_ID)?,
            node_index: num(ENV_NODE_INDEX)? as u32,
            cpu_slots,
            sandbox_dir: PathBuf::from(need(ENV_SANDBOX_DIR)?),
            store_root: PathBuf::from(need(ENV_STORE_ROOT)?),
            walltime: Duration::from_secs(num(ENV_WALLTIME_S)?),
            node_count: get(ENV_NODE_COUNT)
                .and_then(|v| v.parse().ok())
                .unwrap_or(2),
            bind_addr,
        })
    }

    pub fn to_vars(&self) -> Vec<(String, String)> {
        vec![
            (ENV_CLUSTER_ID.into(), self.cluster_id.clone()),
            (ENV_NODE_INDEX.into(), self.node_index.to_string()),
            (ENV_CPU_SLOTS.into(), self.cpu_slots.to_string()),
            (ENV_SANDBOX_DIR.into(), self.sandbox_dir.display().to_string()),
            (ENV_STORE_ROOT.into(), self.store_root.display().to_string()),
            (ENV_WALLTIME_S.into(), self.walltime.as_secs().to_string()),
            (ENV_NODE_COUNT.into(), self.node_count.to_string()),
            (ENV_BIND_ADDR.into(), self.bind_addr.to_string()),
        ]
    }

    pub fn node_name(&self) -> String {
        format!("node-{}", self.node_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentRole {
    Head,
    Worker(WorkerRegistration),
}

/// Body of one node agent: wait for the staged bundle, race for the head
/// role, then either serve as head or join it as a worker. Returns when the
/// cluster shuts down.
pub fn run_agent(env: &AgentEnv, registry: TaskRegistry) -> Result<AgentRole, AgentError> {
    let stage_wait = env.walltime.min(Duration::from_secs(300));
    let manifest = fabric::wait_for_staged(&env.sandbox_dir, stage_wait)?;
    log::info!("bundle verified ({} entries)", manifest.len());

    let store = FileStore::new(&env.store_root);
    let node_name = env.node_name();
    if acquire_head_role(&store, &env.cluster_id, &node_name)? {
        let runtime = env.sandbox_dir.join("runtime");
        std::fs::create_dir_all(&runtime).map_err(NodeError::from)?;
        let server = HeadServer::bind(&env.cluster_id, env.bind_addr, 1, registry)?
            .with_runtime_dir(runtime);
        publish_head(&store, &node_name, server.record())?;
        let embedded = (env.node_count <= 1).then_some(env.cpu_slots);
        server.run(embedded)?;
        Ok(AgentRole::Head)
    } else {
        let head = discover_head(
            &store,
            &env.cluster_id,
            DEFAULT_DISCOVERY_TIMEOUT.max(stage_wait),
            DEFAULT_POLL_INTERVAL,
        )?;
        let reg = run_worker(&head, &node_name, env.cpu_slots, Arc::new(registry))?;
        Ok(AgentRole::Worker(reg))
    }
}
