//! Runtime of a node agent: head server, worker executor, operator client.

mod agent;
mod client;
mod head;
mod worker;

use thiserror::Error;

pub use agent::{
    run_agent, AgentEnv, AgentError, AgentRole, ENV_BIND_ADDR, ENV_CLUSTER_ID, ENV_CPU_SLOTS,
    ENV_NODE_COUNT, ENV_NODE_INDEX, ENV_SANDBOX_DIR, ENV_STORE_ROOT, ENV_WALLTIME_S,
};
pub use client::{ClientError, HeadClient};
pub use head::HeadServer;
pub use worker::run_worker;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Rendezvous(#[from] crate::rendezvous::RendezvousError),
}
