//! Bootstraps a head-worker task cluster inside a batch allocation of
//! identical node processes, and measures how its throughput scales.

pub mod bench;
pub mod cli;
pub mod fabric;
pub mod node;
pub mod orchestrator;
pub mod rendezvous;
pub mod report;
pub mod scheduler;
pub mod wire;
