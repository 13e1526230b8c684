//! Head election and discovery through a shared store.
//!
//! Every node agent of an allocation runs the same program. They race to
//! claim `<cluster_id>/head.lock`; the winner binds a listener and publishes
//! a [`HeadRecord`] under `<cluster_id>/head.json`, the others poll for that
//! record and join the head over TCP with a HELLO/WELCOME exchange.

mod handshake;
mod store;

use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use handshake::{handshake_join, Admission, Registrar, Rejection, WorkerRegistration};
pub use store::{validate_component, FileStore, RendezvousStore};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(250);
pub const DEFAULT_DISCOVERY_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum RendezvousError {
    #[error("store unreachable at {location}: {source}")]
    StoreUnreachable {
        location: String,
        #[source]
        source: std::io::Error,
    },
    #[error("node {node_name} does not hold the head role of cluster {cluster_id}")]
    NotHead { cluster_id: String, node_name: String },
    #[error("no head record for cluster {cluster_id} after {waited:?}")]
    DiscoveryTimeout { cluster_id: String, waited: Duration },
    #[error("malformed head record: {0}")]
    MalformedRecord(String),
    #[error("join rejected by head: {0}")]
    AuthRejected(String),
    #[error("protocol version mismatch: ours {ours}, head {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("connection to head failed: {0}")]
    ConnectionFailed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Published identity of the elected head node.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct HeadRecord {
    pub cluster_id: String,
    pub address: String,
    pub port: u16,
    pub token: String,
    pub epoch: u64,
    pub protocol_version: u32,
    pub created_at: u64,
}

impl HeadRecord {
    /// Builds a record with a fresh random token and the current time.
    pub fn new(cluster_id: &str, address: &str, port: u16, epoch: u64) -> Self {
        HeadRecord {
            cluster_id: cluster_id.to_string(),
            address: address.to_string(),
            port,
            token: generate_token(),
            epoch,
            protocol_version: PROTOCOL_VERSION,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<(), RendezvousError> {
        let bad = |m: String| Err(RendezvousError::MalformedRecord(m));
        if store::validate_component(&self.cluster_id).is_err() {
            return bad(format!("cluster_id {:?}", self.cluster_id));
        }
        if self.address.parse::<std::net::IpAddr>().is_err() {
            return bad(format!("address {:?} is not an IP address", self.address));
        }
        if self.port == 0 {
            return bad("port 0".into());
        }
        if self.token.len() != 32 || !self.token.bytes().all(|b| b.is_ascii_hexdigit()) {
            return bad("token must be 32 hex characters".into());
        }
        if self.protocol_version < 1 {
            return bad("protocol_version must be >= 1".into());
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> String {
        match self.address.parse::<std::net::IpAddr>() {
            Ok(std::net::IpAddr::V6(v6)) => format!("[{v6}]:{}", self.port),
            _ => format!("{}:{}", self.address, self.port),
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, RendezvousError> {
        let rec: HeadRecord = serde_json::from_slice(bytes)
            .map_err(|e| RendezvousError::MalformedRecord(e.to_string()))?;
        rec.validate()?;
        Ok(rec)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("head record serializes")
    }
}

/// 128 random bits from the thread-local CSPRNG, hex encoded.
pub fn generate_token() -> String {
    let bytes: [u8; 16] = rand::rng().random();
    hex::encode(bytes)
}

pub fn head_lock_key(cluster_id: &str) -> String {
    format!("{cluster_id}/head.lock")
}

pub fn head_record_key(cluster_id: &str) -> String {
    format!("{cluster_id}/head.json")
}

/// Races for the head role of `cluster_id`. Exactly one node name wins; the
/// winner gets `true` again on repeated calls.
pub fn acquire_head_role(
    store: &dyn RendezvousStore,
    cluster_id: &str,
    node_name: &str,
) -> Result<bool, RendezvousError> {
    store::validate_component(cluster_id)?;
    store.try_claim(&head_lock_key(cluster_id), node_name)
}

/// Publishes `record` for discovery. Only the node holding the head lock may
/// publish. A record with a lower epoch than the one already stored is
/// dropped.
pub fn publish_head(
    store: &dyn RendezvousStore,
    node_name: &str,
    record: &HeadRecord,
) -> Result<(), RendezvousError> {
    record.validate()?;
    if !store.holds_claim(&head_lock_key(&record.cluster_id), node_name)? {
        return Err(RendezvousError::NotHead {
            cluster_id: record.cluster_id.clone(),
            node_name: node_name.to_string(),
        });
    }
    if let Ok(Some(current)) = read_head(store, &record.cluster_id) {
        if current.epoch > record.epoch {
            log::warn!(
                "ignoring head record with epoch {} (store has {})",
                record.epoch,
                current.epoch
            );
            return Ok(());
        }
    }
    store.put_atomic(&head_record_key(&record.cluster_id), &record.to_json())
}

/// One non-blocking read of the head record.
pub fn read_head(
    store: &dyn RendezvousStore,
    cluster_id: &str,
) -> Result<Option<HeadRecord>, RendezvousError> {
    match store.get(&head_record_key(cluster_id))? {
        Some(bytes) => {
            let rec = HeadRecord::from_json(&bytes)?;
            if rec.cluster_id != cluster_id {
                return Err(RendezvousError::MalformedRecord(format!(
                    "record names cluster {} but is stored under {cluster_id}",
                    rec.cluster_id
                )));
            }
            Ok(Some(rec))
        }
        None => Ok(None),
    }
}

/// Polls the store until a head record appears.
pub fn discover_head(
    store: &dyn RendezvousStore,
    cluster_id: &str,
    timeout: Duration,
    poll_interval: Duration,
) -> Result<HeadRecord, RendezvousError> {
    if timeout.is_zero() || poll_interval.is_zero() {
        return Err(RendezvousError::InvalidArgument(
            "timeout and poll_interval must be positive".into(),
        ));
    }
    store::validate_component(cluster_id)?;
    let start = Instant::now();
    loop {
        if let Some(rec) = read_head(store, cluster_id)? {
            return Ok(rec);
        }
        let waited = start.elapsed();
        if waited >= timeout {
            return Err(RendezvousError::DiscoveryTimeout {
                cluster_id: cluster_id.to_string(),
                waited,
            });
        }
        thread::sleep(poll_interval.min(timeout - waited));
    }
}
