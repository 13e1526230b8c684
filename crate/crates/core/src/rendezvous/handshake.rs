use std::collections::BTreeMap;
use std::fmt;
use std::net::IpAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{HeadRecord, RendezvousError, PROTOCOL_VERSION};
use crate::wire::{Channel, Message, WireError};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

/// A worker admitted by the head.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct WorkerRegistration {
    pub worker_id: u32,
    pub node_name: String,
    pub cpu_slots: u32,
    pub address: String,
}

/// Why the head refused a HELLO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    BadToken,
    VersionMismatch { head: u32, worker: u32 },
    NoSlots,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::BadToken => write!(f, "auth: token mismatch"),
            Rejection::VersionMismatch { head, worker } => {
                write!(f, "version: head speaks {head}, worker sent {worker}")
            }
            Rejection::NoSlots => write!(f, "capacity: cpu_slots must be > 0"),
        }
    }
}

pub type Admission = Result<WorkerRegistration, Rejection>;

/// Head-side bookkeeping of joined workers. Worker ids are handed out densely
/// from 1 in admission order.
#[derive(Debug)]
pub struct Registrar {
    token: String,
    protocol_version: u32,
    next_id: u32,
    workers: BTreeMap<u32, WorkerRegistration>,
}

impl Registrar {
    pub fn new(record: &HeadRecord) -> Self {
        Registrar {
            token: record.token.clone(),
            protocol_version: record.protocol_version,
            next_id: 1,
            workers: BTreeMap::new(),
        }
    }

    pub fn check_token(&self, token: &str, protocol_version: u32) -> Result<(), Rejection> {
        // compare in constant time with respect to content
        let matches = token.len() == self.token.len()
            && token
                .bytes()
                .zip(self.token.bytes())
                .fold(0u8, |acc, (a, b)| acc | (a ^ b))
                == 0;
        if !matches {
            return Err(Rejection::BadToken);
        }
        if protocol_version != self.protocol_version {
            return Err(Rejection::VersionMismatch {
                head: self.protocol_version,
                worker: protocol_version,
            });
        }
        Ok(())
    }

    pub fn admit(
        &mut self,
        token: &str,
        protocol_version: u32,
        node_name: &str,
        cpu_slots: u32,
        peer: IpAddr,
    ) -> Admission {
        self.check_token(token, protocol_version)?;
        if cpu_slots == 0 {
            return Err(Rejection::NoSlots);
        }
        let reg = WorkerRegistration {
            worker_id: self.next_id,
            node_name: node_name.to_string(),
            cpu_slots,
            address: peer.to_string(),
        };
        self.next_id += 1;
        self.workers.insert(reg.worker_id, reg.clone());
        Ok(reg)
    }

    pub fn forget(&mut self, worker_id: u32) -> Option<WorkerRegistration> {
        self.workers.remove(&worker_id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerRegistration> {
        self.workers.values()
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }
}

fn conn_failed(e: WireError) -> RendezvousError {
    RendezvousError::ConnectionFailed(e.to_string())
}

/// Joins the head described by `head`: sends HELLO, waits for WELCOME.
/// Returns the registration and the open connection, which then carries the
/// task protocol.
pub fn handshake_join(
    head: &HeadRecord,
    node_name: &str,
    cpu_slots: u32,
) -> Result<(WorkerRegistration, Channel), RendezvousError> {
    if head.protocol_version != PROTOCOL_VERSION {
        return Err(RendezvousError::VersionMismatch {
            ours: PROTOCOL_VERSION,
            theirs: head.protocol_version,
        });
    }
    if cpu_slots == 0 {
        return Err(RendezvousError::InvalidArgument("cpu_slots must be > 0".into()));
    }
    let mut chan = Channel::connect(head.socket_addr(), CONNECT_TIMEOUT).map_err(conn_failed)?;
    chan.set_read_timeout(Some(HANDSHAKE_TIMEOUT))
        .map_err(|e| conn_failed(e.into()))?;
    let reply = chan
        .request(&Message::Hello {
            token: head.token.clone(),
            protocol_version: PROTOCOL_VERSION,
            node_name: node_name.to_string(),
            cpu_slots,
        })
        .map_err(conn_failed)?;
    chan.set_read_timeout(None).map_err(|e| conn_failed(e.into()))?;
    match reply {
        Message::Welcome { worker_id } => {
            let address = chan
                .local_addr()
                .map(|a| a.ip().to_string())
                .unwrap_or_default();
            Ok((
                WorkerRegistration {
                    worker_id,
                    node_name: node_name.to_string(),
                    cpu_slots,
                    address,
                },
                chan,
            ))
        }
        Message::Reject { reason } if reason.starts_with("version") => {
            Err(RendezvousError::VersionMismatch {
                ours: PROTOCOL_VERSION,
                theirs: head.protocol_version,
            })
        }
        Message::Reject { reason } => Err(RendezvousError::AuthRejected(reason)),
        other => Err(conn_failed(other.unexpected("WELCOME or REJECT"))),
    }
}
