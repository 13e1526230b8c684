use std::time::Duration;

use thiserror::Error;

use crate::rendezvous::{HeadRecord, PROTOCOL_VERSION};
use crate::scheduler::{Event, JobSpec, JobStatus, WorkerState};
use crate::wire::{decode_bytes, encode_bytes, Channel, Message, WireError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("head refused the client: {0}")]
    Refused(String),
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
}

impl ClientError {
    /// Error category reported by the head, if this came from the head.
    pub fn remote_kind(&self) -> Option<&str> {
        match self {
            ClientError::Remote { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

/// Operator connection to the head's single entry point.
#[derive(Debug)]
pub struct HeadClient {
    chan: Channel,
}

fn remote(msg: Message, expected: &'static str) -> ClientError {
    match msg {
        Message::Error { kind, message } => ClientError::Remote { kind, message },
        other => ClientError::Wire(other.unexpected(expected)),
    }
}

impl HeadClient {
    pub fn attach(head: &HeadRecord, timeout: Duration) -> Result<Self, ClientError> {
        let mut chan = Channel::connect(head.socket_addr(), timeout)?;
        chan.set_read_timeout(Some(timeout)).map_err(WireError::from)?;
        match chan.request(&Message::Attach {
            token: head.token.clone(),
            protocol_version: PROTOCOL_VERSION,
        })? {
            Message::Attached {} => {}
            Message::Reject { reason } => return Err(ClientError::Refused(reason)),
            other => return Err(remote(other, "ATTACHED")),
        }
        chan.set_read_timeout(None).map_err(WireError::from)?;
        Ok(HeadClient { chan })
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> Result<(), ClientError> {
        self.chan.set_read_timeout(timeout).map_err(WireError::from)?;
        Ok(())
    }

    pub fn submit(&mut self, jobs: Vec<JobSpec>) -> Result<Vec<String>, ClientError> {
        match self.chan.request(&Message::Submit { jobs })? {
            Message::Accepted { job_ids } => Ok(job_ids),
            other => Err(remote(other, "ACCEPTED")),
        }
    }

    pub fn status(&mut self, job_id: &str) -> Result<JobStatus, ClientError> {
        match self.chan.request(&Message::Status {
            job_id: job_id.to_string(),
        })? {
            Message::JobState { status } => Ok(status),
            other => Err(remote(other, "JOB_STATE")),
        }
    }

    /// Blocks until every job is terminal or can never run.
    pub fn wait(&mut self, job_ids: &[String]) -> Result<Vec<JobStatus>, ClientError> {
        match self.chan.request(&Message::Wait {
            job_ids: job_ids.to_vec(),
        })? {
            Message::JobStates { statuses } => Ok(statuses),
            other => Err(remote(other, "JOB_STATES")),
        }
    }

    pub fn describe(&mut self) -> Result<(Vec<WorkerState>, Vec<JobStatus>), ClientError> {
        match self.chan.request(&Message::Describe {})? {
            Message::Cluster { workers, jobs } => Ok((workers, jobs)),
            other => Err(remote(other, "CLUSTER")),
        }
    }

    pub fn events(&mut self) -> Result<Vec<Event>, ClientError> {
        match self.chan.request(&Message::Events {})? {
            Message::EventLog { events } => Ok(events),
            other => Err(remote(other, "EVENT_LOG")),
        }
    }

    pub fn get(&mut self, artifact_id: &str) -> Result<Option<Vec<u8>>, ClientError> {
        match self.chan.request(&Message::Get {
            artifact_id: artifact_id.to_string(),
        })? {
            Message::Got { bytes_b64, .. } => Ok(Some(decode_bytes(&bytes_b64)?)),
            Message::Missing { .. } => Ok(None),
            other => Err(remote(other, "GOT or MISSING")),
        }
    }

    /// Stores an external artifact. The head answers PUT only on failure, so
    /// this round-trips a DESCRIBE to learn the outcome.
    pub fn put(&mut self, artifact_id: &str, bytes: &[u8]) -> Result<(), ClientError> {
        self.chan.send(&Message::Put {
            artifact_id: artifact_id.to_string(),
            bytes_b64: encode_bytes(bytes),
        })?;
        match self.chan.request(&Message::Describe {})? {
            Message::Cluster { .. } => Ok(()),
            other => {
                let err = remote(other, "CLUSTER");
                // drain the DESCRIBE reply queued behind the error
                let _ = self.chan.recv();
                Err(err)
            }
        }
    }

    pub fn stop(&mut self) -> Result<(), ClientError> {
        match self.chan.request(&Message::Stop {})? {
            Message::Stopping {} => Ok(()),
            other => Err(remote(other, "STOPPING")),
        }
    }
}
