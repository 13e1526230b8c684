//! Newline-delimited JSON framing shared by the rendezvous handshake, the
//! head/worker task protocol and operator clients.
//!
//! Every frame is one JSON object terminated by `\n`. The `type` field names
//! the message; payload bytes travel base64-encoded.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scheduler::{Event, JobSpec, JobStatus, WorkerState};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("peer closed the connection")]
    Closed,
    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: String },
}

/// Outcome reported by a worker for one task.
#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskOutcome {
    Succeeded,
    Failed,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    // rendezvous handshake, worker -> head
    Hello {
        token: String,
        protocol_version: u32,
        node_name: String,
        cpu_slots: u32,
    },
    Welcome {
        worker_id: u32,
    },
    Reject {
        reason: String,
    },

    // head <-> worker
    Task {
        job_id: String,
        task_kind: String,
        params: BTreeMap<String, Value>,
        deps: Vec<String>,
        produces: Vec<String>,
    },
    #[serde(rename = "RESULT")]
    TaskResult {
        job_id: String,
        status: TaskOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Put {
        artifact_id: String,
        bytes_b64: String,
    },
    Get {
        artifact_id: String,
    },
    Got {
        artifact_id: String,
        bytes_b64: String,
    },
    Missing {
        artifact_id: String,
    },
    Heartbeat {
        worker_id: u32,
    },
    Shutdown {},

    // operator client <-> head
    Attach {
        token: String,
        protocol_version: u32,
    },
    Attached {},
    Submit {
        jobs: Vec<JobSpec>,
    },
    Accepted {
        job_ids: Vec<String>,
    },
    Status {
        job_id: String,
    },
    JobState {
        status: JobStatus,
    },
    /// Block until every listed job is terminal or can never become ready.
    Wait {
        job_ids: Vec<String>,
    },
    JobStates {
        statuses: Vec<JobStatus>,
    },
    Describe {},
    Cluster {
        workers: Vec<WorkerState>,
        jobs: Vec<JobStatus>,
    },
    Events {},
    EventLog {
        events: Vec<Event>,
    },
    Stop {},
    Stopping {},
    Error {
        kind: String,
        message: String,
    },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Welcome { .. } => "WELCOME",
            Message::Reject { .. } => "REJECT",
            Message::Task { .. } => "TASK",
            Message::TaskResult { .. } => "RESULT",
            Message::Put { .. } => "PUT",
            Message::Get { .. } => "GET",
            Message::Got { .. } => "GOT",
            Message::Missing { .. } => "MISSING",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::Shutdown {} => "SHUTDOWN",
            Message::Attach { .. } => "ATTACH",
            Message::Attached {} => "ATTACHED",
            Message::Submit { .. } => "SUBMIT",
            Message::Accepted { .. } => "ACCEPTED",
            Message::Status { .. } => "STATUS",
            Message::JobState { .. } => "JOB_STATE",
            Message::Wait { .. } => "WAIT",
            Message::JobStates { .. } => "JOB_STATES",
            Message::Describe {} => "DESCRIBE",
            Message::Cluster { .. } => "CLUSTER",
            Message::Events {} => "EVENTS",
            Message::EventLog { .. } => "EVENT_LOG",
            Message::Stop {} => "STOP",
            Message::Stopping {} => "STOPPING",
            Message::Error { .. } => "ERROR",
        }
    }

    pub fn unexpected(self, expected: &'static str) -> WireError {
        WireError::Unexpected {
            expected,
            got: self.name().to_string(),
        }
    }
}

pub fn encode_bytes(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_bytes(text: &str) -> Result<Vec<u8>, WireError> {
    STANDARD
        .decode(text)
        .map_err(|e| WireError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))
}

/// Serializes one frame, newline included.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut buf = serde_json::to_vec(msg)?;
    buf.push(b'\n');
    Ok(buf)
}

/// Write half of a connection.
#[derive(Debug)]
pub struct FrameWriter {
    stream: TcpStream,
}

impl FrameWriter {
    pub fn new(stream: TcpStream) -> Self {
        FrameWriter { stream }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        let frame = encode_frame(msg)?;
        self.stream.write_all(&frame)?;
        self.stream.flush()?;
        Ok(())
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

/// Read half of a connection.
#[derive(Debug)]
pub struct FrameReader<R> {
    reader: R,
    line: String,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(reader: R) -> Self {
        FrameReader {
            reader,
            line: String::new(),
        }
    }

    /// Returns `Ok(None)` on a clean end of stream.
    pub fn recv(&mut self) -> Result<Option<Message>, WireError> {
        loop {
            self.line.clear();
            let n = self.reader.read_line(&mut self.line)?;
            if n == 0 {
                return Ok(None);
            }
            let trimmed = self.line.trim();
            if trimmed.is_empty() {
                continue;
            }
            return Ok(Some(serde_json::from_str(trimmed)?));
        }
    }
}

/// A full-duplex framed TCP connection.
#[derive(Debug)]
pub struct Channel {
    reader: FrameReader<BufReader<TcpStream>>,
    writer: FrameWriter,
    peer: SocketAddr,
}

impl Channel {
    pub fn new(stream: TcpStream) -> Result<Self, WireError> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let read_half = stream.try_clone()?;
        Ok(Channel {
            reader: FrameReader::new(BufReader::new(read_half)),
            writer: FrameWriter::new(stream),
            peer,
        })
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, WireError> {
        let mut last = None;
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => return Channel::new(s),
                Err(e) => last = Some(e),
            }
        }
        Err(WireError::Io(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::AddrNotAvailable, "no address resolved")
        })))
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.writer.stream.local_addr()
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        self.writer.send(msg)
    }

    pub fn recv(&mut self) -> Result<Option<Message>, WireError> {
        self.reader.recv()
    }

    /// Like `recv` but treats end of stream as an error.
    pub fn expect(&mut self) -> Result<Message, WireError> {
        self.recv()?.ok_or(WireError::Closed)
    }

    pub fn request(&mut self, msg: &Message) -> Result<Message, WireError> {
        self.send(msg)?;
        self.expect()
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.writer.stream.set_read_timeout(timeout)
    }

    pub fn into_split(self) -> (FrameReader<BufReader<TcpStream>>, FrameWriter) {
        (self.reader, self.writer)
    }
}
