use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::NodeError;
use crate::rendezvous::{handshake_join, HeadRecord, WorkerRegistration};
use crate::scheduler::tasks::{run_task, ArtifactAccess, TaskError, TaskInvocation, TaskRegistry};
use crate::wire::{decode_bytes, encode_bytes, FrameWriter, Message, TaskOutcome};

const HEARTBEAT_EVERY: Duration = Duration::from_secs(2);
const FETCH_TIMEOUT: Duration = Duration::from_secs(120);

type Waiters = Mutex<HashMap<String, Vec<Sender<Option<Vec<u8>>>>>>;

/// Object-store access over the worker's connection to the head.
struct RemoteAccess {
    writer: Arc<Mutex<FrameWriter>>,
    waiters: Waiters,
}

impl RemoteAccess {
    fn send(&self, msg: &Message) -> Result<(), TaskError> {
        self.writer
            .lock()
            .expect("writer lock poisoned")
            .send(msg)
            .map_err(|e| TaskError::Store(e.to_string()))
    }

    fn deliver(&self, artifact_id: &str, bytes: Option<Vec<u8>>) {
        let waiting = self
            .waiters
            .lock()
            .expect("waiters lock poisoned")
            .remove(artifact_id)
            .unwrap_or_default();
        for w in waiting {
            let _ = w.send(bytes.clone());
        }
    }
}

impl ArtifactAccess for RemoteAccess {
    fn fetch(&self, artifact_id: &str) -> Result<Vec<u8>, TaskError> {
        let (tx, rx) = mpsc::channel();
        self.waiters
            .lock()
            .expect("waiters lock poisoned")
            .entry(artifact_id.to_string())
            .or_default()
            .push(tx);
        self.send(&Message::Get {
            artifact_id: artifact_id.to_string(),
        })?;
        match rx.recv_timeout(FETCH_TIMEOUT) {
            Ok(Some(bytes)) => Ok(bytes),
            Ok(None) => Err(TaskError::Store(format!("artifact {artifact_id} missing"))),
            Err(_) => Err(TaskError::Store(format!("timed out fetching {artifact_id}"))),
        }
    }

    fn store(&self, _producer: &str, artifact_id: &str, bytes: Vec<u8>) -> Result<(), TaskError> {
        self.send(&Message::Put {
            artifact_id: artifact_id.to_string(),
            bytes_b64: encode_bytes(&bytes),
        })
    }
}

/// Joins the head and executes assigned tasks, one thread per task, until
/// the head sends SHUTDOWN or the connection drops. The head never assigns
/// more concurrent work than `cpu_slots`.
pub fn run_worker(
    head: &HeadRecord,
    node_name: &str,
    cpu_slots: u32,
    registry: Arc<TaskRegistry>,
) -> Result<WorkerRegistration, NodeError> {
    let (reg, chan) = handshake_join(head, node_name, cpu_slots)?;
    log::info!("joined {} as worker {}", head.cluster_id, reg.worker_id);
    let (mut reader, writer) = chan.into_split();
    let writer = Arc::new(Mutex::new(writer));
    let access = Arc::new(RemoteAccess {
        writer: writer.clone(),
        waiters: Mutex::new(HashMap::new()),
    });
    let done = Arc::new(AtomicBool::new(false));

    {
        let (writer, done) = (writer.clone(), done.clone());
        let worker_id = reg.worker_id;
        thread::Builder::new()
            .name("heartbeat".into())
            .spawn(move || {
                while !done.load(Ordering::SeqCst) {
                    thread::sleep(HEARTBEAT_EVERY);
                    let sent = writer
                        .lock()
                        .expect("writer lock poisoned")
                        .send(&Message::Heartbeat { worker_id });
                    if sent.is_err() {
                        break;
                    }
                }
            })?;
    }

    loop {
        let msg = match reader.recv() {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                log::warn!("worker {} lost head connection: {e}", reg.worker_id);
                break;
            }
        };
        match msg {
            Message::Task {
                job_id,
                task_kind,
                params,
                deps,
                produces,
            } => {
                let inv = TaskInvocation {
                    job_id,
                    task_kind,
                    params,
                    deps,
                    produces,
                };
                let (registry, access) = (registry.clone(), access.clone());
                thread::Builder::new()
                    .name(format!("task-{}", inv.job_id))
                    .spawn(move || {
                        let result = run_task(&registry, &inv, access.as_ref());
                        let (status, error) = match result {
                            Ok(_) => (TaskOutcome::Succeeded, None),
                            Err(e) => (TaskOutcome::Failed, Some(e.to_string())),
                        };
                        let _ = access.send(&Message::TaskResult {
                            job_id: inv.job_id,
                            status,
                            error,
                        });
                    })?;
            }
            Message::Got {
                artifact_id,
                bytes_b64,
            } => {
                let bytes = decode_bytes(&bytes_b64).ok();
                access.deliver(&artifact_id, bytes);
            }
            Message::Missing { artifact_id } => access.deliver(&artifact_id, None),
            Message::Shutdown {} => {
                log::info!("worker {} shutting down", reg.worker_id);
                break;
            }
            other => log::warn!("worker ignoring {}", other.name()),
        }
    }
    done.store(true, Ordering::SeqCst);
    writer.lock().expect("writer lock poisoned").shutdown();
    Ok(reg)
}
