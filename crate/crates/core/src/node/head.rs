use std::collections::HashMap;
use std::io::BufReader;
use std::path::PathBuf;
use std::net::{IpAddr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::{run_worker, NodeError};
use crate::rendezvous::{HeadRecord, Registrar};
use crate::scheduler::tasks::TaskRegistry;
use crate::scheduler::{Artifact, JobStatus, ObjectStore, Scheduler, SchedulerError};
use crate::wire::{decode_bytes, encode_bytes, FrameReader, FrameWriter, Message, TaskOutcome};

type ConnId = u64;

enum Inbound {
    Connected {
        conn: ConnId,
        writer: FrameWriter,
        peer: SocketAddr,
    },
    Frame {
        conn: ConnId,
        msg: Message,
    },
    Closed {
        conn: ConnId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Pending,
    Worker(u32),
    Client,
}

struct Conn {
    writer: FrameWriter,
    peer: SocketAddr,
    role: Role,
}

/// The head node: owns the scheduler, the object store and the only
/// listening socket of the cluster.
pub struct HeadServer {
    listener: TcpListener,
    record: HeadRecord,
    registry: Arc<TaskRegistry>,
    runtime_dir: Option<PathBuf>,
}

impl HeadServer {
    /// Binds an OS-assigned port on `bind` and prepares the record to publish.
    pub fn bind(cluster_id: &str, bind: IpAddr, epoch: u64, registry: TaskRegistry) -> Result<Self, NodeError> {
        let listener = TcpListener::bind(SocketAddr::new(bind, 0))?;
        let port = listener.local_addr()?.port();
        Ok(HeadServer {
            listener,
            record: HeadRecord::new(cluster_id, &bind.to_string(), port, epoch),
            registry: Arc::new(registry),
            runtime_dir: None,
        })
    }

    /// Directory for the head's runtime files; the event log is written
    /// there as `events.jsonl` on shutdown.
    pub fn with_runtime_dir(mut self, dir: PathBuf) -> Self {
        self.runtime_dir = Some(dir);
        self
    }

    pub fn record(&self) -> &HeadRecord {
        &self.record
    }

    /// Runs the event loop on a background thread.
    pub fn spawn(self, embedded_worker_slots: Option<u32>) -> JoinHandle<Result<(), NodeError>> {
        thread::Builder::new()
            .name("head".into())
            .spawn(move || self.run(embedded_worker_slots))
            .expect("spawn head thread")
    }

    /// Serves until a client sends STOP. With `embedded_worker_slots` the
    /// head also joins itself as a worker, for single-node clusters.
    pub fn run(self, embedded_worker_slots: Option<u32>) -> Result<(), NodeError> {
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let local = self.listener.local_addr()?;
        let acceptor = {
            let listener = self.listener.try_clone()?;
            let (tx, stop) = (tx.clone(), stop.clone());
            thread::Builder::new()
                .name("head-accept".into())
                .spawn(move || accept_loop(listener, tx, stop))?
        };
        drop(tx);

        if let Some(slots) = embedded_worker_slots {
            let record = self.record.clone();
            let registry = self.registry.clone();
            thread::Builder::new()
                .name("embedded-worker".into())
                .spawn(move || {
                    if let Err(e) = run_worker(&record, "head-local", slots, registry) {
                        log::error!("embedded worker stopped: {e}");
                    }
                })?;
        }

        let mut ev = EventLoop {
            sched: Scheduler::new(ObjectStore::new(), Some(self.registry.kinds())),
            registrar: Registrar::new(&self.record),
            conns: HashMap::new(),
            waiters: Vec::new(),
            stopping: false,
        };
        log::info!("head of {} serving on {local}", self.record.cluster_id);
        ev.run(rx);

        if let Some(dir) = &self.runtime_dir {
            let mut out = Vec::new();
            for e in ev.sched.events() {
                serde_json::to_writer(&mut out, e).expect("event serializes");
                out.push(b'\n');
            }
            if let Err(e) = std::fs::write(dir.join("events.jsonl"), out) {
                log::warn!("could not write event log: {e}");
            }
        }

        stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(local);
        let _ = acceptor.join();
        Ok(())
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut next: ConnId = 0;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let (peer, read_half) = match (stream.peer_addr(), stream.try_clone()) {
            (Ok(p), Ok(r)) => (p, r),
            _ => continue,
        };
        next += 1;
        let conn = next;
        if tx
            .send(Inbound::Connected {
                conn,
                writer: FrameWriter::new(stream),
                peer,
            })
            .is_err()
        {
            break;
        }
        let tx = tx.clone();
        let spawned = thread::Builder::new()
            .name(format!("head-conn-{conn}"))
            .spawn(move || {
                let mut reader = FrameReader::new(BufReader::new(read_half));
                loop {
                    match reader.recv() {
                        Ok(Some(msg)) => {
                            if tx.send(Inbound::Frame { conn, msg }).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            log::debug!("connection {conn} read error: {e}");
                            break;
                        }
                    }
                }
                let _ = tx.send(Inbound::Closed { conn });
            });
        if spawned.is_err() {
            log::error!("could not spawn reader for connection {conn}");
        }
    }
}

struct EventLoop {
    sched: Scheduler,
    registrar: Registrar,
    conns: HashMap<ConnId, Conn>,
    waiters: Vec<(ConnId, Vec<String>)>,
    stopping: bool,
}

impl EventLoop {
    fn run(&mut self, rx: Receiver<Inbound>) {
        while let Ok(first) = rx.recv() {
            self.handle(first);
            while let Ok(more) = rx.try_recv() {
                self.handle(more);
                if self.stopping {
                    break;
                }
            }
            if self.stopping {
                break;
            }
            self.dispatch();
            self.answer_waiters();
        }
        for conn in self.conns.values_mut() {
            if let Role::Worker(_) = conn.role {
                let _ = conn.writer.send(&Message::Shutdown {});
            }
            conn.writer.shutdown();
        }
    }

    fn reply(&mut self, conn: ConnId, msg: &Message) {
        let failed = match self.conns.get_mut(&conn) {
            Some(c) => c.writer.send(msg).is_err(),
            None => false,
        };
        if failed {
            self.drop_conn(conn);
        }
    }

    fn drop_conn(&mut self, conn: ConnId) {
        let Some(c) = self.conns.remove(&conn) else {
            return;
        };
        c.writer.shutdown();
        match c.role {
            Role::Worker(id) => {
                self.registrar.forget(id);
                let lost = self.sched.remove_worker(id);
                log::warn!("worker {id} disconnected; failed jobs: {lost:?}");
            }
            Role::Client => self.waiters.retain(|(w, _)| *w != conn),
            Role::Pending => {}
        }
    }

    fn handle(&mut self, inbound: Inbound) {
        match inbound {
            Inbound::Connected { conn, writer, peer } => {
                self.conns.insert(
                    conn,
                    Conn {
                        writer,
                        peer,
                        role: Role::Pending,
                    },
                );
            }
            Inbound::Closed { conn } => self.drop_conn(conn),
            Inbound::Frame { conn, msg } => {
                let Some(role) = self.conns.get(&conn).map(|c| c.role) else {
                    return;
                };
                match role {
                    Role::Pending => self.on_greeting(conn, msg),
                    Role::Worker(id) => self.on_worker(conn, id, msg),
                    Role::Client => self.on_client(conn, msg),
                }
            }
        }
    }

    fn on_greeting(&mut self, conn: ConnId, msg: Message) {
        let peer = self.conns[&conn].peer.ip();
        match msg {
            Message::Hello {
                token,
                protocol_version,
                node_name,
                cpu_slots,
            } => match self
                .registrar
                .admit(&token, protocol_version, &node_name, cpu_slots, peer)
            {
                Ok(reg) => {
                    log::info!(
                        "worker {} ({}) joined with {} slots",
                        reg.worker_id,
                        reg.node_name,
                        reg.cpu_slots
                    );
                    self.conns.get_mut(&conn).expect("live conn").role = Role::Worker(reg.worker_id);
                    self.sched.register_worker(reg.worker_id, reg.cpu_slots);
                    self.reply(conn, &Message::Welcome {
                        worker_id: reg.worker_id,
                    });
                }
                Err(rej) => {
                    log::warn!("rejected {node_name} from {peer}: {rej}");
                    self.reply(conn, &Message::Reject {
                        reason: rej.to_string(),
                    });
                    self.drop_conn(conn);
                }
            },
            Message::Attach {
                token,
                protocol_version,
            } => match self.registrar.check_token(&token, protocol_version) {
                Ok(()) => {
                    self.conns.get_mut(&conn).expect("live conn").role = Role::Client;
                    self.reply(conn, &Message::Attached {});
                }
                Err(rej) => {
                    self.reply(conn, &Message::Reject {
                        reason: rej.to_string(),
                    });
                    self.drop_conn(conn);
                }
            },
            other => {
                self.reply(conn, &Message::Reject {
                    reason: format!("handshake: expected HELLO or ATTACH, got {}", other.name()),
                });
                self.drop_conn(conn);
            }
        }
    }

    fn store_put(&mut self, artifact_id: String, bytes_b64: &str) -> Result<(), SchedulerError> {
        let bytes = decode_bytes(bytes_b64).map_err(|e| SchedulerError::InvalidJob {
            job_id: String::new(),
            reason: format!("bad payload for {artifact_id}: {e}"),
        })?;
        let producer = self.sched.producer_of(&artifact_id).to_string();
        self.sched.put_artifact(Artifact::new(artifact_id, bytes, producer))
    }

    fn store_get(&mut self, conn: ConnId, artifact_id: String) {
        let reply = match self.sched.get_artifact(&artifact_id) {
            Ok(a) => Message::Got {
                bytes_b64: encode_bytes(&a.bytes),
                artifact_id,
            },
            Err(_) => Message::Missing { artifact_id },
        };
        self.reply(conn, &reply);
    }

    fn on_worker(&mut self, conn: ConnId, worker_id: u32, msg: Message) {
        self.sched.touch_worker(worker_id);
        match msg {
            Message::Put {
                artifact_id,
                bytes_b64,
            } => {
                if let Err(e) = self.store_put(artifact_id, &bytes_b64) {
                    log::warn!("worker {worker_id} PUT refused: {e}");
                }
            }
            Message::Get { artifact_id } => self.store_get(conn, artifact_id),
            Message::TaskResult {
                job_id,
                status,
                error,
            } => {
                let outcome = match status {
                    TaskOutcome::Succeeded => Ok(()),
                    TaskOutcome::Failed => Err(error.unwrap_or_else(|| "task failed".into())),
                };
                if let Err(e) = self.sched.complete(&job_id, outcome) {
                    log::warn!("ignoring RESULT from worker {worker_id}: {e}");
                }
            }
            Message::Heartbeat { .. } => {}
            other => log::warn!("unexpected {} from worker {worker_id}", other.name()),
        }
    }

    fn on_client(&mut self, conn: ConnId, msg: Message) {
        let error = |e: SchedulerError| Message::Error {
            kind: e.kind().to_string(),
            message: e.to_string(),
        };
        match msg {
            Message::Submit { jobs } => {
                let reply = match self.sched.submit_batch(jobs) {
                    Ok(job_ids) => Message::Accepted { job_ids },
                    Err(e) => error(e),
                };
                self.reply(conn, &reply);
            }
            Message::Status { job_id } => {
                let reply = match self.sched.job_status(&job_id) {
                    Ok(status) => Message::JobState { status },
                    Err(e) => error(e),
                };
                self.reply(conn, &reply);
            }
            Message::Wait { job_ids } => {
                if let Some(unknown) = job_ids.iter().find(|j| self.sched.job_status(j).is_err()) {
                    let reply = error(SchedulerError::UnknownJob(unknown.clone()));
                    self.reply(conn, &reply);
                } else {
                    self.waiters.push((conn, job_ids));
                }
            }
            Message::Describe {} => {
                let reply = Message::Cluster {
                    workers: self.sched.workers(),
                    jobs: self.sched.statuses(),
                };
                self.reply(conn, &reply);
            }
            Message::Events {} => {
                let reply = Message::EventLog {
                    events: self.sched.events().to_vec(),
                };
                self.reply(conn, &reply);
            }
            Message::Get { artifact_id } => self.store_get(conn, artifact_id),
            Message::Put {
                artifact_id,
                bytes_b64,
            } => {
                if let Err(e) = self.store_put(artifact_id, &bytes_b64) {
                    self.reply(conn, &error(e));
                }
            }
            Message::Stop {} => {
                log::info!("stop requested");
                self.reply(conn, &Message::Stopping {});
                self.stopping = true;
            }
            other => {
                let reply = Message::Error {
                    kind: "Protocol".into(),
                    message: format!("clients may not send {}", other.name()),
                };
                self.reply(conn, &reply);
            }
        }
    }

    fn dispatch(&mut self) {
        for asg in self.sched.schedule_tick() {
            let spec = self.sched.job_spec(&asg.job_id).expect("assigned job exists");
            let task = Message::Task {
                job_id: spec.job_id.clone(),
                task_kind: spec.task_kind.clone(),
                params: spec.params.clone(),
                deps: spec.data_deps.iter().cloned().collect(),
                produces: spec.produces.iter().cloned().collect(),
            };
            let target = self
                .conns
                .iter()
                .find(|(_, c)| c.role == Role::Worker(asg.worker_id))
                .map(|(id, _)| *id);
            match target {
                Some(conn) => self.reply(conn, &task),
                None => {
                    let _ = self
                        .sched
                        .complete(&asg.job_id, Err(format!("worker {} unreachable", asg.worker_id)));
                }
            }
        }
    }

    fn answer_waiters(&mut self) {
        let mut ready = Vec::new();
        self.waiters.retain(|(conn, jobs)| {
            if jobs.iter().all(|j| self.sched.is_settled(j)) {
                ready.push((*conn, jobs.clone()));
                false
            } else {
                true
            }
        });
        for (conn, jobs) in ready {
            let statuses: Vec<JobStatus> = jobs
                .iter()
                .filter_map(|j| self.sched.job_status(j).ok())
                .collect();
            self.reply(conn, &Message::JobStates { statuses });
        }
    }
}
