mod common;

use std::collections::HashMap;
use std::fs;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use nestor::fabric::AllocationState;
use nestor::orchestrator::{self, run_script, OrchestratorError, Phase, UpFailure, Workload};
use nestor::scheduler::{EventKind, JobPhase, JobSpec};

use common::{config, listening_ports, orphans, Guard};

#[test]
fn two_nodes_form_one_head_and_one_worker() {
    let d = tempfile::tempdir().unwrap();
    let h = Guard(orchestrator::up(config(d.path(), "it-two", 2, 4)).unwrap());
    assert_eq!(h.phase(), Phase::Ready);
    assert_eq!(h.worker_slots().unwrap(), 4);
    assert_eq!(h.registered_workers().len(), 1);
    h.down();
    assert_eq!(h.phase(), Phase::Down);
    assert_eq!(h.allocation().state(), AllocationState::TornDown);
    h.down();
    assert!(orphans("it-two").is_empty());
    assert!(!d.path().join("store/it-two/head.json").exists());
}

#[test]
fn fan_out_reaches_full_parallelism() {
    let d = tempfile::tempdir().unwrap();
    let h = Guard(orchestrator::up(config(d.path(), "it-fan", 3, 4)).unwrap());
    assert_eq!(h.worker_slots().unwrap(), 8);
    let jobs: Vec<JobSpec> = (0..8)
        .map(|i| {
            JobSpec::new(format!("f{i}"), "sleep")
                .param("ms", 400)
                .produces([format!("f{i}.out")])
        })
        .collect();
    let res = run_script(&h, &Workload::new(jobs)).unwrap();
    assert!(res.statuses.iter().all(|s| s.phase == JobPhase::Succeeded));
    assert_eq!(res.artifacts.len(), 8);

    let mut running = 0i32;
    let mut peak = 0;
    for ev in &res.events {
        match &ev.kind {
            EventKind::Dispatched { .. } => running += 1,
            EventKind::Finished { .. } => running -= 1,
            _ => {}
        }
        peak = peak.max(running);
    }
    assert_eq!(peak, 8);
    h.down();
    assert!(orphans("it-fan").is_empty());
}

#[test]
fn diamond_runs_d_last_and_concatenates_in_order() {
    let d = tempfile::tempdir().unwrap();
    let h = Guard(orchestrator::up(config(d.path(), "it-diamond", 3, 2)).unwrap());
    let jobs = vec![
        JobSpec::new("A", "echo").param("message", "a").produces(["a"]),
        JobSpec::new("B", "concat").param("message", "b").depends_on(["a"]).produces(["b"]),
        JobSpec::new("C", "concat").param("message", "c").depends_on(["a"]).produces(["c"]),
        JobSpec::new("D", "concat").depends_on(["b", "c"]).produces(["d"]),
    ];
    let res = run_script(&h, &Workload::new(jobs).fetch_only(vec!["d".into()])).unwrap();
    assert_eq!(res.artifacts["d"], b"abac");
    let dispatched: HashMap<&str, u64> = res
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Dispatched { job_id, .. } => Some((job_id.as_str(), e.seq)),
            _ => None,
        })
        .collect();
    let stored: HashMap<&str, u64> = res
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::ArtifactStored { artifact_id, .. } => Some((artifact_id.as_str(), e.seq)),
            _ => None,
        })
        .collect();
    assert!(stored["b"] < dispatched["D"] && stored["c"] < dispatched["D"]);
    assert!(stored["a"] < dispatched["B"] && stored["a"] < dispatched["C"]);
    let last_finish = res
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Finished { job_id, .. } => Some(job_id.as_str()),
            _ => None,
        })
        .last();
    assert_eq!(last_finish, Some("D"));

    let err = run_script(
        &h,
        &Workload::new(vec![JobSpec::new("bad", "fail").param("message", "boom")]),
    )
    .unwrap_err();
    assert!(matches!(err, OrchestratorError::WorkloadFailed { ref job_id, .. } if job_id == "bad"));

    h.down();
    let err = run_script(&h, &Workload::new(vec![JobSpec::new("late", "echo")])).unwrap_err();
    assert!(matches!(err, OrchestratorError::ClusterNotReady(Phase::Down)));
    assert!(orphans("it-diamond").is_empty());
}

#[test]
fn unusable_store_fails_in_head_phase_and_cleans_up() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("not-a-dir"), b"").unwrap();
    let mut cfg = config(d.path(), "it-badstore", 2, 1);
    cfg.store_root = d.path().join("not-a-dir/store");
    let err = orchestrator::up(cfg).unwrap_err();
    match err {
        OrchestratorError::Up { phase, failure } => {
            assert!(matches!(failure, UpFailure::Store(_)), "{failure}");
            assert!(phase <= Phase::HeadUp, "{phase:?}");
        }
        other => panic!("unexpected {other}"),
    }
    assert!(orphans("it-badstore").is_empty());
}

#[test]
fn second_cluster_with_a_live_id_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let h = Guard(orchestrator::up(config(d.path(), "it-dup", 1, 1)).unwrap());
    let err = orchestrator::up(config(d.path(), "it-dup", 1, 1)).unwrap_err();
    assert!(matches!(
        err,
        OrchestratorError::Up { failure: UpFailure::AlreadyRunning(_), .. }
    ));
    assert_eq!(h.phase(), Phase::Ready);
    h.down();
    assert!(orphans("it-dup").is_empty());
}

#[test]
fn formation_timeout_tears_down() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path(), "it-timeout", 2, 1);
    // an agent that never joins: the lone shell cannot become head or worker
    cfg.agent_program = Some("/bin/sleep".into());
    cfg.formation_timeout_s = Some(1.0);
    let start = Instant::now();
    let err = orchestrator::up(cfg).unwrap_err();
    assert!(start.elapsed() < Duration::from_secs(15));
    assert!(matches!(
        err,
        OrchestratorError::Up { failure: UpFailure::FormationTimeout { .. } | UpFailure::AgentsExited(_), .. }
    ));
    assert!(orphans("it-timeout").is_empty());
}

#[test]
fn only_the_head_listens_and_runtime_files_stay_in_sandboxes() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path(), "it-entry", 3, 1);
    cfg.retain_sandbox = true;
    let h = Guard(orchestrator::up(cfg).unwrap());
    let head = h.head_record().unwrap();

    let mut listeners = Vec::new();
    for (node, pid) in h.allocation().pids() {
        let ports = listening_ports(pid);
        if !ports.is_empty() {
            listeners.push((node, ports));
        }
        let cwd = fs::read_link(format!("/proc/{pid}/cwd")).unwrap();
        assert_eq!(cwd, h.allocation().nodes()[node as usize].sandbox_dir);
    }
    assert_eq!(listeners.len(), 1, "{listeners:?}");
    assert_eq!(listeners[0].1, vec![head.port]);
    let head_node = listeners[0].0;

    run_script(&h, &Workload::new(vec![JobSpec::new("x", "echo").produces(["x"])])).unwrap();
    h.down();

    for node in h.allocation().nodes() {
        let sb = &node.sandbox_dir;
        assert!(sb.join("agent.log").exists());
        assert!(sb.join("bundle/manifest.json").exists());
        assert_eq!(sb.join("runtime/events.jsonl").exists(), node.node_index == head_node);
    }
    let mut store_files: Vec<String> = walk(&d.path().join("store"));
    store_files.sort();
    assert!(
        store_files.iter().all(|f| f.starts_with("it-entry/")),
        "{store_files:?}"
    );
    assert!(orphans("it-entry").is_empty());
}

fn walk(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().display().to_string());
            }
        }
    }
    out
}

#[test]
fn down_racing_formation_never_deadlocks() {
    for i in 0..50 {
        let d = tempfile::tempdir().unwrap();
        let id = format!("it-race-{i}");
        let h = orchestrator::launch(config(d.path(), &id, 2, 1)).unwrap();
        let former = h.clone();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let _ = tx.send(former.form());
        });
        thread::sleep(Duration::from_millis((i * 7 % 60) as u64));
        h.down();
        let formed = rx.recv_timeout(Duration::from_secs(30)).expect("form() hung");
        if let Err(e) = formed {
            assert!(
                matches!(e, OrchestratorError::Up { .. } | OrchestratorError::ClusterNotReady(_)),
                "{e}"
            );
        }
        assert_eq!(h.phase(), Phase::Down);
        assert_eq!(h.allocation().state(), AllocationState::TornDown);
        assert!(orphans(&id).is_empty(), "iteration {i}");
    }
}
