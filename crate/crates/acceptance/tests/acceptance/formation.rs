use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use nestor::orchestrator::{self, Phase};
use nestor::rendezvous::{acquire_head_role, FileStore};

use crate::support::{config, orphans};
use crate::ensure;

const CONTENDERS: usize = 8;

pub fn formation() -> Result<String, String> {
    let d = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    for n in [2u32, 4, 9] {
        let id = format!("acc-form-{n}");
        let start = Instant::now();
        let h = orchestrator::up(config(d.path(), &id, n, 2)).map_err(|e| format!("n={n}: {e}"))?;
        let took = start.elapsed().as_secs_f64();
        let check = (|| {
            ensure!(h.phase() == Phase::Ready, "n={n}: phase {:?}", h.phase());
            let workers = h.registered_workers().len() as u32;
            ensure!(workers == n - 1, "n={n}: {workers} workers");
            let slots = h.worker_slots().map_err(|e| e.to_string())?;
            ensure!(slots == 2 * (n - 1), "n={n}: {slots} slots");
            ensure!(took < 30.0, "n={n}: formed in {took:.1}s");
            Ok(())
        })();
        h.down();
        check?;
        ensure!(orphans(&id).is_empty(), "n={n}: agents left after down");
        times.push(format!("n={n} {took:.2}s"));
    }

    let mut single = 0;
    for trial in 0..100 {
        let root = d.path().join(format!("election-{trial}"));
        let barrier = Arc::new(Barrier::new(CONTENDERS));
        let handles: Vec<_> = (0..CONTENDERS)
            .map(|i| {
                let barrier = barrier.clone();
                let store = FileStore::new(&root);
                thread::spawn(move || {
                    barrier.wait();
                    acquire_head_role(&store, "race", &format!("node-{i}")).unwrap()
                })
            })
            .collect();
        let winners = handles.into_iter().map(|h| h.join().unwrap()).filter(|w| *w).count();
        ensure!(winners == 1, "trial {trial}: {winners} winners");
        single += 1;
    }
    Ok(format!("formed {}; {single}/100 elections with exactly one of {CONTENDERS} winning", times.join(", ")))
}
