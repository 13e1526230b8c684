use std::time::Instant;

use nestor::bench::{self, BenchRecord, BenchRunSpec};
use nestor::orchestrator;
use nestor::report::{build_report, Measurements, ScalingReport};

use crate::support::{config, orphans};
use crate::ensure;

/// Brings up `slots` worker slots as one head plus `slots / cpus` workers,
/// runs the benchmark and tears the cluster down.
fn bench_on(id: &str, cpus: u32, spec: &BenchRunSpec) -> Result<Vec<BenchRecord>, String> {
    let d = tempfile::tempdir().map_err(|e| e.to_string())?;
    let n = spec.total_cpu_workers / cpus + 1;
    let h = orchestrator::up(config(d.path(), id, n, cpus)).map_err(|e| format!("{id}: {e}"))?;
    let out = bench::run_benchmark(&h, spec).map_err(|e| format!("{id}: {e}"));
    h.down();
    ensure!(orphans(id).is_empty(), "{id}: agents left after down");
    out
}

pub fn sample_accounting() -> Result<String, String> {
    let mut seen = Vec::new();
    for slots in [4u32, 8, 16] {
        let mut spec = BenchRunSpec::new("cartpole", slots).map_err(|e| e.to_string())?;
        spec.samples_per_worker = 1000;
        spec.repetitions = 1;
        let recs = bench_on(&format!("acc-samples-{slots}"), 4, &spec)?;
        ensure!(recs.len() == 1, "{slots} slots: {} records", recs.len());
        let got = recs[0].samples_collected;
        ensure!(got == 1000 * slots as u64, "{slots} slots: {got} samples");
        seen.push(got.to_string());
    }
    Ok(format!("collected {} samples", seen.join(" / ")))
}

const LADDER: [u32; 3] = [1, 2, 4];
const TREND_SAMPLES: u64 = 400;
const TREND_REPS: u32 = 3;

fn ladder_report(preset: &str, c: u32) -> Result<ScalingReport, String> {
    let mut all = Vec::new();
    for k in LADDER {
        let mut spec = BenchRunSpec::new(preset, k * c).map_err(|e| e.to_string())?;
        spec.samples_per_worker = TREND_SAMPLES;
        spec.repetitions = TREND_REPS;
        all.extend(bench_on(&format!("acc-trend-{preset}-{k}"), c, &spec)?);
    }
    build_report(&Measurements::Records(all), c).map_err(|e| e.to_string())
}

fn describe(rep: &ScalingReport) -> String {
    rep.entries
        .iter()
        .map(|e| format!("{}:{:.0}/s {}%", e.total_cpus, e.mean_throughput, e.efficiency_pct))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn scaling_trend() -> Result<String, String> {
    let start = Instant::now();
    let c = std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1);
    let compute = ladder_report("ant", c)?;
    let comm = ladder_report("humanoid", c)?;
    let took = start.elapsed().as_secs_f64();
    let summary = format!(
        "c={c}; ant [{}]; humanoid [{}]; {took:.0}s",
        describe(&compute),
        describe(&comm)
    );

    let mut problems = Vec::new();
    let means: Vec<f64> = compute.entries.iter().map(|e| e.mean_throughput).collect();
    if !means.windows(2).all(|w| w[1] > w[0]) {
        problems.push("ant throughput not strictly increasing".to_string());
    }
    let top = |r: &ScalingReport| r.entries.last().map(|e| e.efficiency_pct).unwrap_or(0);
    if top(&compute) < 70 {
        problems.push(format!("ant efficiency at 4c is {}% (< 70%)", top(&compute)));
    }
    for e in compute.entries.iter().chain(&comm.entries) {
        if e.actual_factor > e.ideal_factor * 1.15 {
            problems.push(format!("{} at {} is super-linear ({:.2}x)", e.env_name, e.total_cpus, e.actual_factor));
        }
    }
    if top(&comm) >= top(&compute) {
        problems.push(format!(
            "humanoid efficiency at 4c ({}%) is not below ant ({}%)",
            top(&comm),
            top(&compute)
        ));
    }
    if took >= 300.0 {
        problems.push(format!("took {took:.0}s"));
    }
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    }
}
