use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use nestor::report::{self, build_report, Measurements, Summary, TableFormat};

use crate::ensure;
use crate::support::FIXTURES;

#[derive(serde::Deserialize)]
struct Published {
    env: String,
    total_cpus: u32,
    speedup: i64,
    efficiency_pct: i64,
}

pub fn golden_tables() -> Result<String, String> {
    let raw = fs::read(format!("{FIXTURES}/throughput_means.csv")).map_err(|e| e.to_string())?;
    let published: Vec<Published> = csv::Reader::from_path(format!("{FIXTURES}/published_tables.csv"))
        .map_err(|e| e.to_string())?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    let start = Instant::now();
    let m = Measurements::parse(&raw).map_err(|e| e.to_string())?;
    let rep = build_report(&m, 28).map_err(|e| e.to_string())?;
    let text = String::from_utf8(report::emit_table(&rep, TableFormat::Text)).unwrap();
    let took = start.elapsed();

    ensure!(published.len() == 70, "expected 70 published rows, got {}", published.len());
    let mut within = 0;
    let mut exact = 0;
    let mut misses = Vec::new();
    for p in &published {
        let e = rep
            .entry(&p.env, p.total_cpus)
            .ok_or_else(|| format!("no entry for {} {}", p.env, p.total_cpus))?;
        let s = report::round_half_up(e.actual_factor);
        let f = e.efficiency_pct as i64;
        for (got, want) in [(s, p.speedup), (f, p.efficiency_pct)] {
            if (got - want).abs() <= 1 {
                within += 1;
            } else {
                misses.push(format!("{} {}: {got} vs {want}", p.env, p.total_cpus));
            }
            if got == want {
                exact += 1;
            }
        }
    }
    ensure!(misses.is_empty(), "{} cells off by more than 1: {misses:?}", misses.len());

    let anchors = [("Acrobot", 18, 57), ("Ant", 11, 35), ("Humanoid", 3, 9)];
    for (env, s, f) in anchors {
        let e = rep.entry(env, 868).unwrap();
        ensure!(
            report::display_speedup(e.actual_factor) == format!("~{s}") && e.efficiency_pct == f,
            "{env} 868: {} / {}%",
            report::display_speedup(e.actual_factor),
            e.efficiency_pct
        );
    }
    let pendulum = rep.entry("Pendulum", 84).unwrap();
    ensure!(
        pendulum.actual_factor / pendulum.ideal_factor > 1.0 && pendulum.efficiency_pct == 100,
        "Pendulum 84 not capped: {pendulum:?}"
    );
    ensure!(text.contains("Acrobot") && text.contains("18x"), "text table lacks the Acrobot row");
    ensure!(took.as_secs_f64() < 1.0, "took {took:?}");
    Ok(format!(
        "{within}/140 cells within ±1 ({exact} exact), anchors hold, {:.1} ms",
        took.as_secs_f64() * 1e3
    ))
}

fn table() -> impl Strategy<Value = Vec<(u32, f64)>> {
    // distinct cpu counts, the first one is the base
    prop::collection::btree_map(1u32..=2048, 1e-3f64..1e7, 1..8)
        .prop_map(|m: BTreeMap<u32, f64>| m.into_iter().collect())
}

fn summaries(rows: &[(u32, f64)], scale: f64) -> Measurements {
    Measurements::Summaries(
        rows.iter()
            .map(|&(c, m)| Summary {
                env: "E".into(),
                total_cpus: c,
                mean: m * scale,
                stddev: 0.0,
            })
            .collect(),
    )
}

pub fn efficiency_properties() -> Result<String, String> {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let cases = std::cell::Cell::new(0);
    let result = runner.run(&(table(), 1e-3f64..1e3), |(rows, k)| {
        cases.set(cases.get() + 1);
        let base = rows[0].0;
        let rep = build_report(&summaries(&rows, 1.0), base).unwrap();
        let scaled = build_report(&summaries(&rows, k), base).unwrap();
        for (e, s) in rep.entries.iter().zip(&scaled.entries) {
            prop_assert!(e.efficiency_pct <= 100);
            let raw = 100.0 * e.actual_factor / e.ideal_factor;
            if raw >= 100.0 {
                prop_assert_eq!(e.efficiency_pct, 100);
            }
            if e.total_cpus == base {
                prop_assert_eq!(e.actual_factor, 1.0);
                prop_assert_eq!(e.ideal_factor, 1.0);
                prop_assert_eq!(e.efficiency_pct, 100);
                prop_assert_eq!(report::display_speedup(e.actual_factor), "~1");
            }
            prop_assert!((e.actual_factor - s.actual_factor).abs() <= 1e-9 * e.actual_factor.max(1.0));
            prop_assert_eq!(e.efficiency_pct, s.efficiency_pct);
        }
        Ok(())
    });
    match result {
        Ok(()) => Ok(format!("{} random cases, 0 violations of cap, base identity, scale invariance", cases.get())),
        Err(e) => Err(e.to_string()),
    }
}
