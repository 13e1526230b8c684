//! One line per acceptance criterion. Exits non-zero if any criterion fails.

mod formation;
mod hygiene;
mod report;
mod scheduling;
mod support;
mod throughput;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

type Check = fn() -> Result<String, String>;

const CRITERIA: &[(&str, &str, Check)] = &[
    ("C1", "golden table reproduction", report::golden_tables),
    ("C2", "efficiency formula properties", report::efficiency_properties),
    ("C3", "cluster formation and election", formation::formation),
    ("C4", "scheduler correctness", scheduling::scheduler_correctness),
    ("C5", "sample accounting", throughput::sample_accounting),
    ("C6", "scaling trend", throughput::scaling_trend),
    ("C7", "lifecycle hygiene", hygiene::lifecycle_hygiene),
];

fn main() {
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let _ = env_logger::builder().is_test(true).try_init();
    panic::set_hook(Box::new(|_| {}));

    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Turns a failed condition into an `Err` carrying the formatted message.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
