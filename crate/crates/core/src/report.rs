//! Speedup and efficiency tables from throughput measurements.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{self, BenchRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("base throughput must be positive")]
    ZeroBase,
    #[error("environment {0:?} has no measurement at the base cpu count")]
    MissingBase(String),
    #[error("inconsistent measurements: {0}")]
    InconsistentUnits(String),
    #[error("no measurements")]
    EmptyInput,
    #[error("cannot parse measurements: {0}")]
    Parse(String),
}

/// Half-up rounding. The tiny offset absorbs binary representation error
/// so that e.g. 100 * 0.285 rounds to 29 like its decimal value does.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5 + 1e-9).floor() as i64
}

pub fn speedup(mean: f64, base_mean: f64) -> Result<f64, ReportError> {
    if !(base_mean > 0.0) {
        return Err(ReportError::ZeroBase);
    }
    Ok(mean / base_mean)
}

/// Percent of ideal, half-up rounded and capped at 100.
pub fn efficiency(actual_factor: f64, ideal_factor: f64) -> u32 {
    assert!(ideal_factor > 0.0, "ideal factor must be positive");
    round_half_up(100.0 * actual_factor / ideal_factor).clamp(0, 100) as u32
}

pub fn display_speedup(actual_factor: f64) -> String {
    format!("~{}", round_half_up(actual_factor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEntry {
    pub env_name: String,
    pub total_cpus: u32,
    pub mean_throughput: f64,
    pub stddev_throughput: f64,
    pub ideal_factor: f64,
    pub actual_factor: f64,
    pub efficiency_pct: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub base_cpus: u32,
    /// Grouped by env in first-seen order, ascending cpus within a group.
    pub entries: Vec<ScalingEntry>,
    /// Source name to SHA-256 of its bytes.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Mean/stddev for one (env, cpus) configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub env: String,
    pub total_cpus: u32,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Measurements {
    Records(Vec<BenchRecord>),
    Summaries(Vec<Summary>),
}

impl Measurements {
    /// Reads the bench CSV, a `env,total_cpus,mean,stddev` CSV, a JSON array
    /// of bench records, or a JSON report emitted by [`emit_table`].
    pub fn parse(bytes: &[u8]) -> Result<Self, ReportError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ReportError::Parse(e.to_string()))?;
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            let recs: Vec<BenchRecord> =
                serde_json::from_str(trimmed).map_err(|e| ReportError::Parse(e.to_string()))?;
            return Ok(Measurements::Records(recs));
        }
        if trimmed.starts_with('{') {
            let report: ScalingReport =
                serde_json::from_str(trimmed).map_err(|e| ReportError::Parse(e.to_string()))?;
            return Ok(Measurements::Summaries(
                report
                    .entries
                    .into_iter()
                    .map(|e| Summary {
                        env: e.env_name,
                        total_cpus: e.total_cpus,
                        mean: e.mean_throughput,
                        stddev: e.stddev_throughput,
                    })
                    .collect(),
            ));
        }
        let header = trimmed.lines().next().unwrap_or("").trim();
        if header == bench::CSV_HEADER {
            return bench::read_csv(trimmed.as_bytes())
                .map(Measurements::Records)
                .map_err(|e| ReportError::Parse(e.to_string()));
        }
        if header == "env,total_cpus,mean,stddev" {
            let mut r = csv::Reader::from_reader(trimmed.as_bytes());
            let rows: Result<Vec<Summary>, _> = r.deserialize().collect();
            return rows
                .map(Measurements::Summaries)
                .map_err(|e| ReportError::Parse(e.to_string()));
        }
        Err(ReportError::Parse(format!("unrecognised header {header:?}")))
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Measurements::Records(r) => r.is_empty(),
            Measurements::Summaries(s) => s.is_empty(),
        }
    }

    /// Smallest cpu count present, the default baseline.
    pub fn smallest_cpus(&self) -> Option<u32> {
        match self {
            Measurements::Records(r) => r.iter().map(|r| r.total_cpu_workers).min(),
            Measurements::Summaries(s) => s.iter().map(|s| s.total_cpus).min(),
        }
    }

    fn summaries(&self) -> Result<Vec<Summary>, ReportError> {
        match self {
            Measurements::Summaries(s) => Ok(s.clone()),
            Measurements::Records(recs) => {
                for r in recs {
                    let expect = r.samples_collected as f64 / r.wall_seconds;
                    let ok = r.wall_seconds > 0.0
                        && r.throughput.is_finite()
                        && (r.throughput - expect).abs() <= 1e-6 * expect.abs().max(1.0);
                    if !ok {
                        return Err(ReportError::InconsistentUnits(format!(
                            "{} cpus={} rep={}: throughput {} is not samples/wall_s",
                            r.env_name, r.total_cpu_workers, r.repetition_index, r.throughput
                        )));
                    }
                }
                Ok(bench::group(recs)
                    .into_iter()
                    .map(|((env, cpus), g)| {
                        let (mean, stddev) = bench::aggregate(&g).expect("groups are non-empty");
                        Summary {
                            env,
                            total_cpus: cpus,
                            mean,
                            stddev,
                        }
                    })
                    .collect())
            }
        }
    }
}

pub fn build_report(input: &Measurements, base_cpus: u32) -> Result<ScalingReport, ReportError> {
    if base_cpus == 0 {
        return Err(ReportError::InconsistentUnits("base_cpus must be positive".into()));
    }
    if input.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let summaries = input.summaries()?;
    let mut env_order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, BTreeMap<u32, Summary>> = BTreeMap::new();
    for s in summaries {
        if !(s.mean.is_finite() && s.mean >= 0.0 && s.stddev.is_finite() && s.stddev >= 0.0) {
            return Err(ReportError::InconsistentUnits(format!(
                "{} cpus={}: mean {} stddev {}",
                s.env, s.total_cpus, s.mean, s.stddev
            )));
        }
        if s.total_cpus == 0 {
            return Err(ReportError::InconsistentUnits(format!("{}: zero cpus", s.env)));
        }
        if !groups.contains_key(&s.env) {
            env_order.push(s.env.clone());
        }
        let g = groups.entry(s.env.clone()).or_default();
        if g.contains_key(&s.total_cpus) {
            return Err(ReportError::InconsistentUnits(format!(
                "{} cpus={} listed twice",
                s.env, s.total_cpus
            )));
        }
        g.insert(s.total_cpus, s);
    }

    let mut entries = Vec::new();
    for env in env_order {
        let g = &groups[&env];
        let base = g.get(&base_cpus).ok_or_else(|| ReportError::MissingBase(env.clone()))?;
        for s in g.values() {
            let ideal = s.total_cpus as f64 / base_cpus as f64;
            let actual = speedup(s.mean, base.mean)?;
            entries.push(ScalingEntry {
                env_name: env.clone(),
                total_cpus: s.total_cpus,
                mean_throughput: s.mean,
                stddev_throughput: s.stddev,
                ideal_factor: ideal,
                actual_factor: actual,
                efficiency_pct: efficiency(actual, ideal),
            });
        }
    }
    Ok(ScalingReport {
        base_cpus,
        entries,
        provenance: BTreeMap::new(),
    })
}

/// Parses `bytes` and builds a report whose provenance names `source`.
pub fn build_report_from_source(
    source: &str,
    bytes: &[u8],
    base_cpus: u32,
) -> Result<ScalingReport, ReportError> {
    let mut report = build_report(&Measurements::parse(bytes)?, base_cpus)?;
    report
        .provenance
        .insert(source.to_string(), crate::fabric::sha256_hex(bytes));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

impl ScalingReport {
    pub fn envs(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .map(|e| e.env_name.as_str())
            .filter(|e| seen.insert(*e))
            .collect()
    }

    pub fn entry(&self, env: &str, cpus: u32) -> Option<&ScalingEntry> {
        self.entries
            .iter()
            .find(|e| e.env_name == env && e.total_cpus == cpus)
    }

    fn cpu_columns(&self) -> Vec<u32> {
        self.entries
            .iter()
            .map(|e| e.total_cpus)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn text_grid(report: &ScalingReport, title: &str, cell: impl Fn(&ScalingEntry) -> String) -> String {
    let cols = report.cpu_columns();
    let envs = report.envs();
    let width = envs.iter().map(|e| e.len()).max().unwrap_or(0).max(3) + 2;
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<width$}", "env");
    for c in &cols {
        let _ = write!(out, "{c:>6}");
    }
    out.push('\n');
    for env in envs {
        let _ = write!(out, "{env:<width$}");
        for c in &cols {
            let v = report.entry(env, *c).map(&cell).unwrap_or_else(|| "-".into());
            let _ = write!(out, "{v:>6}");
        }
        out.push('\n');
    }
    out
}

pub fn emit_table(report: &ScalingReport, format: TableFormat) -> Vec<u8> {
    match format {
        TableFormat::Text => {
            let speed = text_grid(
                report,
                &format!("Throughput speedup relative to {} cpus", report.base_cpus),
                |e| format!("{}x", round_half_up(e.actual_factor)),
            );
            let eff = text_grid(report, "Efficiency (% of ideal)", |e| {
                e.efficiency_pct.to_string()
            });
            format!("{speed}\n{eff}").into_bytes()
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "env",
                "total_cpus",
                "mean",
                "stddev",
                "ideal_factor",
                "actual_factor",
                "efficiency_pct",
            ])
            .expect("in-memory write");
            for e in &report.entries {
                w.write_record([
                    e.env_name.clone(),
                    e.total_cpus.to_string(),
                    e.mean_throughput.to_string(),
                    e.stddev_throughput.to_string(),
                    e.ideal_factor.to_string(),
                    e.actual_factor.to_string(),
                    e.efficiency_pct.to_string(),
                ])
                .expect("in-memory write");
            }
            w.into_inner().expect("in-memory flush")
        }
        TableFormat::Json => serde_json::to_vec_pretty(report).expect("report serializes"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub env: String,
    pub cpus: u32,
    pub ideal: f64,
    pub mean: f64,
    pub lo_2sigma: f64,
    pub hi_2sigma: f64,
}

/// Ideal line extrapolated from the base mean, plus measured mean and a
/// two-sigma band, per env.
pub fn scaling_series(report: &ScalingReport) -> Vec<SeriesPoint> {
    report
        .entries
        .iter()
        .map(|e| {
            let base_mean = report
                .entry(&e.env_name, report.base_cpus)
                .map_or(0.0, |b| b.mean_throughput);
            SeriesPoint {
                env: e.env_name.clone(),
                cpus: e.total_cpus,
                ideal: base_mean * e.total_cpus as f64 / report.base_cpus as f64,
                mean: e.mean_throughput,
                lo_2sigma: e.mean_throughput - 2.0 * e.stddev_throughput,
                hi_2sigma: e.mean_throughput + 2.0 * e.stddev_throughput,
            }
        })
        .collect()
}

pub fn emit_scaling_series(report: &ScalingReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let points = scaling_series(report);
    if points.is_empty() {
        w.write_record(["env", "cpus", "ideal", "mean", "lo_2sigma", "hi_2sigma"])
            .expect("in-memory write");
    }
    for p in points {
        w.serialize(p).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
