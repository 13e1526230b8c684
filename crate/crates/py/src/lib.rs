//! Python bindings: report math, synthetic rollouts and cluster lifecycle.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use nestor::bench::{self, SyntheticEnv};
use nestor::orchestrator::{self, ClusterConfig, ClusterHandle, OrchestratorError, Workload};
use nestor::report::{self, Measurements, ScalingReport, TableFormat};
use nestor::scheduler::JobSpec;

create_exception!(pynestor, NestorError, PyException);

fn cluster_err(e: OrchestratorError) -> PyErr {
    NestorError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Accepts a JSON string or anything `json.dumps` can serialize.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    obj.py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()
}

#[pyfunction]
fn round_half_up(x: f64) -> i64 {
    report::round_half_up(x)
}

#[pyfunction]
fn speedup(mean: f64, base_mean: f64) -> PyResult<f64> {
    report::speedup(mean, base_mean).map_err(value_err)
}

#[pyfunction]
fn efficiency(actual_factor: f64, ideal_factor: f64) -> PyResult<u32> {
    if !(ideal_factor > 0.0) {
        return Err(PyValueError::new_err("ideal_factor must be positive"));
    }
    Ok(report::efficiency(actual_factor, ideal_factor))
}

#[pyfunction]
fn display_speedup(actual_factor: f64) -> String {
    report::display_speedup(actual_factor)
}

/// Mean and sample standard deviation.
#[pyfunction]
fn mean_stddev(values: Vec<f64>) -> PyResult<(f64, f64)> {
    bench::mean_stddev(&values).ok_or_else(|| PyValueError::new_err("no values"))
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    bench::preset_names()
}

/// Runs one synthetic actor for `steps` steps. Returns (samples, seconds, checksum).
#[pyfunction]
#[pyo3(signature = (preset, steps, seed = 0))]
fn rollout(py: Python<'_>, preset: &str, steps: u64, seed: u64) -> PyResult<(u64, f64, String)> {
    let env = SyntheticEnv::preset(preset, seed).map_err(value_err)?;
    let r = py.allow_threads(|| bench::actor_rollout(&env, steps));
    Ok((r.samples, r.elapsed_s, r.checksum))
}

#[pyclass(name = "Report", frozen)]
struct PyReport {
    inner: ScalingReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn base_cpus(&self) -> u32 {
        self.inner.base_cpus
    }

    /// (env, cpus, mean, stddev, ideal_factor, actual_factor, efficiency_pct) rows.
    fn entries(&self) -> Vec<(String, u32, f64, f64, f64, f64, u32)> {
        self.inner
            .entries
            .iter()
            .map(|e| {
                (
                    e.env_name.clone(),
                    e.total_cpus,
                    e.mean_throughput,
                    e.stddev_throughput,
                    e.ideal_factor,
                    e.actual_factor,
                    e.efficiency_pct,
                )
            })
            .collect()
    }

    fn envs(&self) -> Vec<String> {
        self.inner.envs().into_iter().map(str::to_string).collect()
    }

    #[pyo3(signature = (format = "text"))]
    fn table(&self, format: &str) -> PyResult<String> {
        let f: TableFormat = format.parse().map_err(value_err)?;
        Ok(String::from_utf8_lossy(&report::emit_table(&self.inner, f)).into_owned())
    }

    fn series_csv(&self) -> String {
        String::from_utf8_lossy(&report::emit_scaling_series(&self.inner)).into_owned()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

/// Builds a report from bench CSV, summary CSV or JSON text.
#[pyfunction]
#[pyo3(signature = (data, base_cpus = None))]
fn build_report(data: &str, base_cpus: Option<u32>) -> PyResult<PyReport> {
    let m = Measurements::parse(data.as_bytes()).map_err(value_err)?;
    let base = match base_cpus {
        Some(b) => b,
        None => m
            .smallest_cpus()
            .ok_or_else(|| PyValueError::new_err("no measurements"))?,
    };
    let inner = report::build_report(&m, base).map_err(value_err)?;
    Ok(PyReport { inner })
}

#[pyclass(name = "Cluster", frozen)]
struct PyCluster {
    handle: ClusterHandle,
}

#[pymethods]
impl PyCluster {
    /// Allocates `n_nodes` agents and blocks until the cluster is Ready.
    #[staticmethod]
    #[pyo3(signature = (cluster_id, n_nodes, cpus_per_node, store_root, sandbox_root = None, agent_program = None, walltime_s = 3600))]
    fn up(
        py: Python<'_>,
        cluster_id: &str,
        n_nodes: u32,
        cpus_per_node: u32,
        store_root: PathBuf,
        sandbox_root: Option<PathBuf>,
        agent_program: Option<PathBuf>,
        walltime_s: u64,
    ) -> PyResult<Self> {
        let mut cfg = ClusterConfig::new(cluster_id, n_nodes, cpus_per_node, store_root);
        cfg.sandbox_root = sandbox_root;
        cfg.agent_program = agent_program;
        cfg.walltime_s = walltime_s;
        let handle = py.allow_threads(|| orchestrator::up(cfg)).map_err(cluster_err)?;
        Ok(PyCluster { handle })
    }

    #[getter]
    fn cluster_id(&self) -> String {
        self.handle.cluster_id().to_string()
    }

    #[getter]
    fn phase(&self) -> String {
        format!("{:?}", self.handle.phase())
    }

    #[getter]
    fn head_address(&self) -> Option<String> {
        self.handle.head_record().map(|h| h.socket_addr())
    }

    #[getter]
    fn worker_slots(&self) -> PyResult<u32> {
        self.handle.worker_slots().map_err(cluster_err)
    }

    #[getter]
    fn workers(&self) -> usize {
        self.handle.registered_workers().len()
    }

    /// Submits `jobs` (a JSON array of job specs, or the equivalent list of
    /// dicts) and waits. Returns (statuses, artifacts) where statuses is a
    /// list of dicts and artifacts maps id to bytes.
    #[pyo3(signature = (jobs, fetch = None))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        jobs: &Bound<'py, PyAny>,
        fetch: Option<Vec<String>>,
    ) -> PyResult<(Bound<'py, PyList>, Bound<'py, PyDict>)> {
        let specs: Vec<JobSpec> = serde_json::from_str(&json_text(jobs)?).map_err(value_err)?;
        let mut workload = Workload::new(specs);
        if let Some(ids) = fetch {
            workload = workload.fetch_only(ids);
        }
        let res = py
            .allow_threads(|| orchestrator::run_script(&self.handle, &workload))
            .map_err(cluster_err)?;
        let json = py.import("json")?;
        let statuses = PyList::empty(py);
        for s in &res.statuses {
            let text = serde_json::to_string(s).map_err(value_err)?;
            statuses.append(json.call_method1("loads", (text,))?)?;
        }
        let artifacts = PyDict::new(py);
        for (id, bytes) in &res.artifacts {
            artifacts.set_item(id, PyBytes::new(py, bytes))?;
        }
        Ok((statuses, artifacts))
    }

    /// Stops the head, terminates every agent and removes the sandboxes.
    fn down(&self, py: Python<'_>) {
        py.allow_threads(|| self.handle.down());
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(
        &self,
        py: Python<'_>,
        _ty: Option<&Bound<'_, PyAny>>,
        _value: Option<&Bound<'_, PyAny>>,
        _tb: Option<&Bound<'_, PyAny>>,
    ) -> bool {
        self.down(py);
        false
    }

    fn __repr__(&self) -> String {
        format!("Cluster({:?}, phase={:?})", self.handle.cluster_id(), self.handle.phase())
    }
}

#[pymodule]
fn pynestor(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NestorError", m.py().get_type::<NestorError>())?;
    m.add_function(wrap_pyfunction!(round_half_up, m)?)?;
    m.add_function(wrap_pyfunction!(speedup, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(display_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(mean_stddev, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(build_report, m)?)?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyCluster>()?;
    Ok(())
}
