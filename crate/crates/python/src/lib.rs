//! Python bindings: build configs, run the simulated transport or the
//! serial oracle, and poke at the geometry and wire format.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use gridflow::app::serial_oracle;
use gridflow::config::RunConfig;
use gridflow::data::state_hash;
use gridflow::driver::{run_simulated, RunReport};
use gridflow::graph::JobId;
use gridflow::metrics::{summarize, to_ndjson};
use gridflow::region::{enumerate_domain_regions, DomainSpec};
use gridflow::transport::{decode, encode, ExecuteJob, Message};

/// A parsed run configuration.
#[pyclass(name = "RunConfig", module = "gridflow_py", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        text.parse().map(|inner| PyRunConfig { inner }).map_err(|e: gridflow::config::ConfigError| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        RunConfig::from_file(path.as_ref()).map(|inner| PyRunConfig { inner }).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn workers(&self) -> u32 {
        self.inner.workers
    }

    #[setter]
    fn set_workers(&mut self, n: u32) -> PyResult<()> {
        if n == 0 {
            return Err(PyValueError::new_err("workers must be at least 1"));
        }
        self.inner.workers = n;
        Ok(())
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: u64) {
        self.inner.iterations = n;
    }

    #[getter]
    fn seed(&self) -> Option<u64> {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(app={:?}, workers={}, iterations={}, partitions={:?})",
            self.inner.app, self.inner.workers, self.inner.iterations, self.inner.partitions
        )
    }
}

/// Outcome of a simulated run.
#[pyclass(name = "Report", module = "gridflow_py")]
struct PyReport {
    report: RunReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn final_hash(&self) -> String {
        self.report.summary.final_hash.clone()
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.report.summary.iterations
    }

    #[getter]
    fn compute_jobs(&self) -> u64 {
        self.report.summary.compute_jobs
    }

    #[getter]
    fn copies(&self) -> u64 {
        self.report.summary.copies
    }

    #[getter]
    fn migrations(&self) -> u64 {
        self.report.summary.migrations
    }

    #[getter]
    fn rewinds(&self) -> u64 {
        self.report.summary.rewinds
    }

    /// Simulated seconds until the final state was collected.
    #[getter]
    fn elapsed_s(&self) -> f64 {
        self.report.summary.time_ns as f64 * 1e-9
    }

    /// Object id to payload.
    fn final_state(&self) -> BTreeMap<u64, Vec<f64>> {
        self.report.final_state.iter().map(|(k, v)| (k.0, v.clone())).collect()
    }

    /// The metrics log as newline-delimited JSON.
    fn metrics(&self) -> String {
        to_ndjson(&self.report.records)
    }

    /// The metrics log as CSV (time_s, iteration, event).
    fn summary_csv(&self) -> PyResult<String> {
        summarize(&self.report.records).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pyfunction]
fn run(config: &PyRunConfig) -> PyResult<PyReport> {
    run_simulated(&config.inner).map(|report| PyReport { report }).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Final-state hash from the serial oracle of `config`'s app.
#[pyfunction]
fn oracle_hash(config: &PyRunConfig) -> PyResult<String> {
    let app = config.inner.build_app().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = serial_oracle(app.as_ref()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(state_hash(&r.state))
}

/// Number of distinct regions of a decomposed domain.
#[pyfunction]
#[pyo3(signature = (extent, partitions, ghost_width=1))]
fn region_count(extent: Vec<i64>, partitions: Vec<u32>, ghost_width: i64) -> PyResult<usize> {
    let err = |e: gridflow::region::GeometryError| PyValueError::new_err(e.to_string());
    let d = DomainSpec::new(&extent, &partitions).map_err(err)?.with_default_ghost_width(ghost_width).map_err(err)?;
    enumerate_domain_regions(&d, ghost_width).map(|r| r.len()).map_err(err)
}

/// Wire frame of an ExecuteJob whose before set is `before`.
#[pyfunction]
fn execute_job_frame<'py>(py: Python<'py>, job: u64, function: &str, before: Vec<u64>) -> Bound<'py, PyBytes> {
    let msg = Message::ExecuteJob(ExecuteJob {
        epoch: 0,
        job: JobId(job),
        function: function.to_string(),
        params: Vec::new(),
        before: before.into_iter().map(JobId).collect(),
        reads: Vec::new(),
        writes: Vec::new(),
        id_block: None,
    });
    PyBytes::new(py, &encode(&msg))
}

/// Decodes a frame and renders it the way the protocol reference does.
#[pyfunction]
fn describe_frame(frame: &[u8]) -> PyResult<String> {
    decode(frame).map(|m| m.to_string()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn gridflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_hash, m)?)?;
    m.add_function(wrap_pyfunction!(region_count, m)?)?;
    m.add_function(wrap_pyfunction!(execute_job_frame, m)?)?;
    m.add_function(wrap_pyfunction!(describe_frame, m)?)?;
    Ok(())
}
