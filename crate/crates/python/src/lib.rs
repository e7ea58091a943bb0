//! Python bindings. Requests and results cross the boundary as plain
//! dicts and lists with the same camelCase keys the HTTP API uses.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use gmem_core::engine::{Engine as CoreEngine, EngineError};
use gmem_core::eval::{self, ExperimentSpec};
use gmem_core::extraction::MemorizeRequest;
use gmem_core::governance::{GovernanceVariable, RouteMode};
use gmem_core::model::{self, CrmKeys, EngineConfig};
use gmem_core::providers::ScriptedCompleter;
use gmem_core::redaction::{self, RedactionConfig, Redactor};
use gmem_core::retrieval::RetrievalRequest;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(gmem, GmemError, PyException, "Engine failure; args are (kind, message).");

fn engine_err(e: EngineError) -> PyErr {
    let kind = e.to_json()["error"]["kind"].as_str().unwrap_or("internal").to_string();
    GmemError::new_err((kind, e.message))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_mode(mode: &str) -> PyResult<RouteMode> {
    serde_json::from_value(serde_json::Value::String(mode.to_string()))
        .map_err(|_| value_err(format!("unknown routing mode {mode:?}")))
}

/// In-process engine. `script` is a list of scripted completion entries
/// (`{kind, contains?, response | fail}`); without it, operations that
/// need a completion provider raise `GmemError`.
#[pyclass(frozen)]
struct Engine {
    inner: Arc<CoreEngine>,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (config=None, data_dir=None, script=None))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, data_dir: Option<PathBuf>, script: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: EngineConfig = config.map(|c| from_py(py, c)).transpose()?.unwrap_or_default();
        let mut b = CoreEngine::builder().config(config);
        if let Some(s) = script {
            let text: String = py.import("json")?.call_method1("dumps", (s,))?.extract()?;
            b = b.completer(Arc::new(ScriptedCompleter::from_json(&text).map_err(value_err)?));
        }
        if let Some(d) = data_dir {
            b = b.data_dir(d);
        }
        Ok(Self {
            inner: Arc::new(b.build().map_err(engine_err)?),
        })
    }

    fn memorize(&self, py: Python<'_>, request: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let req: MemorizeRequest = from_py(py, request)?;
        let e = self.inner.clone();
        let out = py.detach(move || e.memorize(&req)).map_err(engine_err)?;
        to_py(py, &out)
    }

    fn retrieve(&self, py: Python<'_>, request: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let req: RetrievalRequest = from_py(py, request)?;
        let e = self.inner.clone();
        let out = py.detach(move || e.retrieve(&req)).map_err(engine_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (org_id, crm_keys, token_budget=1000, schema_id=None))]
    fn entity_context(
        &self,
        py: Python<'_>,
        org_id: &str,
        crm_keys: &Bound<'_, PyAny>,
        token_budget: usize,
        schema_id: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let keys: CrmKeys = from_py(py, crm_keys)?;
        let out = self.inner.entity_context(org_id, &keys, token_budget, schema_id).map_err(engine_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (variable, expected_version=None))]
    fn put_variable(&self, py: Python<'_>, variable: &Bound<'_, PyAny>, expected_version: Option<u32>) -> PyResult<Py<PyAny>> {
        let v: GovernanceVariable = from_py(py, variable)?;
        let e = self.inner.clone();
        let out = py.detach(move || e.put_variable(v, expected_version)).map_err(engine_err)?;
        to_py(py, &out)
    }

    fn variables(&self, py: Python<'_>, org_id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.variables(org_id).map_err(engine_err)?)
    }

    #[pyo3(signature = (org_id, task, mode="auto", session_id=None, new_session=false))]
    fn govern(
        &self,
        py: Python<'_>,
        org_id: &str,
        task: &str,
        mode: &str,
        session_id: Option<&str>,
        new_session: bool,
    ) -> PyResult<Py<PyAny>> {
        let mode = parse_mode(mode)?;
        let out = self
            .inner
            .govern(org_id, task, mode, session_id, new_session)
            .map_err(engine_err)?;
        to_py(py, &out)
    }

    fn end_session(&self, org_id: &str, session_id: &str) -> PyResult<()> {
        self.inner.end_session(org_id, session_id).map_err(engine_err)
    }

    #[pyo3(signature = (org_id, dry_run=false))]
    fn consolidate(&self, py: Python<'_>, org_id: &str, dry_run: bool) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.consolidate(org_id, dry_run).map_err(engine_err)?)
    }

    fn health(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.health())
    }
}

/// SHA-256 hex of the first 1000 characters.
#[pyfunction]
fn content_hash(text: &str) -> String {
    model::content_hash(text)
}

#[pyfunction]
#[pyo3(signature = (text, chars_per_token=4))]
fn estimate_tokens(text: &str, chars_per_token: usize) -> usize {
    model::estimate_tokens(text, chars_per_token)
}

/// Raises ValueError outside 12-19 digits.
#[pyfunction]
fn luhn_valid(digits: &str) -> PyResult<bool> {
    redaction::luhn_valid(digits).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (text, config=None))]
fn redact(py: Python<'_>, text: &str, config: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let cfg: RedactionConfig = config.map(|c| from_py(py, c)).transpose()?.unwrap_or_default();
    to_py(py, &Redactor::builtin().redact(text, &cfg))
}

fn experiment_spec(id: &str, seed: u64, sizes: BTreeMap<String, usize>) -> PyResult<ExperimentSpec> {
    let id = id.parse().map_err(value_err)?;
    Ok(sizes
        .into_iter()
        .fold(ExperimentSpec::new(id).with_seed(seed), |s, (k, n)| s.with_size(&k, n)))
}

/// Runs one experiment and returns its metrics report.
#[pyfunction]
#[pyo3(signature = (id, seed=eval::DEFAULT_SEED, sizes=None))]
fn run_experiment(py: Python<'_>, id: &str, seed: u64, sizes: Option<BTreeMap<String, usize>>) -> PyResult<Py<PyAny>> {
    let spec = experiment_spec(id, seed, sizes.unwrap_or_default())?;
    let report = py.detach(move || eval::run_experiment(&spec)).map_err(value_err)?;
    to_py(py, &report)
}

#[pymodule]
fn gmem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GmemError", m.py().get_type::<GmemError>())?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(content_hash, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(luhn_valid, m)?)?;
    m.add_function(wrap_pyfunction!(redact, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_modes() {
        assert_eq!(parse_mode("fast").unwrap(), RouteMode::Fast);
        assert_eq!(parse_mode("auto").unwrap(), RouteMode::Auto);
    }

    #[test]
    fn spec_sizes() {
        let s = experiment_spec("e6", 7, BTreeMap::from([("entities".to_string(), 3)])).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.size_overrides["entities"], 3);
    }
}
