//! Synthetic fixtures with embedded ground truth, and deterministic replays
//! of the dedup, isolation, progressive-delivery, conflict-ranking, density
//! and routing experiments.
//!
//! Every experiment builds an isolated in-memory engine on a manual clock,
//! verifies its fixture manifest, then measures. Same spec, same bytes.

pub mod fixture;

mod density;
mod dedup;
mod delivery;
mod isolation;
mod recency;
mod routing;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::EngineError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    E2,
    E4,
    E6,
    E11,
    E14,
    Routing,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::E2,
        ExperimentId::E4,
        ExperimentId::E6,
        ExperimentId::E11,
        ExperimentId::E14,
        ExperimentId::Routing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::E2 => "e2",
            ExperimentId::E4 => "e4",
            ExperimentId::E6 => "e6",
            ExperimentId::E11 => "e11",
            ExperimentId::E14 => "e14",
            ExperimentId::Routing => "routing",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ExperimentId::E2 => "memory density vs. usage",
            ExperimentId::E4 => "progressive context delivery",
            ExperimentId::E6 => "multi-source write dedup",
            ExperimentId::E11 => "entity isolation",
            ExperimentId::E14 => "conflicting facts under recency decay",
            ExperimentId::Routing => "governance routing and authoring quality",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EvalError::UnknownExperiment(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fixture size knobs, e.g. `entities` or `queries`; unknown keys are ignored.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub size_overrides: BTreeMap<String, usize>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl ExperimentSpec {
    pub fn new(id: ExperimentId) -> Self {
        Self {
            id,
            seed: DEFAULT_SEED,
            size_overrides: BTreeMap::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_size(mut self, key: &str, n: usize) -> Self {
        self.size_overrides.insert(key.to_string(), n);
        self
    }

    pub(crate) fn size(&self, key: &str, default: usize) -> usize {
        self.size_overrides.get(key).copied().unwrap_or(default)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("fixture manifest failed: {0}")]
    Manifest(String),
    #[error("engine unavailable: {0}")]
    Engine(#[from] EngineError),
}

/// Acceptance band for one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    AtLeast(f64),
    Above(f64),
    AtMost(f64),
    Exactly(f64),
    Within { target: f64, tolerance: f64 },
}

impl Band {
    pub fn admits(self, v: f64) -> bool {
        match self {
            Band::AtLeast(x) => v >= x,
            Band::Above(x) => v > x,
            Band::AtMost(x) => v <= x,
            Band::Exactly(x) => v == x,
            Band::Within { target, tolerance } => (v - target).abs() <= tolerance,
        }
    }
}

/// Short form for band thresholds: at most four decimals, scientific when tiny.
fn num(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-3 {
        format!("{x:e}")
    } else {
        let s = format!("{x:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Band::AtLeast(x) => write!(f, ">= {}", num(*x)),
            Band::Above(x) => write!(f, "> {}", num(*x)),
            Band::AtMost(x) => write!(f, "<= {}", num(*x)),
            Band::Exactly(x) => write!(f, "== {}", num(*x)),
            Band::Within { target, tolerance } => write!(f, "{} +/- {}", num(*target), num(*tolerance)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub formula: String,
    /// Absent for informational metrics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
    /// Published figure this metric is compared against, quoted as context.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl Metric {
    pub fn info(name: &str, value: f64, formula: &str) -> Self {
        Self {
            name: name.into(),
            value,
            formula: formula.into(),
            band: None,
            pass: None,
            reference: None,
        }
    }

    pub fn banded(name: &str, value: f64, formula: &str, band: Band) -> Self {
        Self {
            band: Some(band.to_string()),
            pass: Some(band.admits(value)),
            ..Self::info(name, value, formula)
        }
    }

    pub fn reference(mut self, r: &str) -> Self {
        self.reference = Some(r.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestCheck {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

/// Ground-truth assertions a fixture makes about itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub checks: Vec<ManifestCheck>,
}

impl Manifest {
    pub fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push(ManifestCheck {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }

    pub fn verify(&self) -> Result<(), EvalError> {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.ok)
            .map(|c| format!("{} ({})", c.name, c.detail))
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Manifest(failed.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub experiment: ExperimentId,
    pub title: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub size_overrides: BTreeMap<String, usize>,
    pub manifest: Vec<ManifestCheck>,
    pub metrics: Vec<Metric>,
    pub details: Value,
    pub pass: bool,
}

impl MetricsReport {
    fn new(spec: &ExperimentSpec, manifest: Manifest, metrics: Vec<Metric>, details: Value) -> Self {
        let pass = metrics.iter().all(|m| m.pass != Some(false));
        Self {
            experiment: spec.id,
            title: spec.id.title().to_string(),
            seed: spec.seed,
            size_overrides: spec.size_overrides.clone(),
            manifest: manifest.checks,
            metrics,
            details,
            pass,
        }
    }

    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut out = format!("{} ({}) seed={}\n", self.experiment, self.title, self.seed);
        let w = self.metrics.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "  {:<w$}  {:>12}  {:<16}  {:<6}  formula", "metric", "value", "band", "result");
        for m in &self.metrics {
            let result = match m.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "-",
            };
            let _ = writeln!(
                out,
                "  {:<w$}  {:>12.6}  {:<16}  {:<6}  {}",
                m.name,
                m.value,
                m.band.as_deref().unwrap_or("-"),
                result,
                m.formula
            );
        }
        let _ = writeln!(out, "  overall: {}", if self.pass { "PASS" } else { "FAIL" });
        out
    }
}

/// The generated fixture for an experiment, with its manifest.
pub fn generate_dataset(spec: &ExperimentSpec) -> Result<Value, EvalError> {
    Ok(match spec.id {
        ExperimentId::E2 => density::dataset(spec),
        ExperimentId::E4 => delivery::dataset(spec),
        ExperimentId::E6 => dedup::dataset(spec),
        ExperimentId::E11 => isolation::dataset(spec),
        ExperimentId::E14 => recency::dataset(spec),
        ExperimentId::Routing => routing::dataset(spec),
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsReport, EvalError> {
    match spec.id {
        ExperimentId::E2 => density::run(spec),
        ExperimentId::E4 => delivery::run(spec),
        ExperimentId::E6 => dedup::run(spec),
        ExperimentId::E11 => isolation::run(spec),
        ExperimentId::E14 => recency::run(spec),
        ExperimentId::Routing => routing::run(spec),
    }
}

/// Every experiment in order, with the same seed.
pub fn run_all(seed: u64) -> Result<Vec<MetricsReport>, EvalError> {
    ExperimentId::ALL
        .into_iter()
        .map(|id| run_experiment(&ExperimentSpec::new(id).with_seed(seed)))
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
