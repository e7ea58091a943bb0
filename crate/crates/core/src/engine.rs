//! One handle over every subsystem: store, providers, governance library,
//! schema registry, sessions and the evaluation log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clock::{Clock, SystemClock};
use crate::consolidation::{consolidate, ConsolidationError, ConsolidationReport};
use crate::extraction::{ExtractionError, MemorizeRequest, Pipeline, PipelineReport};
use crate::governance::{
    enrich_variable, route_governance, GovernanceError, GovernanceLibrary, GovernanceVariable, RouteMode, RoutedContext,
    SessionStore,
};
use crate::model::{CrmKeys, EngineConfig, ModelError};
use crate::providers::{CompletionProvider, EmbeddingProvider, HashEmbedder, ProviderError};
use crate::redaction::Redactor;
use crate::retrieval::{entity_context, retrieve, EntityContext, RetrievalError, RetrievalRequest, RetrievalResult};
use crate::schema::{
    aggregate_diagnostics, author_schema, enhance_property, evaluate_interaction, refine_schema, AuthoredSchema,
    DiagnosticThresholds, DiagnosticsReport, EvaluationInput, EvaluationLog, EvaluationRecord, RefinementReport, Rubric,
    Schema, SchemaError, SchemaProperty, SchemaRegistry,
};
use crate::store::{MemoryStore, StoreError};

const VARIABLES_FILE: &str = "variables.json";
const SCHEMAS_FILE: &str = "schemas.json";
const EVALUATIONS_FILE: &str = "evaluations.jsonl";
const STORE_DIR: &str = "store";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadRequest,
    Unauthorized,
    NotFound,
    Conflict,
    Unavailable,
    Internal,
}

impl ErrorKind {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::BadRequest => 400,
            ErrorKind::Unauthorized => 401,
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Unavailable => 503,
            ErrorKind::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct EngineError {
    pub kind: ErrorKind,
    pub message: String,
}

impl EngineError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn bad_request(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::BadRequest, m)
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, m)
    }

    fn no_completer() -> Self {
        Self::new(ErrorKind::Unavailable, "completion provider not configured")
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"kind": self.kind, "message": self.message}})
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        Self::bad_request(e.to_string())
    }
}

impl From<ProviderError> for EngineError {
    fn from(e: ProviderError) -> Self {
        Self::new(ErrorKind::Unavailable, e.to_string())
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        let kind = match &e {
            StoreError::UnknownEntry(_) => ErrorKind::NotFound,
            StoreError::Io(_) => ErrorKind::Internal,
            _ => ErrorKind::BadRequest,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ExtractionError> for EngineError {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Store(s) => s.into(),
            ExtractionError::Provider(p) => p.into(),
            ExtractionError::PipelineFailed(m) => Self::new(ErrorKind::Unavailable, format!("pipeline failed: {m}")),
            other => Self::bad_request(other.to_string()),
        }
    }
}

impl From<GovernanceError> for EngineError {
    fn from(e: GovernanceError) -> Self {
        let kind = match &e {
            GovernanceError::InvalidVariable => ErrorKind::BadRequest,
            GovernanceError::EmptyLibrary
            | GovernanceError::UnknownVariable(_)
            | GovernanceError::SessionExpired(_)
            | GovernanceError::SessionOrgMismatch(_) => ErrorKind::NotFound,
            GovernanceError::VersionConflict { .. } => ErrorKind::Conflict,
            GovernanceError::Provider(_) => ErrorKind::Unavailable,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<RetrievalError> for EngineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Store(s) => s.into(),
            RetrievalError::Provider(p) => p.into(),
            RetrievalError::Model(m) => m.into(),
            RetrievalError::EntityNotFound => Self::not_found("entity not found"),
            RetrievalError::CompleterRequired(what) => {
                Self::new(ErrorKind::Unavailable, format!("{what} requires a completion provider"))
            }
            other => Self::bad_request(other.to_string()),
        }
    }
}

impl From<SchemaError> for EngineError {
    fn from(e: SchemaError) -> Self {
        let kind = match &e {
            SchemaError::UnknownSchema(_) => ErrorKind::NotFound,
            SchemaError::VersionConflict { .. } => ErrorKind::Conflict,
            SchemaError::Provider(_) | SchemaError::Extraction(_) => ErrorKind::Unavailable,
            SchemaError::Log(_) => ErrorKind::Internal,
            _ => ErrorKind::BadRequest,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ConsolidationError> for EngineError {
    fn from(e: ConsolidationError) -> Self {
        match e {
            ConsolidationError::Config(m) => m.into(),
            ConsolidationError::Store(s) => s.into(),
        }
    }
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::Internal, format!("i/o: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GovernResponse {
    pub session_id: Option<String>,
    pub routed: RoutedContext,
    pub compiled: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SchemaRow {
    org_id: String,
    schema: Schema,
}

pub struct EngineBuilder {
    config: EngineConfig,
    clock: Arc<dyn Clock>,
    data_dir: Option<PathBuf>,
    embedder: Option<Arc<dyn EmbeddingProvider>>,
    completer: Option<Arc<dyn CompletionProvider>>,
    redactor: Option<Redactor>,
}

impl EngineBuilder {
    pub fn config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Persist everything under `dir`; in-memory when never called.
    pub fn data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.data_dir = Some(dir.into());
        self
    }

    pub fn embedder(mut self, e: Arc<dyn EmbeddingProvider>) -> Self {
        self.embedder = Some(e);
        self
    }

    pub fn completer(mut self, c: Arc<dyn CompletionProvider>) -> Self {
        self.completer = Some(c);
        self
    }

    pub fn maybe_completer(mut self, c: Option<Arc<dyn CompletionProvider>>) -> Self {
        self.completer = c;
        self
    }

    pub fn redactor(mut self, r: Redactor) -> Self {
        self.redactor = Some(r);
        self
    }

    pub fn build(self) -> EngineResult<Engine> {
        self.config.validate()?;
        let dim = self.config.embedding_dim;
        let embedder = self.embedder.unwrap_or_else(|| Arc::new(HashEmbedder::new(dim)));
        if embedder.dimension() != dim {
            return Err(EngineError::bad_request(format!(
                "embedder dimension {} does not match embeddingDim {dim}",
                embedder.dimension()
            )));
        }
        let (store, library, schemas, evaluations) = match &self.data_dir {
            None => (
                MemoryStore::with_clock(dim, self.clock.clone()),
                GovernanceLibrary::new(),
                SchemaRegistry::new(),
                EvaluationLog::in_memory(),
            ),
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let store = MemoryStore::open(dir.join(STORE_DIR), dim, self.clock.clone())?;
                let library = match read_json::<Vec<GovernanceVariable>>(&dir.join(VARIABLES_FILE))? {
                    Some(vars) => GovernanceLibrary::from_variables(vars),
                    None => GovernanceLibrary::new(),
                };
                let schemas = SchemaRegistry::new();
                for row in read_json::<Vec<SchemaRow>>(&dir.join(SCHEMAS_FILE))?.unwrap_or_default() {
                    schemas.put(&row.org_id, row.schema, None)?;
                }
                let evaluations = EvaluationLog::open(dir.join(EVALUATIONS_FILE))?;
                (store, library, schemas, evaluations)
            }
        };
        Ok(Engine {
            sessions: SessionStore::new(self.clock.clone(), self.config.session_ttl_hours),
            config: self.config,
            clock: self.clock,
            data_dir: self.data_dir,
            store,
            embedder,
            completer: self.completer,
            redactor: self.redactor.unwrap_or_else(Redactor::builtin),
            library,
            schemas,
            evaluations,
        })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> EngineResult<Option<T>> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| EngineError::new(ErrorKind::Internal, format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> EngineResult<()> {
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| EngineError::new(ErrorKind::Internal, e.to_string()))?;
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Engine {
    config: EngineConfig,
    clock: Arc<dyn Clock>,
    data_dir: Option<PathBuf>,
    store: MemoryStore,
    embedder: Arc<dyn EmbeddingProvider>,
    completer: Option<Arc<dyn CompletionProvider>>,
    redactor: Redactor,
    library: GovernanceLibrary,
    schemas: SchemaRegistry,
    evaluations: EvaluationLog,
    sessions: SessionStore,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("data_dir", &self.data_dir)
            .field("store", &self.store)
            .finish_non_exhaustive()
    }
}

fn require_org(org_id: &str) -> EngineResult<()> {
    if org_id.trim().is_empty() {
        return Err(EngineError::new(ErrorKind::Unauthorized, "orgId is required"));
    }
    Ok(())
}

impl Engine {
    pub fn builder() -> EngineBuilder {
        EngineBuilder {
            config: EngineConfig::default(),
            clock: Arc::new(SystemClock),
            data_dir: None,
            embedder: None,
            completer: None,
            redactor: None,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn embedder(&self) -> &dyn EmbeddingProvider {
        self.embedder.as_ref()
    }

    pub fn completer(&self) -> Option<&dyn CompletionProvider> {
        self.completer.as_deref()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    fn pipeline(&self) -> EngineResult<Pipeline<'_>> {
        Ok(Pipeline {
            store: &self.store,
            embedder: self.embedder.as_ref(),
            completer: self.completer.as_deref().ok_or_else(EngineError::no_completer)?,
            redactor: &self.redactor,
            config: &self.config,
        })
    }

    pub fn memorize(&self, req: &MemorizeRequest) -> EngineResult<PipelineReport> {
        require_org(&req.org_id)?;
        Ok(self.pipeline()?.memorize(req)?)
    }

    pub fn retrieve(&self, req: &RetrievalRequest) -> EngineResult<RetrievalResult> {
        require_org(&req.org_id)?;
        Ok(retrieve(req, &self.store, self.embedder.as_ref(), self.completer.as_deref(), &self.config)?)
    }

    /// Budgeted entity block; a schema id orders properties by declaration.
    pub fn entity_context(
        &self,
        org_id: &str,
        keys: &CrmKeys,
        token_budget: usize,
        schema_id: Option<&str>,
    ) -> EngineResult<EntityContext> {
        require_org(org_id)?;
        let order: Vec<String> = match schema_id {
            Some(id) => self.schema(org_id, id)?.properties.iter().map(|p| p.id.clone()).collect(),
            None => Vec::new(),
        };
        Ok(entity_context(&self.store, org_id, keys, token_budget, &order, &self.config)?)
    }

    pub fn consolidate(&self, org_id: &str, dry_run: bool) -> EngineResult<ConsolidationReport> {
        require_org(org_id)?;
        Ok(consolidate(&self.store, org_id, &self.config, dry_run)?)
    }

    // Governance variables.

    fn persist_variables(&self) -> EngineResult<()> {
        if let Some(dir) = &self.data_dir {
            write_json_atomic(&dir.join(VARIABLES_FILE), &self.library.all())?;
        }
        Ok(())
    }

    /// Enriches and stores a variable. `expected_version` guards replacement.
    pub fn put_variable(&self, v: GovernanceVariable, expected_version: Option<u32>) -> EngineResult<GovernanceVariable> {
        require_org(&v.org_id)?;
        let enriched = enrich_variable(v, self.completer.as_deref(), self.embedder.as_ref())?;
        let stored = self.library.put(enriched, expected_version)?;
        self.persist_variables()?;
        Ok(stored)
    }

    pub fn variable(&self, org_id: &str, id: &str) -> EngineResult<GovernanceVariable> {
        require_org(org_id)?;
        self.library
            .get(org_id, id)
            .ok_or_else(|| GovernanceError::UnknownVariable(id.to_string()).into())
    }

    pub fn variables(&self, org_id: &str) -> EngineResult<Vec<GovernanceVariable>> {
        require_org(org_id)?;
        Ok(self.library.list(org_id))
    }

    pub fn delete_variable(&self, org_id: &str, id: &str) -> EngineResult<GovernanceVariable> {
        require_org(org_id)?;
        let v = self
            .library
            .remove(org_id, id)
            .ok_or_else(|| EngineError::from(GovernanceError::UnknownVariable(id.to_string())))?;
        self.persist_variables()?;
        Ok(v)
    }

    /// Routes `task` over the org library. With a session id, or `new_session`,
    /// content already delivered in that session is withheld.
    pub fn govern(
        &self,
        org_id: &str,
        task: &str,
        mode: RouteMode,
        session_id: Option<&str>,
        new_session: bool,
    ) -> EngineResult<GovernResponse> {
        require_org(org_id)?;
        if task.trim().is_empty() {
            return Err(EngineError::bad_request("task is empty"));
        }
        let library = self.library.list(org_id);
        let completer = self.completer.as_deref();
        let (routed, sid) = if session_id.is_some() || new_session {
            let handle = self.sessions.open(org_id, session_id)?;
            let mut state = handle.lock();
            let routed = route_governance(task, &library, Some(&mut state), mode, self.embedder.as_ref(), completer, &self.config)?;
            (routed, Some(state.session_id.clone()))
        } else {
            let routed = route_governance(task, &library, None, mode, self.embedder.as_ref(), completer, &self.config)?;
            (routed, None)
        };
        let compiled = routed.compile();
        Ok(GovernResponse {
            session_id: sid,
            routed,
            compiled,
        })
    }

    pub fn end_session(&self, org_id: &str, session_id: &str) -> EngineResult<()> {
        require_org(org_id)?;
        match self.sessions.get(session_id) {
            Some(s) if s.org_id == org_id => {
                self.sessions.end(session_id);
                Ok(())
            }
            _ => Err(EngineError::not_found(format!("unknown session {session_id}"))),
        }
    }

    // Schemas.

    fn persist_schemas(&self) -> EngineResult<()> {
        if let Some(dir) = &self.data_dir {
            let rows: Vec<SchemaRow> = self
                .schemas
                .all()
                .into_iter()
                .map(|(org_id, schema)| SchemaRow { org_id, schema })
                .collect();
            write_json_atomic(&dir.join(SCHEMAS_FILE), &rows)?;
        }
        Ok(())
    }

    pub fn put_schema(&self, org_id: &str, schema: Schema, expected_version: Option<u32>) -> EngineResult<Schema> {
        require_org(org_id)?;
        let s = self.schemas.put(org_id, schema, expected_version)?;
        self.persist_schemas()?;
        Ok(s)
    }

    pub fn schema(&self, org_id: &str, id: &str) -> EngineResult<Schema> {
        require_org(org_id)?;
        self.schemas
            .get(org_id, id)
            .ok_or_else(|| SchemaError::UnknownSchema(id.to_string()).into())
    }

    pub fn schemas(&self, org_id: &str) -> EngineResult<Vec<Schema>> {
        require_org(org_id)?;
        Ok(self.schemas.list(org_id))
    }

    pub fn delete_schema(&self, org_id: &str, id: &str) -> EngineResult<Schema> {
        require_org(org_id)?;
        let s = self
            .schemas
            .remove(org_id, id)
            .ok_or_else(|| EngineError::from(SchemaError::UnknownSchema(id.to_string())))?;
        self.persist_schemas()?;
        Ok(s)
    }

    /// Authors a schema from intent and registers it.
    pub fn author_schema(&self, org_id: &str, intent: &str) -> EngineResult<AuthoredSchema> {
        require_org(org_id)?;
        let completer = self.completer.as_deref().ok_or_else(EngineError::no_completer)?;
        let mut authored = author_schema(intent, completer)?;
        authored.schema = self.put_schema(org_id, authored.schema, None)?;
        Ok(authored)
    }

    /// Finds the schema holding property `property_id` (or its system name),
    /// revises that property from feedback and re-registers the schema.
    pub fn enhance_property(
        &self,
        org_id: &str,
        property_id: &str,
        feedback: &str,
        schema_id: Option<&str>,
    ) -> EngineResult<(Schema, SchemaProperty)> {
        require_org(org_id)?;
        let completer = self.completer.as_deref().ok_or_else(EngineError::no_completer)?;
        let candidates = match schema_id {
            Some(id) => vec![self.schema(org_id, id)?],
            None => self.schemas.list(org_id),
        };
        let mut schema = candidates
            .into_iter()
            .find(|s| s.property(property_id).is_some())
            .ok_or_else(|| EngineError::not_found(format!("unknown property {property_id}")))?;
        let idx = schema
            .properties
            .iter()
            .position(|p| p.id == property_id || p.system_name == property_id)
            .ok_or_else(|| EngineError::not_found(format!("unknown property {property_id}")))?;
        let revised = enhance_property(&schema.properties[idx], feedback, completer)?;
        schema.properties[idx] = revised.clone();
        let version = schema.version;
        let schema = self.put_schema(org_id, schema, Some(version))?;
        Ok((schema, revised))
    }

    /// Runs refinement over a sample; revisions are reported, not applied.
    pub fn refine_schema(
        &self,
        org_id: &str,
        schema_id: &str,
        sample: &str,
        expected: Option<&BTreeMap<String, Value>>,
    ) -> EngineResult<RefinementReport> {
        let schema = self.schema(org_id, schema_id)?;
        let pipeline = self.pipeline()?;
        Ok(refine_schema(&schema, sample, expected, &pipeline, pipeline.completer)?)
    }

    // Evaluation.

    pub fn evaluate(&self, input: &EvaluationInput, rubric: &Rubric) -> EngineResult<EvaluationRecord> {
        require_org(&input.org_id)?;
        let completer = self.completer.as_deref().ok_or_else(EngineError::no_completer)?;
        Ok(evaluate_interaction(input, rubric, completer, Some(&self.store), &self.evaluations, self.clock.now())?)
    }

    pub fn evaluations(&self, org_id: &str) -> EngineResult<Vec<EvaluationRecord>> {
        require_org(org_id)?;
        Ok(self.evaluations.records(org_id))
    }

    pub fn diagnostics(
        &self,
        org_id: &str,
        window: Option<(DateTime<Utc>, DateTime<Utc>)>,
        thresholds: &DiagnosticThresholds,
    ) -> EngineResult<DiagnosticsReport> {
        require_org(org_id)?;
        Ok(aggregate_diagnostics(&self.evaluations.records(org_id), window, thresholds))
    }

    /// Config echo, provider description and store statistics.
    pub fn health(&self) -> Value {
        json!({
            "status": "ok",
            "config": self.config,
            "providers": {
                "embedding": {"dimension": self.embedder.dimension()},
                "completion": self.completer.as_ref().map(|c| c.model_id()),
            },
            "store": self.store.stats(),
            "persistent": self.data_dir.is_some(),
            "sessions": self.sessions.len(),
        })
    }
}
