//! JSON-over-HTTP surface. Every route requires a bearer token that maps to
//! an orgId; the body's own `orgId`, if any, is replaced by it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{MatchedPath, Path, Query, Request, State};
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use chrono::{DateTime, Utc};
use gmem_core::engine::{Engine, EngineError, EngineResult, ErrorKind};
use gmem_core::extraction::MemorizeRequest;
use gmem_core::governance::{GovernanceVariable, RouteMode};
use gmem_core::model::{content_hash, CrmKeys};
use gmem_core::retrieval::RetrievalRequest;
use gmem_core::schema::{DiagnosticThresholds, EvaluationInput, Rubric, Schema};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::oplog::OpLog;

pub const REQUEST_ID_HEADER: &str = "x-request-id";
const DEFAULT_CONTEXT_BUDGET: usize = 1000;

pub struct AppInner {
    engine: Arc<Engine>,
    tokens: BTreeMap<String, String>,
    oplog: OpLog,
    config_view: Value,
    next_request: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<AppInner>);

impl AppState {
    pub fn new(engine: Arc<Engine>, tokens: BTreeMap<String, String>, oplog: OpLog, config_view: Value) -> Self {
        Self(Arc::new(AppInner {
            engine,
            tokens,
            oplog,
            config_view,
            next_request: AtomicU64::new(1),
        }))
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.0.engine
    }
}

/// Resolved caller identity for one request.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub org_id: String,
    pub request_id: String,
    /// Stable fingerprint of the bearer token, never the token itself.
    pub user: String,
}

/// Extra fields a handler wants in the operation log line.
#[derive(Debug, Clone)]
pub struct OpMeta(pub Value);

#[derive(Debug)]
pub struct ApiError(pub EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.kind.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.to_json())).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn authenticate(headers: &HeaderMap, tokens: &BTreeMap<String, String>) -> Result<(String, String), EngineError> {
    let unauthorized = |m: &str| EngineError::new(ErrorKind::Unauthorized, m);
    let raw = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| unauthorized("missing bearer token"))?;
    let token = raw
        .strip_prefix("Bearer ")
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| unauthorized("malformed authorization header"))?;
    let org = if tokens.is_empty() {
        token.to_string()
    } else {
        tokens.get(token).cloned().ok_or_else(|| unauthorized("unknown token"))?
    };
    Ok((org, content_hash(token)[..12].to_string()))
}

async fn track(State(state): State<AppState>, mut req: Request, next: Next) -> Response {
    let n = state.0.next_request.fetch_add(1, Ordering::Relaxed);
    let request_id = format!("req-{n:08}");
    let method = req.method().clone();
    let route = req
        .extensions()
        .get::<MatchedPath>()
        .map_or_else(|| req.uri().path().to_string(), |m| m.as_str().to_string());
    let path = req.uri().path().to_string();
    let auth = authenticate(req.headers(), &state.0.tokens);
    let (org, user) = auth.as_ref().map_or((None, None), |(o, u)| (Some(o.clone()), Some(u.clone())));
    let mut resp = match auth {
        Err(e) => ApiError(e).into_response(),
        Ok((org_id, user)) => {
            req.extensions_mut().insert(Ctx {
                org_id,
                request_id: request_id.clone(),
                user,
            });
            next.run(req).await
        }
    };
    if method != Method::GET {
        let meta = resp.extensions().get::<OpMeta>().map(|m| m.0.clone());
        state.0.oplog.append(&json!({
            "ts": Utc::now().to_rfc3339(),
            "requestId": request_id,
            "orgId": org,
            "user": user,
            "op": format!("{method} {route}"),
            "path": path,
            "status": resp.status().as_u16(),
            "meta": meta,
        }));
    }
    if let Ok(v) = HeaderValue::from_str(&request_id) {
        resp.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    resp
}

/// Parses a JSON body (empty means `{}`), stamping `orgId` when given.
fn parse_body<T: DeserializeOwned>(body: &Bytes, org: Option<&str>) -> Result<T, ApiError> {
    let mut v: Value = if body.iter().all(u8::is_ascii_whitespace) {
        json!({})
    } else {
        serde_json::from_slice(body).map_err(|e| EngineError::bad_request(format!("malformed JSON body: {e}")))?
    };
    if let (Some(org), Value::Object(m)) = (org, &mut v) {
        m.insert("orgId".into(), json!(org));
    }
    serde_json::from_value(v).map_err(|e| ApiError(EngineError::bad_request(format!("invalid request body: {e}"))))
}

/// Runs `f` on the blocking pool and serializes its result.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<Value, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Engine) -> EngineResult<T> + Send + 'static,
{
    let engine = state.0.engine.clone();
    let out = tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| EngineError::new(ErrorKind::Internal, format!("worker failed: {e}")))??;
    serde_json::to_value(out).map_err(|e| ApiError(EngineError::new(ErrorKind::Internal, e.to_string())))
}

fn ok(v: Value) -> ApiResult {
    Ok(Json(v).into_response())
}

fn ok_with(v: Value, meta: Value) -> ApiResult {
    Ok((Extension(OpMeta(meta)), Json(v)).into_response())
}

fn expected_version(body: &Bytes) -> Result<Option<u32>, ApiError> {
    #[derive(Deserialize, Default)]
    #[serde(rename_all = "camelCase", default)]
    struct Expected {
        expected_version: Option<u32>,
    }
    Ok(parse_body::<Expected>(body, None)?.expected_version)
}

async fn health(State(s): State<AppState>) -> ApiResult {
    let mut h = blocking(&s, |e| Ok(e.health())).await?;
    h["server"] = s.0.config_view.clone();
    ok(h)
}

async fn memorize(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let req: MemorizeRequest = parse_body(&body, Some(&ctx.org_id))?;
    let report = blocking(&s, move |e| e.memorize(&req)).await?;
    let meta = json!({"storedFacts": report["storedFacts"], "skippedDuplicates": report["skippedDuplicates"]});
    ok_with(report, meta)
}

async fn retrieve(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let req: RetrievalRequest = parse_body(&body, Some(&ctx.org_id))?;
    ok(blocking(&s, move |e| e.retrieve(&req)).await?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct EntityContextBody {
    crm_keys: CrmKeys,
    #[serde(default)]
    token_budget: Option<usize>,
    #[serde(default)]
    schema_id: Option<String>,
}

async fn entity_context(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let b: EntityContextBody = parse_body(&body, None)?;
    let org = ctx.org_id;
    ok(blocking(&s, move |e| {
        e.entity_context(&org, &b.crm_keys, b.token_budget.unwrap_or(DEFAULT_CONTEXT_BUDGET), b.schema_id.as_deref())
    })
    .await?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GovernBody {
    task: String,
    #[serde(default)]
    mode: RouteMode,
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    new_session: bool,
}

async fn govern(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let b: GovernBody = parse_body(&body, None)?;
    let org = ctx.org_id;
    let out = blocking(&s, move |e| e.govern(&org, &b.task, b.mode, b.session_id.as_deref(), b.new_session)).await?;
    let meta = json!({
        "sessionId": out["sessionId"],
        "mode": out["routed"]["mode"],
        "tokenCount": out["routed"]["tokenCount"],
    });
    ok_with(out, meta)
}

async fn end_session(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>) -> ApiResult {
    let org = ctx.org_id;
    blocking(&s, move |e| e.end_session(&org, &id)).await?;
    ok(json!({"ended": true}))
}

async fn list_variables(State(s): State<AppState>, Extension(ctx): Extension<Ctx>) -> ApiResult {
    ok(blocking(&s, move |e| e.variables(&ctx.org_id)).await?)
}

async fn create_variable(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let v: GovernanceVariable = parse_body(&body, Some(&ctx.org_id))?;
    let expected = expected_version(&body)?;
    let out = blocking(&s, move |e| e.put_variable(v, expected)).await?;
    let meta = json!({"id": out["id"], "version": out["version"]});
    ok_with(out, meta)
}

async fn get_variable(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&s, move |e| e.variable(&ctx.org_id, &id)).await?)
}

async fn put_variable(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let mut v: GovernanceVariable = parse_body(&body, Some(&ctx.org_id))?;
    v.id = id;
    let expected = expected_version(&body)?;
    let out = blocking(&s, move |e| e.put_variable(v, expected)).await?;
    let meta = json!({"id": out["id"], "version": out["version"]});
    ok_with(out, meta)
}

async fn delete_variable(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>) -> ApiResult {
    let out = blocking(&s, move |e| e.delete_variable(&ctx.org_id, &id)).await?;
    let meta = json!({"id": out["id"]});
    ok_with(out, meta)
}

async fn list_schemas(State(s): State<AppState>, Extension(ctx): Extension<Ctx>) -> ApiResult {
    ok(blocking(&s, move |e| e.schemas(&ctx.org_id)).await?)
}

async fn create_schema(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let schema: Schema = parse_body(&body, None)?;
    let expected = expected_version(&body)?;
    let out = blocking(&s, move |e| e.put_schema(&ctx.org_id, schema, expected)).await?;
    let meta = json!({"id": out["id"], "version": out["version"]});
    ok_with(out, meta)
}

async fn get_schema(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&s, move |e| e.schema(&ctx.org_id, &id)).await?)
}

async fn put_schema(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let mut schema: Schema = parse_body(&body, None)?;
    schema.id = id;
    let expected = expected_version(&body)?;
    let out = blocking(&s, move |e| e.put_schema(&ctx.org_id, schema, expected)).await?;
    let meta = json!({"id": out["id"], "version": out["version"]});
    ok_with(out, meta)
}

async fn delete_schema(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>) -> ApiResult {
    let out = blocking(&s, move |e| e.delete_schema(&ctx.org_id, &id)).await?;
    let meta = json!({"id": out["id"]});
    ok_with(out, meta)
}

#[derive(Deserialize)]
struct AuthorBody {
    intent: String,
}

async fn author_schema(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let b: AuthorBody = parse_body(&body, None)?;
    let out = blocking(&s, move |e| e.author_schema(&ctx.org_id, &b.intent)).await?;
    let meta = json!({"id": out["schema"]["id"]});
    ok_with(out, meta)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RefineBody {
    sample: String,
    #[serde(default)]
    expected: Option<BTreeMap<String, Value>>,
}

async fn refine_schema(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: RefineBody = parse_body(&body, None)?;
    ok(blocking(&s, move |e| e.refine_schema(&ctx.org_id, &id, &b.sample, b.expected.as_ref())).await?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct EnhanceBody {
    feedback: String,
    #[serde(default)]
    schema_id: Option<String>,
}

async fn enhance_property(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: EnhanceBody = parse_body(&body, None)?;
    let out = blocking(&s, move |e| {
        let (schema, property) = e.enhance_property(&ctx.org_id, &id, &b.feedback, b.schema_id.as_deref())?;
        Ok(json!({"schema": schema, "property": property}))
    })
    .await?;
    let meta = json!({"schemaId": out["schema"]["id"], "version": out["schema"]["version"]});
    ok_with(out, meta)
}

fn rubric_from(v: Option<&Value>) -> Result<Rubric, ApiError> {
    match v {
        None | Some(Value::Null) => Ok(Rubric::default_preset()),
        Some(Value::String(name)) => {
            Rubric::preset(name).ok_or_else(|| ApiError(EngineError::bad_request(format!("unknown rubric preset {name:?}"))))
        }
        Some(other) => serde_json::from_value(other.clone()).map_err(|e| ApiError(EngineError::bad_request(format!("invalid rubric: {e}")))),
    }
}

async fn evaluate(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let raw: Value = parse_body(&body, None)?;
    let rubric = rubric_from(raw.get("rubric"))?;
    let input: EvaluationInput = parse_body(&body, Some(&ctx.org_id))?;
    let out = blocking(&s, move |e| e.evaluate(&input, &rubric)).await?;
    let meta = json!({"id": out["id"], "rubric": out["rubricName"]});
    ok_with(out, meta)
}

async fn evaluations(State(s): State<AppState>, Extension(ctx): Extension<Ctx>) -> ApiResult {
    ok(blocking(&s, move |e| e.evaluations(&ctx.org_id)).await?)
}

#[derive(Deserialize)]
struct Window {
    from: Option<DateTime<Utc>>,
    to: Option<DateTime<Utc>>,
}

async fn diagnostics(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, Query(w): Query<Window>) -> ApiResult {
    let window = match (w.from, w.to) {
        (None, None) => None,
        (from, to) => Some((from.unwrap_or(DateTime::<Utc>::MIN_UTC), to.unwrap_or(DateTime::<Utc>::MAX_UTC))),
    };
    ok(blocking(&s, move |e| e.diagnostics(&ctx.org_id, window, &DiagnosticThresholds::default())).await?)
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase", default)]
struct ConsolidateBody {
    dry_run: bool,
}

async fn consolidate(State(s): State<AppState>, Extension(ctx): Extension<Ctx>, body: Bytes) -> ApiResult {
    let b: ConsolidateBody = parse_body(&body, None)?;
    let out = blocking(&s, move |e| e.consolidate(&ctx.org_id, b.dry_run)).await?;
    ok_with(out, json!({"dryRun": b.dry_run}))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/memorize", post(memorize))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/context/entity", post(entity_context))
        .route("/v1/govern", post(govern))
        .route("/v1/govern/session/{id}", axum::routing::delete(end_session))
        .route("/v1/variables", get(list_variables).post(create_variable))
        .route("/v1/variables/{id}", get(get_variable).put(put_variable).delete(delete_variable))
        .route("/v1/schemas", get(list_schemas).post(create_schema))
        .route("/v1/schemas/author", post(author_schema))
        .route("/v1/schemas/{id}", get(get_schema).put(put_schema).delete(delete_schema))
        .route("/v1/schemas/{id}/refine", post(refine_schema))
        .route("/v1/properties/{id}/enhance", post(enhance_property))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/evaluations", get(evaluations))
        .route("/v1/diagnostics", get(diagnostics))
        .route("/v1/consolidate", post(consolidate))
        .route_layer(middleware::from_fn_with_state(state.clone(), track))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn headers(v: &str) -> HeaderMap {
        let mut h = HeaderMap::new();
        h.insert(axum::http::header::AUTHORIZATION, HeaderValue::from_str(v).unwrap());
        h
    }

    #[test]
    fn token_resolution() {
        let open = BTreeMap::new();
        assert_eq!(authenticate(&headers("Bearer acme"), &open).unwrap().0, "acme");
        assert!(authenticate(&HeaderMap::new(), &open).is_err());
        assert!(authenticate(&headers("Basic x"), &open).is_err());
        assert!(authenticate(&headers("Bearer  "), &open).is_err());
        let table = BTreeMap::from([("t-1".to_string(), "acme".to_string())]);
        assert_eq!(authenticate(&headers("Bearer t-1"), &table).unwrap().0, "acme");
        let err = authenticate(&headers("Bearer acme"), &table).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Unauthorized);
    }

    #[test]
    fn body_org_is_replaced() {
        let body = Bytes::from_static(br#"{"orgId": "other", "content": "x"}"#);
        let req: MemorizeRequest = parse_body(&body, Some("mine")).unwrap();
        assert_eq!(req.org_id, "mine");
        assert!(parse_body::<MemorizeRequest>(&Bytes::from_static(b"{"), Some("o")).is_err());
    }
}
