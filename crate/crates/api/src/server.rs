use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dpsir_core::engine::{palette, EngineError, LayoutRequest, Workbench};
use dpsir_core::layout::LayoutKind;
use dpsir_core::store::{StoreError, Workspace};
use dpsir_core::taxonomy::{Edit, IndicatorKind, Rule, Step, TaxonomyError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ApiConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shared server state: the workbench and the set of versions currently
/// executing.
#[derive(Clone)]
pub struct AppState {
    wb: Arc<RwLock<Workbench>>,
    running: Arc<Mutex<BTreeSet<String>>>,
    token: Option<String>,
}

impl AppState {
    pub fn new(wb: Workbench) -> Self {
        Self {
            wb: Arc::new(RwLock::new(wb)),
            running: Arc::default(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn workbench(&self) -> &Arc<RwLock<Workbench>> {
        &self.wb
    }

    pub fn is_running(&self, version_id: &str) -> bool {
        self.running.lock().expect("running set").contains(version_id)
    }
}

/// Marks a version as executing until dropped.
struct RunGuard {
    running: Arc<Mutex<BTreeSet<String>>>,
    version_id: String,
}

impl RunGuard {
    fn acquire(state: &AppState, version_id: &str) -> Option<Self> {
        let mut set = state.running.lock().expect("running set");
        set.insert(version_id.to_owned()).then(|| RunGuard {
            running: state.running.clone(),
            version_id: version_id.to_owned(),
        })
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        self.running.lock().expect("running set").remove(&self.version_id);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Store(StoreError::NotFound { .. })
            | EngineError::Taxonomy(TaxonomyError::VersionNotFound(_) | TaxonomyError::RuleNotFound(_))
            | EngineError::UnknownSnippet(_)
            | EngineError::NotExecuted(_) => StatusCode::NOT_FOUND,
            EngineError::Taxonomy(_) | EngineError::WrongStep { .. } | EngineError::InvalidRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            EngineError::Store(StoreError::Locked(_)) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn to_json<T: serde::Serialize>(value: T) -> ApiResult<Value> {
    serde_json::to_value(value)
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/documents", get(list_documents))
        .route("/documents/{id}", get(get_document))
        .route("/snippets", get(list_snippets))
        .route("/snippets/{id}", get(get_snippet))
        .route("/versions", get(list_versions).post(create_version))
        .route("/versions/{id}", get(get_version).put(fork_version))
        .route("/versions/{id}/lineage", get(get_lineage))
        .route("/versions/{id}/execute", post(execute_version))
        .route("/progress", get(get_progress))
        .route("/runsets/{version}", get(get_results))
        .route("/runsets/{version}/raw", get(get_raw_results))
        .route("/runsets/{version}/summaries", get(get_summaries))
        .route("/rules", get(list_rules).post(add_rule))
        .route("/rules/{id}", get(get_rule).delete(remove_rule))
        .route("/layouts/{kind}", get(get_layout).post(save_layout))
        .route("/evidence/{snippet}", get(get_evidence))
        .route("/palette", get(get_palette))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn cors_layer(origins: &[String]) -> anyhow::Result<CorsLayer> {
    let origins = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).with_context(|| format!("invalid CORS origin {o:?}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST, Method::PUT, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]))
}

pub fn open_workbench(config: &ApiConfig) -> anyhow::Result<Workbench> {
    let store = Workspace::open(&config.workspace)
        .with_context(|| format!("opening workspace {}", config.workspace.display()))?;
    Ok(Workbench::open(
        store,
        config.provider.build()?,
        config.engine_config(),
    )?)
}

/// Serves the API until interrupted. In-flight requests, executions
/// included, finish before the call returns.
pub async fn serve(config: ApiConfig) -> anyhow::Result<()> {
    config.validate()?;
    let state = AppState::new(open_workbench(&config)?).with_token(config.token.clone());
    let mut app = router(state.clone());
    if !config.cors.is_empty() {
        app = app.layer(cors_layer(&config.cors)?);
    }
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    state.wb.write().await.persist_caches()?;
    Ok(())
}

fn parse_list<T: FromStr + Ord>(raw: Option<&str>) -> Result<BTreeSet<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    raw.unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| ApiError::bad_request(e.to_string())))
        .collect()
}

pub fn parse_step(raw: &str) -> Result<Step, String> {
    Step::from_slug(raw)
        .or_else(|| serde_json::from_value(Value::String(raw.to_owned())).ok())
        .ok_or_else(|| format!("unknown step {raw:?}"))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": VERSION }))
}

async fn list_documents(State(s): State<AppState>) -> ApiResult<Value> {
    to_json(s.wb.read().await.documents()?)
}

async fn get_document(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.document(&id)?)
}

async fn list_snippets(State(s): State<AppState>) -> ApiResult<Value> {
    to_json(s.wb.read().await.snippets()?)
}

async fn get_snippet(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.snippet(&id)?)
}

#[derive(Debug, Deserialize)]
struct StepQuery {
    step: Option<String>,
}

async fn list_versions(State(s): State<AppState>, Query(q): Query<StepQuery>) -> ApiResult<Value> {
    let step = q
        .step
        .as_deref()
        .map(parse_step)
        .transpose()
        .map_err(ApiError::bad_request)?;
    to_json(s.wb.read().await.versions(step))
}

#[derive(Debug, Deserialize)]
struct CreateVersion {
    step: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    edits: Vec<Edit>,
}

async fn create_version(State(s): State<AppState>, Json(body): Json<CreateVersion>) -> Result<Response, ApiError> {
    let step = parse_step(&body.step).map_err(ApiError::bad_request)?;
    let v =
        s.wb.write()
            .await
            .create_version(step, body.parent.as_deref(), &body.edits)?;
    Ok((StatusCode::CREATED, to_json(v)?).into_response())
}

async fn get_version(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.version(&id)?)
}

#[derive(Debug, Deserialize)]
struct ForkVersion {
    #[serde(default)]
    edits: Vec<Edit>,
}

/// Versions are immutable; an update forks a child carrying the edits.
async fn fork_version(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<ForkVersion>,
) -> Result<Response, ApiError> {
    let mut wb = s.wb.write().await;
    let step = wb.version(&id)?.step;
    let v = wb.create_version(step, Some(&id), &body.edits)?;
    Ok((StatusCode::CREATED, to_json(v)?).into_response())
}

async fn get_lineage(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.lineage(&id)?)
}

#[derive(Debug, Default, Deserialize)]
struct ExecuteBody {
    k: Option<usize>,
}

async fn execute_version(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<ExecuteBody>>,
) -> ApiResult<Value> {
    let k = body.and_then(|Json(b)| b.k);
    if k == Some(0) {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let Some(_guard) = RunGuard::acquire(&s, &id) else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("version {id} is already executing"),
        ));
    };
    let plan = s.wb.read().await.plan_execution(&id, k)?;
    let result = plan.run().await?;
    let result = s.wb.write().await.commit_execution(result)?;
    to_json(json!({
        "result_id": result.id,
        "version_id": result.version_id,
        "k": result.k,
        "runsets": result.runsets.len(),
        "links": result.links.len(),
        "warnings": result.warnings,
    }))
}

async fn get_progress(State(s): State<AppState>) -> ApiResult<Value> {
    to_json(s.wb.read().await.progress())
}

async fn get_results(State(s): State<AppState>, Path(v): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.results(&v)?)
}

async fn get_raw_results(State(s): State<AppState>, Path(v): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.raw_results(&v)?)
}

async fn get_summaries(State(s): State<AppState>, Path(v): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.read().await.snippet_summaries(&v)?)
}

#[derive(Debug, Deserialize)]
struct SnippetQuery {
    snippet: Option<String>,
}

async fn list_rules(State(s): State<AppState>, Query(q): Query<SnippetQuery>) -> ApiResult<Value> {
    let wb = s.wb.read().await;
    let rules: BTreeMap<&str, &Rule> = wb.rules().list(q.snippet.as_deref()).into_iter().collect();
    to_json(rules)
}

async fn add_rule(State(s): State<AppState>, Json(rule): Json<Rule>) -> Result<Response, ApiError> {
    let id = s.wb.write().await.add_rule(rule)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn get_rule(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let wb = s.wb.read().await;
    let rule = wb
        .rules()
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("rule {id} not found")))?;
    to_json(rule)
}

async fn remove_rule(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    to_json(s.wb.write().await.remove_rule(&id)?)
}

#[derive(Debug, Default, Deserialize)]
pub struct LayoutQuery {
    pub version: Option<String>,
    pub hide: Option<String>,
    pub open: Option<String>,
    pub snippet: Option<String>,
    pub format: Option<String>,
}

/// Steps whose results a layout kind is drawn from.
pub fn layout_steps(kind: LayoutKind) -> &'static [Step] {
    match kind {
        LayoutKind::Uncertainty => &[Step::IndicatorId, Step::VariableId, Step::LinkId],
        LayoutKind::Keywords => &[Step::VariableId],
        LayoutKind::LinkGraph | LayoutKind::Dpsir => &[Step::LinkId],
    }
}

/// The newest executed version a layout of `kind` can be drawn from.
pub fn default_layout_version(wb: &Workbench, kind: LayoutKind) -> Option<String> {
    wb.versions(None)
        .into_iter()
        .filter(|v| v.result_id.is_some() && layout_steps(kind).contains(&v.step))
        .max_by(|a, b| a.created_at.cmp(&b.created_at))
        .map(|v| v.id.clone())
}

pub fn layout_request(wb: &Workbench, kind: LayoutKind, q: &LayoutQuery) -> Result<LayoutRequest, ApiError> {
    let version = match &q.version {
        Some(v) => v.clone(),
        None => default_layout_version(wb, kind).ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                format!("no executed version for a {} layout", kind.slug()),
            )
        })?,
    };
    let mut req = LayoutRequest::new(kind, version);
    req.hide = parse_list::<IndicatorKind>(q.hide.as_deref())?;
    req.open = parse_list::<IndicatorKind>(q.open.as_deref())?;
    req.snippet_id = q.snippet.clone();
    Ok(req)
}

fn parse_kind(raw: &str) -> Result<LayoutKind, ApiError> {
    LayoutKind::from_slug(raw)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown layout kind {raw:?}")))
}

async fn get_layout(
    State(s): State<AppState>,
    Path(kind): Path<String>,
    Query(q): Query<LayoutQuery>,
) -> Result<Response, ApiError> {
    let kind = parse_kind(&kind)?;
    let wb = s.wb.read().await;
    let req = layout_request(&wb, kind, &q)?;
    let doc = wb.layout(&req).await?;
    match q.format.as_deref() {
        None | Some("json") => Ok(to_json(doc)?.into_response()),
        Some("svg") => Ok(([(header::CONTENT_TYPE, "image/svg+xml")], doc.svg()).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    }
}

async fn save_layout(
    State(s): State<AppState>,
    Path(kind): Path<String>,
    Query(q): Query<LayoutQuery>,
) -> Result<Response, ApiError> {
    let kind = parse_kind(&kind)?;
    let mut wb = s.wb.write().await;
    let req = layout_request(&wb, kind, &q)?;
    let doc = wb.layout(&req).await?;
    let id = wb.save_layout(&doc)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

#[derive(Debug, Deserialize)]
struct VersionQuery {
    version: Option<String>,
}

async fn get_evidence(
    State(s): State<AppState>,
    Path(snippet): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Value> {
    to_json(s.wb.read().await.evidence(&snippet, q.version.as_deref())?)
}

async fn get_palette() -> Json<BTreeMap<String, String>> {
    Json(palette())
}
