//! HTTP and WebSocket surface.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, NaiveDate, SubsecRound, Utc};
use chrono_tz::Tz;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;

use gaia_core::analytics::{
    compare_periods, compare_with_peers, detect_anomalies, peer_group, AnalyticsError, AnomalyParams, Period,
};
use gaia_core::engagement::{EngagementError, LeaderboardScope};
use gaia_core::ingest::{IngestError, Reading};
use gaia_core::model::{authorize, path_covers, Action, NodeId, ResourceTree, SensorKind, User};
use gaia_core::notify::{NotifyError, Subscription};
use gaia_core::platform::Platform;
use gaia_core::rules::{Category, ConditionError, RuleBody, RuleError, RuleId};
use gaia_core::store::{Agg, SeriesId, SeriesMeta, Source, StoreError, Timescale};

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
    pub shutdown: watch::Receiver<bool>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/readings", post(readings))
        .route("/api/v1/uploads/{series_id}", post(upload))
        .route("/api/v1/manual", post(manual))
        .route("/api/v1/series", get(list_series).post(register_series))
        .route("/api/v1/series/{id}/range", get(series_range))
        .route("/api/v1/series/{id}/agg", get(series_agg))
        .route("/api/v1/series/{id}/anomalies", get(series_anomalies))
        .route("/api/v1/resources", get(resources))
        .route(
            "/api/v1/resources/{*rest}",
            get(rules_get).put(rules_put).delete(rules_delete),
        )
        .route("/api/v1/notifications", get(notifications))
        .route("/ws/notifications", get(notifications_ws))
        .route("/api/v1/buildings/{id}/compare", get(building_compare))
        .route("/api/v1/buildings/{id}/peers", get(building_peers))
        .route("/api/v1/buildings/{id}/facility-credit", post(facility_credit))
        .route("/api/v1/leaderboard", get(leaderboard))
        .route("/api/v1/quests/{id}/complete", post(complete_quest))
        .route("/api/v1/classes/{id}", get(class_view))
        .with_state(state)
}

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            detail: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "unauthorized", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        let message = message.into();
        log::error!("{message}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(d) = self.detail {
            body["detail"] = d;
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSeries(_) => ApiError::not_found(e.to_string()),
            StoreError::BadRange(..) | StoreError::InvalidSeriesId(_) => ApiError::bad_request(e.to_string()),
            StoreError::Conflict { .. } => ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string()),
            StoreError::Corrupt { .. } | StoreError::Io(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::ValidationFailed(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", e.to_string())
            }
            IngestError::Unauthorized(_) => ApiError::forbidden(e.to_string()),
            IngestError::UnknownResource(_) | IngestError::UnknownSeries(_) => ApiError::not_found(e.to_string()),
            IngestError::EmptyFile => ApiError::new(StatusCode::BAD_REQUEST, "empty_file", e.to_string()),
            IngestError::BadHeader(_) => ApiError::new(StatusCode::BAD_REQUEST, "bad_header", e.to_string()),
            IngestError::Store(e) => e.into(),
        }
    }
}

impl From<RuleError> for ApiError {
    fn from(e: RuleError) -> Self {
        let unprocessable =
            |code, e: &dyn std::fmt::Display| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string());
        match &e {
            RuleError::Condition(ConditionError::SyntaxError { token, offset, .. }) => ApiError {
                detail: Some(json!({ "token": token, "offset": offset })),
                ..unprocessable("syntax_error", &e)
            },
            RuleError::Condition(ConditionError::UnknownKind { token, .. }) => ApiError {
                detail: Some(json!({ "token": token })),
                ..unprocessable("syntax_error", &e)
            },
            RuleError::Condition(_) | RuleError::ValidationFailed(_) => unprocessable("validation_failed", &e),
            RuleError::UnknownTarget(_) | RuleError::NotFound(_) => ApiError::not_found(e.to_string()),
            RuleError::Unauthorized(_) => ApiError::forbidden(e.to_string()),
            RuleError::Io(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::NoData(_) | AnalyticsError::UnknownBuilding(_) => ApiError::not_found(e.to_string()),
            AnalyticsError::BadPeriod(_) => ApiError::bad_request(e.to_string()),
            AnalyticsError::TooFewPoints(_)
            | AnalyticsError::MissingMetadata(_)
            | AnalyticsError::InsufficientHistory { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_data", e.to_string())
            }
            AnalyticsError::Store(e) => e.into(),
        }
    }
}

impl From<EngagementError> for ApiError {
    fn from(e: EngagementError) -> Self {
        match e {
            EngagementError::DuplicateCompletion { .. } | EngagementError::TaskExists(_) => {
                ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())
            }
            EngagementError::UnknownQuest(_)
            | EngagementError::UnknownClass(_)
            | EngagementError::UnknownTask(_)
            | EngagementError::UnknownSchool(_) => ApiError::not_found(e.to_string()),
            EngagementError::NotAStudent(_) => ApiError::forbidden(e.to_string()),
            EngagementError::BadWeek(_) => ApiError::bad_request(e.to_string()),
            EngagementError::Analytics(e) => e.into(),
            EngagementError::Io(_) | EngagementError::Corrupt { .. } => ApiError::internal(e.to_string()),
        }
    }
}

impl From<NotifyError> for ApiError {
    fn from(e: NotifyError) -> Self {
        match e {
            NotifyError::UnknownScope(_) => ApiError::not_found(e.to_string()),
            NotifyError::Template(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", e.to_string())
            }
            NotifyError::Io(_) => ApiError::internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose rejections use the API error envelope.
struct ApiJson<T>(T);

impl<T, S> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(e) => Err(ApiError::new(e.status(), "bad_body", e.body_text())),
        }
    }
}

/// Runs store-touching work off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

// ---------------------------------------------------------------- auth

/// The caller behind an `Authorization: Bearer` header (or a `token` query
/// parameter, for browser WebSockets), if any was presented.
pub struct MaybeUser(pub Option<User>);

/// Like [`MaybeUser`] but rejects anonymous requests.
pub struct AuthUser(pub User);

fn presented_token(parts: &Parts) -> Option<String> {
    if let Some(value) = parts.headers.get(header::AUTHORIZATION) {
        let text = value.to_str().ok()?;
        return Some(text.strip_prefix("Bearer ").unwrap_or(text).trim().to_string());
    }
    let query: Query<HashMap<String, String>> = Query::try_from_uri(&parts.uri).ok()?;
    query.0.get("token").cloned()
}

impl FromRequestParts<AppState> for MaybeUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        match presented_token(parts) {
            None => Ok(MaybeUser(None)),
            Some(token) => state
                .platform
                .users
                .load()
                .by_token(&token)
                .cloned()
                .map(|u| MaybeUser(Some(u)))
                .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "unknown token")),
        }
    }
}

impl FromRequestParts<AppState> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        MaybeUser::from_request_parts(parts, state)
            .await?
            .0
            .map(AuthUser)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing bearer token"))
    }
}

// ---------------------------------------------------------------- helpers

fn now() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(0)
}

fn building_tz(tree: &ResourceTree, path: &str) -> Tz {
    tree.resolve_path(path)
        .ok()
        .and_then(|n| tree.building_of(n))
        .and_then(|b| b.metadata.as_ref())
        .map(|m| m.tz())
        .unwrap_or(chrono_tz::UTC)
}

fn parse<T: std::str::FromStr>(what: &str, text: &str) -> ApiResult<T>
where
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e| ApiError::bad_request(format!("{what}: {e}")))
}

fn series_meta(p: &Platform, id: &str) -> ApiResult<SeriesMeta> {
    p.store
        .meta(&SeriesId::new(id))
        .ok_or_else(|| ApiError::not_found(format!("unknown series `{id}`")))
}

// ---------------------------------------------------------------- handlers

async fn health(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.platform.health())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadingBody {
    #[serde(default)]
    series_id: Option<SeriesId>,
    resource_path: String,
    kind: SensorKind,
    timestamp: DateTime<Utc>,
    value: f64,
    #[serde(default = "iot")]
    source: Source,
}

fn iot() -> Source {
    Source::Iot
}

impl From<ReadingBody> for Reading {
    fn from(b: ReadingBody) -> Self {
        Reading {
            series_id: b.series_id,
            resource_path: b.resource_path,
            kind: b.kind,
            timestamp: b.timestamp,
            value: b.value,
            source: b.source,
            author: None,
        }
    }
}

/// One reading, or an array of them. A batch is answered item by item.
async fn readings(
    State(s): State<AppState>,
    MaybeUser(user): MaybeUser,
    ApiJson(body): ApiJson<Value>,
) -> ApiResult<Json<Value>> {
    let batch = body.is_array();
    let items: Vec<Value> = match body {
        Value::Array(items) => items,
        one => vec![one],
    };
    let platform = s.platform.clone();
    let results = blocking(move || {
        let at = now();
        Ok(items
            .into_iter()
            .map(|item| {
                let body: ReadingBody =
                    serde_json::from_value(item).map_err(|e| ApiError::bad_request(e.to_string()))?;
                platform
                    .ingestor
                    .ingest_reading(&body.into(), user.as_ref(), at)
                    .map_err(ApiError::from)
            })
            .collect::<Vec<_>>())
    })
    .await?;
    if !batch {
        let ack = results.into_iter().next().expect("one result")?;
        return Ok(Json(json!({ "ack": ack })));
    }
    let mut acks = Vec::new();
    let mut errors = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(ack) => acks.push(json!({ "index": index, "ack": ack })),
            Err(e) => errors.push(json!({ "index": index, "code": e.code, "message": e.message })),
        }
    }
    Ok(Json(json!({ "acks": acks, "errors": errors })))
}

#[derive(Deserialize)]
struct UploadParams {
    path: Option<String>,
    interval: Option<u32>,
    kind: Option<SensorKind>,
}

/// CSV upload into an existing series, or into a new one described by the
/// `path` and `interval` query parameters.
async fn upload(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    Path(series_id): Path<String>,
    Query(q): Query<UploadParams>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let csv = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("text/csv"));
    if !csv {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            "uploads must be sent as text/csv",
        ));
    }
    let meta = match s.platform.store.meta(&SeriesId::new(series_id.as_str())) {
        Some(mut m) => {
            if m.nominal_interval_s.is_none() {
                m.nominal_interval_s = q.interval;
            }
            m
        }
        None => {
            let path = q
                .path
                .ok_or_else(|| ApiError::bad_request("new series need a `path` query parameter"))?;
            let mut m = SeriesMeta::new(
                SeriesId::new(series_id),
                &path,
                q.kind.unwrap_or(SensorKind::EnergyKwh),
                Source::File,
            );
            m.nominal_interval_s = q.interval;
            m
        }
    };
    let platform = s.platform.clone();
    let report = blocking(move || Ok(platform.ingestor.ingest_file(&body, meta, &user, now())?)).await?;
    Ok(Json(json!({ "report": report })))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManualBody {
    Meter {
        series_id: SeriesId,
        date: NaiveDate,
        cumulative_kwh: f64,
    },
    Reading {
        resource_path: String,
        kind: SensorKind,
        #[serde(default)]
        timestamp: Option<DateTime<Utc>>,
        value: f64,
    },
}

/// Participatory readings and monthly meter totals.
async fn manual(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    ApiJson(body): ApiJson<ManualBody>,
) -> ApiResult<Json<Value>> {
    let platform = s.platform.clone();
    let ack = blocking(move || {
        let at = now();
        Ok(match body {
            ManualBody::Meter {
                series_id,
                date,
                cumulative_kwh,
            } => platform
                .ingestor
                .ingest_manual_monthly(&series_id, date, cumulative_kwh, &user, at)?,
            ManualBody::Reading {
                resource_path,
                kind,
                timestamp,
                value,
            } => {
                let r = Reading::manual(&resource_path, kind, timestamp.unwrap_or(at), value);
                platform.ingestor.ingest_reading(&r, Some(&user), at)?
            }
        })
    })
    .await?;
    Ok(Json(json!({ "ack": ack })))
}

#[derive(Deserialize)]
struct SeriesFilter {
    path: Option<String>,
    kind: Option<SensorKind>,
}

async fn list_series(
    State(s): State<AppState>,
    _: AuthUser,
    Query(q): Query<SeriesFilter>,
) -> ApiResult<Json<Vec<SeriesMeta>>> {
    let prefix = match &q.path {
        Some(p) => {
            let tree = s.platform.tree.load();
            let node = tree.resolve_path(p).map_err(|e| ApiError::not_found(e.to_string()))?;
            tree.canonical_path(node)
        }
        None => String::new(),
    };
    Ok(Json(
        s.platform
            .store
            .all_series()
            .into_iter()
            .filter(|m| prefix.is_empty() || path_covers(&prefix, &m.resource_path))
            .filter(|m| q.kind.is_none_or(|k| k == m.kind))
            .collect(),
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesBody {
    series_id: SeriesId,
    resource_path: String,
    kind: SensorKind,
    #[serde(default = "manual_source")]
    source: Source,
    #[serde(default)]
    nominal_interval_s: Option<u32>,
    #[serde(default)]
    cumulative: bool,
}

fn manual_source() -> Source {
    Source::Manual
}

async fn register_series(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    ApiJson(b): ApiJson<SeriesBody>,
) -> ApiResult<(StatusCode, Json<SeriesMeta>)> {
    let mut meta = SeriesMeta::new(b.series_id, &b.resource_path, b.kind, b.source);
    meta.nominal_interval_s = b.nominal_interval_s;
    meta.cumulative = b.cumulative;
    let platform = s.platform.clone();
    let meta = blocking(move || Ok(platform.ingestor.register_series(meta, &user)?)).await?;
    Ok((StatusCode::CREATED, Json(meta)))
}

#[derive(Deserialize)]
struct RangeParams {
    from: DateTime<Utc>,
    to: DateTime<Utc>,
}

async fn series_range(
    State(s): State<AppState>,
    _: AuthUser,
    Path(id): Path<String>,
    Query(q): Query<RangeParams>,
) -> ApiResult<Json<Value>> {
    let meta = series_meta(&s.platform, &id)?;
    let points = s.platform.store.query_range(&meta.series_id, q.from, q.to)?;
    Ok(Json(serde_json::to_value(points).expect("points serialize")))
}

#[derive(Deserialize)]
struct AggParams {
    scale: String,
    agg: Option<String>,
    from: DateTime<Utc>,
    to: DateTime<Utc>,
}

async fn series_agg(
    State(s): State<AppState>,
    _: AuthUser,
    Path(id): Path<String>,
    Query(q): Query<AggParams>,
) -> ApiResult<Json<Value>> {
    let meta = series_meta(&s.platform, &id)?;
    let scale: Timescale = parse("scale", &q.scale)?;
    let agg = match &q.agg {
        Some(a) => parse::<Agg>("agg", a)?,
        None => Agg::default_for(meta.kind),
    };
    let tz = building_tz(&s.platform.tree.load(), &meta.resource_path);
    let buckets = s
        .platform
        .store
        .aggregate(&meta.series_id, scale, agg, q.from, q.to, tz)?;
    Ok(Json(serde_json::to_value(buckets).expect("buckets serialize")))
}

#[derive(Deserialize)]
struct AnomalyQuery {
    from: DateTime<Utc>,
    to: DateTime<Utc>,
    weeks: Option<u32>,
    threshold: Option<f64>,
}

async fn series_anomalies(
    State(s): State<AppState>,
    _: AuthUser,
    Path(id): Path<String>,
    Query(q): Query<AnomalyQuery>,
) -> ApiResult<Json<Value>> {
    let meta = series_meta(&s.platform, &id)?;
    let mut params = AnomalyParams::default();
    if let Some(w) = q.weeks {
        params.baseline_weeks = w;
    }
    if let Some(t) = q.threshold {
        params.threshold = t;
    }
    if params.baseline_weeks == 0 || params.threshold.is_nan() || params.threshold <= 0.0 {
        return Err(ApiError::bad_request("weeks and threshold must be positive"));
    }
    let history_from = q.from - Duration::weeks(i64::from(params.baseline_weeks));
    let points: Vec<(DateTime<Utc>, f64)> = s
        .platform
        .store
        .query_range(&meta.series_id, history_from, q.to)?
        .into_iter()
        .map(|p| (p.timestamp, p.value))
        .collect();
    let tz = building_tz(&s.platform.tree.load(), &meta.resource_path);
    let found = detect_anomalies(&meta.series_id, &points, q.from, q.to, tz, &params)?;
    Ok(Json(serde_json::to_value(found).expect("anomalies serialize")))
}

async fn resources(State(s): State<AppState>, _: AuthUser) -> Json<Value> {
    let tree = s.platform.tree.load();
    let nodes: Vec<Value> = tree
        .nodes()
        .map(|n| {
            json!({
                "id": n.id,
                "kind": n.kind,
                "name": n.name,
                "parent": n.parent,
                "path": tree.canonical_path(n),
                "metadata": n.metadata,
            })
        })
        .collect();
    Json(Value::Array(nodes))
}

/// Splits `{path}/rules[/{id}]`.
fn rules_route(rest: &str) -> ApiResult<(String, Option<RuleId>)> {
    let rest = rest.trim_end_matches('/');
    if let Some(path) = rest.strip_suffix("/rules") {
        return Ok((path.to_string(), None));
    }
    match rest.rsplit_once("/rules/") {
        Some((path, id)) if !id.contains('/') => Ok((path.to_string(), Some(RuleId::new(id)))),
        _ => Err(ApiError::not_found(format!("no such resource route `{rest}`"))),
    }
}

fn canonical(s: &AppState, path: &str) -> ApiResult<String> {
    let tree = s.platform.tree.load();
    let node = tree
        .resolve_path(path)
        .map_err(|e| ApiError::not_found(e.to_string()))?;
    Ok(tree.canonical_path(node))
}

fn rule_at(s: &AppState, path: &str, id: &RuleId) -> ApiResult<gaia_core::rules::Rule> {
    s.platform
        .engine
        .rule(id)
        .filter(|r| r.target == path)
        .ok_or_else(|| ApiError::not_found(format!("no rule `{id}` on {path}")))
}

async fn rules_get(State(s): State<AppState>, _: AuthUser, Path(rest): Path<String>) -> ApiResult<Json<Value>> {
    let (path, id) = rules_route(&rest)?;
    let path = canonical(&s, &path)?;
    match id {
        None => Ok(Json(
            serde_json::to_value(s.platform.engine.list_for(&path)?).expect("rules serialize"),
        )),
        Some(id) => Ok(Json(
            serde_json::to_value(rule_at(&s, &path, &id)?).expect("rule serializes"),
        )),
    }
}

async fn rules_put(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    Path(rest): Path<String>,
    ApiJson(body): ApiJson<RuleBody>,
) -> ApiResult<Json<Value>> {
    let (path, Some(id)) = rules_route(&rest)? else {
        return Err(ApiError::new(
            StatusCode::METHOD_NOT_ALLOWED,
            "method_not_allowed",
            "PUT needs a rule id",
        ));
    };
    let path = canonical(&s, &path)?;
    let engine = s.platform.engine.clone();
    let rule = body.into_rule(id, &path, &engine.defaults());
    let saved = blocking(move || Ok(engine.upsert_rule(rule, &user)?)).await?;
    Ok(Json(serde_json::to_value(saved).expect("rule serializes")))
}

async fn rules_delete(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    Path(rest): Path<String>,
) -> ApiResult<StatusCode> {
    let (path, Some(id)) = rules_route(&rest)? else {
        return Err(ApiError::new(
            StatusCode::METHOD_NOT_ALLOWED,
            "method_not_allowed",
            "DELETE needs a rule id",
        ));
    };
    let path = canonical(&s, &path)?;
    rule_at(&s, &path, &id)?;
    let engine = s.platform.engine.clone();
    blocking(move || Ok(engine.delete_rule(&id, &user)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct HistoryParams {
    scope: Option<String>,
    since: Option<DateTime<Utc>>,
    limit: Option<usize>,
}

const HISTORY_LIMIT: usize = 1000;

async fn notifications(
    State(s): State<AppState>,
    _: AuthUser,
    Query(q): Query<HistoryParams>,
) -> ApiResult<Json<Value>> {
    let limit = q.limit.unwrap_or(100).min(HISTORY_LIMIT);
    let log = s
        .platform
        .notifier
        .history(q.scope.as_deref().unwrap_or(""), q.since, limit)?;
    Ok(Json(serde_json::to_value(log).expect("notifications serialize")))
}

#[derive(Deserialize)]
struct StreamParams {
    scope: Option<String>,
    categories: Option<String>,
}

fn parse_categories(text: &str) -> ApiResult<BTreeSet<Category>> {
    text.split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|c| parse::<Category>("categories", c))
        .collect()
}

async fn notifications_ws(
    State(s): State<AppState>,
    _: AuthUser,
    Query(q): Query<StreamParams>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let categories = q.categories.as_deref().map(parse_categories).transpose()?;
    let sub = s
        .platform
        .notifier
        .subscribe(q.scope.as_deref().unwrap_or(""), categories)?;
    let platform = s.platform.clone();
    let shutdown = s.shutdown.clone();
    Ok(ws.on_upgrade(move |socket| stream_notifications(socket, sub, platform, shutdown)))
}

async fn stream_notifications(
    mut socket: WebSocket,
    mut sub: Subscription,
    platform: Arc<Platform>,
    mut shutdown: watch::Receiver<bool>,
) {
    let reason = loop {
        tokio::select! {
            next = sub.rx.recv() => match next {
                Some(n) => {
                    let text = serde_json::to_string(&n).expect("notification serializes");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        platform.notifier.unsubscribe(sub.id);
                        return;
                    }
                }
                // The notifier dropped us: either a full queue or shutdown.
                None => break if *shutdown.borrow() { "server shutting down" } else { "subscriber too slow" },
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => {
                    platform.notifier.unsubscribe(sub.id);
                    return;
                }
                Some(Ok(_)) => {}
            },
            _ = shutdown.changed() => break "server shutting down",
        }
    };
    platform.notifier.unsubscribe(sub.id);
    let code = if reason == "server shutting down" { 1001 } else { 1008 };
    let frame = CloseFrame {
        code,
        reason: reason.into(),
    };
    let _ = socket.send(Message::Close(Some(frame))).await;
}

#[derive(Deserialize)]
struct CompareParams {
    metric: Option<String>,
    period: String,
    baseline: Option<String>,
}

fn building_periods(s: &AppState, id: &str, period: &str, baseline: Option<&str>) -> ApiResult<(Period, Period)> {
    let tree = s.platform.tree.load();
    let tz = tree
        .get(&NodeId::new(id))
        .and_then(|b| b.metadata.as_ref())
        .map(|m| m.tz())
        .unwrap_or(chrono_tz::UTC);
    let period = Period::parse(period, tz)?;
    let baseline = match baseline {
        Some(b) => Period::parse(b, tz)?,
        None => period
            .shifted_year(-1)
            .ok_or_else(|| ApiError::bad_request("period has no counterpart a year earlier"))?,
    };
    Ok((period, baseline))
}

async fn building_compare(
    State(s): State<AppState>,
    _: AuthUser,
    Path(id): Path<String>,
    Query(q): Query<CompareParams>,
) -> ApiResult<Json<Value>> {
    let kind: SensorKind = parse("metric", q.metric.as_deref().unwrap_or("energy_kwh"))?;
    let (period, baseline) = building_periods(&s, &id, &q.period, q.baseline.as_deref())?;
    let tree = s.platform.tree.load();
    let result = compare_periods(&s.platform.store, &tree, &NodeId::new(id), kind, &period, &baseline)?;
    Ok(Json(serde_json::to_value(result).expect("comparison serializes")))
}

#[derive(Deserialize)]
struct PeerParams {
    period: Option<String>,
}

async fn building_peers(
    State(s): State<AppState>,
    _: AuthUser,
    Path(id): Path<String>,
    Query(q): Query<PeerParams>,
) -> ApiResult<Json<Value>> {
    let tree = s.platform.tree.load();
    let building = NodeId::new(id.as_str());
    let peers = peer_group(&tree, &building)?;
    let comparison = match &q.period {
        Some(p) => {
            let (period, _) = building_periods(&s, &id, p, Some(p))?;
            Some(compare_with_peers(&s.platform.store, &tree, &building, &period)?)
        }
        None => None,
    };
    Ok(Json(
        json!({ "building": building, "peers": peers, "comparison": comparison }),
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreditBody {
    period: String,
    baseline: Option<String>,
}

async fn facility_credit(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
    ApiJson(b): ApiJson<CreditBody>,
) -> ApiResult<Json<Value>> {
    let building = NodeId::new(id.as_str());
    {
        let tree = s.platform.tree.load();
        let node = tree
            .get(&building)
            .ok_or_else(|| ApiError::not_found(format!("unknown building `{id}`")))?;
        if !authorize(&user, Action::ConfigureFacility, &tree, node).is_allowed() {
            return Err(ApiError::forbidden(format!(
                "user `{}` may not credit points for {id}",
                user.id
            )));
        }
    }
    let (period, baseline) = building_periods(&s, &id, &b.period, b.baseline.as_deref())?;
    let platform = s.platform.clone();
    let credit = blocking(move || {
        let tree = platform.tree.load();
        Ok(platform
            .engagement
            .credit_facility_points(&platform.store, &tree, &building, &period, &baseline, now())?)
    })
    .await?;
    Ok(Json(serde_json::to_value(credit).expect("credit serializes")))
}

#[derive(Deserialize)]
struct BoardParams {
    scope: Option<String>,
}

async fn leaderboard(State(s): State<AppState>, _: AuthUser, Query(q): Query<BoardParams>) -> ApiResult<Json<Value>> {
    let scope: LeaderboardScope = parse("scope", q.scope.as_deref().unwrap_or("classes"))?;
    Ok(Json(
        serde_json::to_value(s.platform.engagement.leaderboard(scope)).expect("standings serialize"),
    ))
}

async fn complete_quest(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let platform = s.platform.clone();
    let student = user.id.clone();
    let quest = id.clone();
    let score = blocking(move || Ok(platform.engagement.award_points(&user, &quest, now())?)).await?;
    Ok(Json(json!({ "quest_id": id, "student_id": student, "score": score })))
}

#[derive(Deserialize)]
struct ClassParams {
    recent: Option<usize>,
}

async fn class_view(
    State(s): State<AppState>,
    _: AuthUser,
    Path(id): Path<String>,
    Query(q): Query<ClassParams>,
) -> ApiResult<Json<Value>> {
    let view = s.platform.engagement.class_view(&id, q.recent.unwrap_or(5))?;
    Ok(Json(serde_json::to_value(view).expect("class view serializes")))
}
