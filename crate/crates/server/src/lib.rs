//! JSON-over-HTTP front end for [`sati_core::session::SessionService`],
//! plus static serving of the web client bundle.
//!
//! Service calls can block on model providers, so every handler runs them
//! on the blocking pool.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use sati_core::analytics::DateWindow;
use sati_core::personalization::PersonalizeError;
use sati_core::providers::ProviderError;
use sati_core::reflection::{ReflectionError, ReflectionMode};
use sati_core::session::{Condition, InputChoices, ScriptKind, ServiceError, SessionService};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

#[derive(Clone)]
pub struct AppState {
    pub svc: Arc<SessionService>,
    pub api_key: Option<String>,
    /// Actually wait out the static condition's pseudo delay.
    pub apply_delay: bool,
}

impl AppState {
    pub fn new(svc: Arc<SessionService>) -> Self {
        Self { svc, api_key: None, apply_delay: false }
    }
}

pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownUser(_) | ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::BadState { .. } | ServiceError::ReflectionUnavailable(_) | ServiceError::ReflectionOpen => {
                StatusCode::CONFLICT
            }
            ServiceError::InvalidInput(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Personalize(p) => match p {
                PersonalizeError::InvalidInputs(_) | PersonalizeError::UnknownTechnique(_) => {
                    StatusCode::UNPROCESSABLE_ENTITY
                }
                PersonalizeError::OpenTranscript => StatusCode::CONFLICT,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::Reflection(r) => match r {
                ReflectionError::Closed | ReflectionError::AlreadyClosed | ReflectionError::TurnLimit(_) => {
                    StatusCode::CONFLICT
                }
                ReflectionError::EmptyMessage => StatusCode::UNPROCESSABLE_ENTITY,
                ReflectionError::Provider(_) => StatusCode::BAD_GATEWAY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::Provider(ProviderError::InvalidRequest(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Provider(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    F: FnOnce(&SessionService) -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    let svc = state.svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Deserialize)]
struct NewUser {
    display_name: String,
    reminder_time: Option<String>,
    #[serde(default)]
    utc_offset_minutes: i32,
}

async fn create_user(State(s): State<AppState>, Json(body): Json<NewUser>) -> ApiResult<impl IntoResponse> {
    let reminder = body
        .reminder_time
        .as_deref()
        .map(|t| NaiveTime::parse_from_str(t, "%H:%M").map_err(|_| bad_request(format!("bad reminder_time `{t}`"))))
        .transpose()?;
    let user = blocking(&s, move |svc| svc.create_user(&body.display_name, reminder, body.utc_offset_minutes)).await?;
    Ok((StatusCode::CREATED, Json(user)))
}

#[derive(Deserialize)]
struct ReminderQuery {
    now: Option<DateTime<Utc>>,
}

async fn next_reminder(
    State(s): State<AppState>,
    Path(user_id): Path<String>,
    Query(q): Query<ReminderQuery>,
) -> ApiResult<impl IntoResponse> {
    let now = q.now.unwrap_or_else(Utc::now);
    let next = blocking(&s, move |svc| svc.next_reminder(&user_id, now)).await?;
    Ok(Json(json!({ "next": next })))
}

#[derive(Deserialize)]
struct NewSession {
    user_id: String,
    condition: Option<Condition>,
}

async fn create_session(State(s): State<AppState>, Json(body): Json<NewSession>) -> ApiResult<impl IntoResponse> {
    let r = blocking(&s, move |svc| svc.create_session(&body.user_id, body.condition)).await?;
    Ok((StatusCode::CREATED, Json(r)))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| svc.session(&id)).await?))
}

async fn set_inputs(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<InputChoices>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| svc.set_inputs(&id, body)).await?))
}

#[derive(Deserialize)]
struct MenuQuery {
    user_id: String,
}

async fn menu_order(State(s): State<AppState>, Query(q): Query<MenuQuery>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| Ok(svc.menu_order(&q.user_id))).await?))
}

#[derive(Deserialize)]
struct Turn {
    message: String,
    mode: ReflectionMode,
}

async fn reflection(
    State(s): State<AppState>,
    Path((id, action)): Path<(String, String)>,
    body: Option<Json<Turn>>,
) -> ApiResult<Response> {
    let out = match action.as_str() {
        "open" => {
            let (message, transcript) = blocking(&s, move |svc| svc.open_reflection(&id)).await?;
            Json(json!({ "message": message, "transcript": transcript })).into_response()
        }
        "turn" => {
            let Some(Json(turn)) = body else {
                return Err(bad_request("turn needs {\"message\", \"mode\"}"));
            };
            Json(blocking(&s, move |svc| svc.reflect_turn(&id, &turn.message, turn.mode)).await?).into_response()
        }
        "close" => Json(blocking(&s, move |svc| svc.close_reflection(&id)).await?).into_response(),
        "skip" => Json(blocking(&s, move |svc| svc.skip_reflection(&id)).await?).into_response(),
        other => return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown reflection action `{other}`"))),
    };
    Ok(out)
}

async fn generate(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let apply_delay = s.apply_delay;
    let out = blocking(&s, move |svc| svc.generate(&id)).await?;
    if apply_delay && out.delivered.kind == ScriptKind::Template {
        if let Some(ms) = out.delivered.pseudo_delay_ms {
            tokio::time::sleep(Duration::from_millis(ms)).await;
        }
    }
    Ok(Json(out))
}

async fn cards(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| svc.cards(&id)).await?))
}

async fn audio(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let clip = blocking(&s, move |svc| svc.audio(&id)).await?;
    Response::builder()
        .header(header::CONTENT_TYPE, clip.mime.as_str())
        .header("x-duration-seconds", format!("{:.3}", clip.duration_s))
        .body(Body::from(clip.bytes))
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn finish(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| svc.finish_playback(&id)).await?))
}

#[derive(Deserialize)]
struct FeedbackBody {
    rating: u8,
    #[serde(default)]
    text: String,
}

async fn feedback(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<FeedbackBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| svc.submit_feedback(&id, body.rating, &body.text)).await?))
}

async fn abandon(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&s, move |svc| svc.abandon(&id)).await?))
}

#[derive(Deserialize)]
struct CheckinBody {
    user_id: String,
    date: NaiveDate,
    sleep: u8,
    mood: u8,
    focus: u8,
}

async fn checkin(State(s): State<AppState>, Json(b): Json<CheckinBody>) -> ApiResult<impl IntoResponse> {
    let c = blocking(&s, move |svc| svc.record_checkin(&b.user_id, b.date, b.sleep, b.mood, b.focus)).await?;
    Ok((StatusCode::CREATED, Json(c)))
}

#[derive(Deserialize)]
struct EngagementQuery {
    from: NaiveDate,
    /// Exclusive end date.
    to: NaiveDate,
    condition: Option<Condition>,
}

async fn engagement(State(s): State<AppState>, Query(q): Query<EngagementQuery>) -> ApiResult<impl IntoResponse> {
    let window = DateWindow::new(q.from, q.to).map_err(|e| bad_request(e.to_string()))?;
    Ok(Json(blocking(&s, move |svc| svc.engagement(window, q.condition)).await?))
}

async fn concepts(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.svc.kb().concepts().to_vec())
}

async fn health() -> impl IntoResponse {
    Json(json!({ "status": "ok" }))
}

async fn require_key(State(s): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    let Some(expected) = &s.api_key else {
        return next.run(req).await;
    };
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let plain = headers.get("x-api-key").and_then(|v| v.to_str().ok());
    if bearer == Some(expected.as_str()) || plain == Some(expected.as_str()) {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or wrong API key".into()).into_response()
    }
}

/// API routes, with the optional API key check applied to all of them.
pub fn api(state: AppState) -> Router {
    Router::new()
        .route("/users", post(create_user))
        .route("/users/{id}/next-reminder", get(next_reminder))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/inputs", put(set_inputs))
        .route("/sessions/{id}/reflection/{action}", post(reflection))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/cards", get(cards))
        .route("/sessions/{id}/audio", get(audio))
        .route("/sessions/{id}/finish", post(finish))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/menu-order", get(menu_order))
        .route("/checkins", post(checkin))
        .route("/analytics/engagement", get(engagement))
        .route("/concepts", get(concepts))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_key))
        .route("/health", get(health))
        .with_state(state)
}

/// API plus, when given, the client bundle served from `static_dir` with
/// `index.html` as the fallback for client-side routes.
pub fn app(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let router = api(state);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            router.fallback_service(ServeDir::new(dir).not_found_service(ServeFile::new(index)))
        }
        None => router,
    }
    .layer(tower_http::trace::TraceLayer::new_for_http())
}

/// Abandon idle sessions once a minute until the process exits.
pub fn spawn_idle_sweeper(svc: Arc<SessionService>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let svc = svc.clone();
            match tokio::task::spawn_blocking(move || svc.sweep_idle()).await {
                Ok(Ok(ids)) if !ids.is_empty() => tracing::info!(count = ids.len(), "abandoned idle sessions"),
                Ok(Err(e)) => tracing::warn!(error = %e, "idle sweep failed"),
                _ => {}
            }
        }
    })
}
