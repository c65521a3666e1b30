//! JSON API over the review queue, consumed by the review UI.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use counsel_core::adjudication::{AdjudicationError, Decision};
use counsel_core::review::{ReviewError, ReviewService, TaskQuery};

pub struct AppState {
    service: Mutex<ReviewService>,
    token: Option<String>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::Adjudication(AdjudicationError::UnknownTask(_)) => StatusCode::NOT_FOUND,
            ReviewError::Adjudication(AdjudicationError::WrongDecisionKind { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::BadQuery(_) => StatusCode::BAD_REQUEST,
            ReviewError::NotReady(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult = Result<Response, ApiError>;

fn with_service<T: serde::Serialize>(
    state: &AppState,
    f: impl FnOnce(&mut ReviewService) -> Result<T, ReviewError>,
) -> ApiResult {
    let mut svc = state.service.lock().map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "state poisoned".into()))?;
    // The pipeline may have enqueued tasks since the last request.
    svc.reload()?;
    Ok(Json(f(&mut svc)?).into_response())
}

async fn list_tasks(State(state): State<Arc<AppState>>, Query(q): Query<TaskQuery>) -> ApiResult {
    with_service(&state, |svc| svc.list(&q))
}

async fn get_task(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    with_service(&state, |svc| {
        svc.get(&id).ok_or(ReviewError::Adjudication(AdjudicationError::UnknownTask(id.clone())))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub decision: String,
    #[serde(default)]
    pub reviewer_note: String,
}

async fn resolve_task(State(state): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<Resolution>) -> ApiResult {
    let decision: Decision = body
        .decision
        .parse()
        .map_err(|e: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    with_service(&state, |svc| svc.resolve(&id, decision, &body.reviewer_note))
}

async fn cohort_status(State(state): State<Arc<AppState>>) -> ApiResult {
    with_service(&state, |svc| svc.cohort_status())
}

async fn audit_aggregates(State(state): State<Arc<AppState>>) -> ApiResult {
    with_service(&state, |svc| svc.audit_aggregates())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn events(State(state): State<Arc<AppState>>, Query(q): Query<EventsQuery>) -> ApiResult {
    with_service(&state, |svc| Ok(svc.events(q.since)))
}

async fn health() -> &'static str {
    "ok"
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

pub fn router(service: ReviewService, token: Option<String>, static_dir: Option<PathBuf>) -> Router {
    let state = Arc::new(AppState {
        service: Mutex::new(service),
        token,
    });
    let api = Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/resolution", post(resolve_task))
        .route("/cohort/status", get(cohort_status))
        .route("/audit/aggregates", get(audit_aggregates))
        .route("/events", get(events))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(health))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(addr: &str, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review server listening on {}", listener.local_addr()?);
    eprintln!("review server listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
