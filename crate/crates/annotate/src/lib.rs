//! HTTP front of the annotation queue.
//!
//! | method | path | success | errors |
//! |---|---|---|---|
//! | GET | `/tasks/next?kind=K` | 200 task, 204 when empty | 400 bad kind |
//! | POST | `/tasks/{id}/annotation` | 200 `{status}` | 404, 409, 422 |
//! | POST | `/tasks/{id}/lease` | 200 renews the lease | 404, 409 |
//! | POST | `/tokenize` | 200 `{count}` | 400 non-UTF-8 or malformed body |
//! | GET | `/health` | 200 | |
//!
//! Every route except `/health` requires `Authorization: Bearer <token>` when
//! a token is configured. Responses carry permissive CORS headers so a browser
//! frontend on another origin can call the service.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ilf_core::annotate::{AnnotationQueue, SubmitError, SubmitOutcome, TaskKind};
use ilf_core::config::ServeConfig;
use ilf_core::tokenize::count_tokens;

#[derive(Clone)]
pub struct AppState {
    pub queue: Arc<AnnotationQueue>,
    /// Required bearer token; `None` disables auth.
    pub token: Option<String>,
}

impl AppState {
    pub fn new(queue: AnnotationQueue, token: Option<String>) -> Self {
        AppState {
            queue: Arc::new(queue),
            token,
        }
    }

    /// Queue over `run_dir`, lease length and token taken from `serve`.
    pub fn from_run_dir(run_dir: &Path, serve: &ServeConfig, token_budget: usize) -> ilf_core::Result<Self> {
        let token = match &serve.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ilf_core::Error::Config(format!(
                    "environment variable {var} holding the bearer token is not set"
                ))
            })?),
            None => None,
        };
        let lease = Duration::from_secs(serve.lease_minutes.saturating_mul(60));
        let queue = AnnotationQueue::from_run_dir(run_dir, lease, token_budget)?;
        Ok(AppState::new(queue, token))
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn submit_error(e: SubmitError) -> Response {
    let status = match &e {
        SubmitError::NotFound(_) => StatusCode::NOT_FOUND,
        SubmitError::NotLeased(_) => StatusCode::CONFLICT,
        SubmitError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
        SubmitError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e.to_string())
}

#[derive(Deserialize)]
struct NextQuery {
    kind: Option<String>,
}

async fn next_task(State(app): State<AppState>, Query(q): Query<NextQuery>) -> Response {
    let Some(kind) = q.kind else {
        return error(StatusCode::BAD_REQUEST, "missing `kind` query parameter");
    };
    let kind: TaskKind = match kind.parse() {
        Ok(k) => k,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("{e}")),
    };
    let queue = app.queue.clone();
    match tokio::task::spawn_blocking(move || queue.lease_next(kind)).await {
        Ok(Some(task)) => Json(task).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Serialize)]
struct SubmitResponse {
    task_id: String,
    status: SubmitOutcome,
}

async fn submit(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let body: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("body is not JSON: {e}")),
    };
    let queue = app.queue.clone();
    let task_id = id.clone();
    match tokio::task::spawn_blocking(move || queue.submit(&task_id, &body)).await {
        Ok(Ok(status)) => Json(SubmitResponse { task_id: id, status }).into_response(),
        Ok(Err(e)) => submit_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn renew(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match app.queue.renew(&id) {
        Ok(()) => Json(json!({ "task_id": id, "status": "leased" })).into_response(),
        Err(e) => submit_error(e),
    }
}

#[derive(Deserialize)]
struct TokenizeBody {
    text: String,
}

async fn tokenize(body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return error(StatusCode::BAD_REQUEST, "body is not valid UTF-8"),
    };
    match serde_json::from_str::<TokenizeBody>(text) {
        Ok(b) => Json(json!({ "count": count_tokens(&b.text) })).into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, format!("expected {{\"text\": string}}: {e}")),
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn cors(request: Request, next: Next) -> Response {
    let mut response = if request.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(request).await
    };
    let headers = response.headers_mut();
    headers.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    headers.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("authorization, content-type"),
    );
    headers.insert(
        header::ACCESS_CONTROL_ALLOW_METHODS,
        HeaderValue::from_static("GET, POST, OPTIONS"),
    );
    response
}

async fn auth(State(app): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    next.run(request).await
}

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}/annotation", post(submit))
        .route("/tasks/{id}/lease", post(renew))
        .route("/tokenize", post(tokenize))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .with_state(state)
        .layer(middleware::from_fn(cors))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
