//! HTTP+JSON API over the curation store.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use nmid_core::curation::{CurationError, CurationStore, NewItem, Status, Verdict};
use nmid_core::gateway::{MIME_JPEG, MIME_PNG};
use nmid_core::io::DatasetManifest;

pub struct AppState {
    pub store: CurationStore,
    /// Train records the augmented manifest extends; empty when mining has not run.
    pub train: DatasetManifest,
    pub token: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    pub cors_origin: Option<String>,
    pub ui_dir: Option<PathBuf>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<CurationError> for ApiError {
    fn from(e: CurationError) -> Self {
        let status = match &e {
            CurationError::UnknownItem(_) => StatusCode::NOT_FOUND,
            CurationError::AlreadyDecided(_) => StatusCode::CONFLICT,
            CurationError::Malformed(_) | CurationError::Transcript(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

#[derive(Deserialize)]
struct QueueParams {
    status: Option<String>,
}

async fn queue(State(s): State<Arc<AppState>>, Query(q): Query<QueueParams>) -> Result<Response, ApiError> {
    let status = match q.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some(v) => Some(v.parse::<Status>().map_err(bad_request)?),
    };
    Ok(Json(s.store.list(status)).into_response())
}

async fn item(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let it = s.store.get(&id).ok_or(ApiError(StatusCode::NOT_FOUND, format!("unknown item {id}")))?;
    Ok(Json(it).into_response())
}

async fn enqueue(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let item: NewItem = serde_json::from_slice(&body).map_err(bad_request)?;
    let (it, created) = s.store.enqueue(item)?;
    let code = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((code, Json(it)).into_response())
}

#[derive(Deserialize)]
struct DecisionBody {
    verdict: Verdict,
    #[serde(default)]
    note: String,
}

async fn decide(State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let d: DecisionBody = serde_json::from_slice(&body).map_err(bad_request)?;
    Ok(Json(s.store.decide(&id, d.verdict, &d.note)?).into_response())
}

async fn augmented(State(s): State<Arc<AppState>>) -> Result<Response, ApiError> {
    Ok(Json(s.store.augmented_manifest(&s.train)?).into_response())
}

async fn asset(State(s): State<Arc<AppState>>, Path(digest): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("unknown asset {digest}"));
    if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(not_found());
    }
    let path = s.store.asset_path(&digest).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    let mime = if bytes.starts_with(&[0xFF, 0xD8]) { MIME_JPEG } else { MIME_PNG };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn auth(State(s): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(token) = &s.token else {
        return next.run(req).await;
    };
    let header_ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token);
    // <img> tags cannot send headers, so assets also accept ?token=
    let query_ok =
        req.uri().query().is_some_and(|q| q.split('&').any(|kv| kv.strip_prefix("token=").is_some_and(|t| t == token)));
    if header_ok || query_ok || req.method() == Method::OPTIONS {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response()
    }
}

pub fn router(state: Arc<AppState>, opts: &ServerOptions) -> Router {
    let origin = match &opts.cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]);
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items", post(enqueue))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/decision", post(decide))
        .route("/api/manifest/augmented", get(augmented))
        .route("/assets/{digest}", get(asset))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state);
    let app = match &opts.ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

/// Serves until Ctrl-C.
pub async fn serve(bind: &str, state: Arc<AppState>, opts: ServerOptions) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("review API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, &opts))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
