//! HTTP front end of a [`Store`].

use std::io;
use std::net::SocketAddr;
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::store::{Kind, Published, Store, StoreError};

/// Response header carrying the SHA-256 of a fetched payload.
pub const DIGEST_HEADER: &str = "x-content-digest";
/// Request header naming the publisher.
pub const PUBLISHER_HEADER: &str = "x-publisher";

/// Body of a 409 response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictBody {
    pub error: String,
    pub existing_digest: String,
    pub attempted_digest: String,
}

/// Body of every other error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub errors: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct QueryParams {
    prefix: Option<String>,
    tag: Option<String>,
}

fn error(status: StatusCode, message: String, errors: Vec<String>) -> Response {
    (status, Json(ErrorBody { error: message, errors })).into_response()
}

fn store_error(e: StoreError) -> Response {
    match e {
        StoreError::Conflict { ref existing, ref attempted, .. } => {
            let body = ConflictBody {
                error: e.to_string(),
                existing_digest: existing.clone(),
                attempted_digest: attempted.clone(),
            };
            (StatusCode::CONFLICT, Json(body)).into_response()
        }
        StoreError::Validation(errors) => error(StatusCode::BAD_REQUEST, "validation failed".into(), errors),
        e @ (StoreError::BadName(_) | StoreError::BadVersion { .. }) => {
            error(StatusCode::BAD_REQUEST, e.to_string(), vec![])
        }
        e @ StoreError::NotFound { .. } => error(StatusCode::NOT_FOUND, e.to_string(), vec![]),
        e @ (StoreError::Integrity { .. } | StoreError::Io(_)) => {
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), vec![])
        }
    }
}

fn unknown_collection(segment: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("no collection `{segment}`"), vec![])
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f).await.map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), vec![]))
}

async fn put_record(
    State(store): State<Store>,
    Path((collection, name, version)): Path<(String, String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let Some(kind) = Kind::from_plural(&collection) else {
        return unknown_collection(&collection);
    };
    let publisher = headers.get(PUBLISHER_HEADER).and_then(|v| v.to_str().ok()).unwrap_or_default().to_owned();
    match blocking(move || store.publish(kind, &name, &version, &body, &publisher)).await {
        Ok(Ok(Published::Created(meta))) => (StatusCode::CREATED, Json(meta)).into_response(),
        Ok(Ok(Published::Existing(meta))) => (StatusCode::OK, Json(meta)).into_response(),
        Ok(Err(e)) => store_error(e),
        Err(r) => r,
    }
}

async fn get_record(
    State(store): State<Store>,
    Path((collection, name, version)): Path<(String, String, String)>,
) -> Response {
    let Some(kind) = Kind::from_plural(&collection) else {
        return unknown_collection(&collection);
    };
    match blocking(move || store.fetch(kind, &name, &version)).await {
        Ok(Ok(record)) => {
            let mut response = record.payload.into_response();
            let h = response.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
            h.insert(DIGEST_HEADER, HeaderValue::from_str(&record.meta.digest).expect("hex is a valid header"));
            response
        }
        Ok(Err(e)) => store_error(e),
        Err(r) => r,
    }
}

async fn get_versions(State(store): State<Store>, Path((collection, name)): Path<(String, String)>) -> Response {
    let Some(kind) = Kind::from_plural(&collection) else {
        return unknown_collection(&collection);
    };
    match blocking(move || store.versions(kind, &name)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => store_error(e),
        Err(r) => r,
    }
}

async fn get_query(
    State(store): State<Store>,
    Path(collection): Path<String>,
    Query(q): Query<QueryParams>,
) -> Response {
    let Some(kind) = Kind::from_plural(&collection) else {
        return unknown_collection(&collection);
    };
    match blocking(move || store.query(kind, q.prefix.as_deref(), q.tag.as_deref())).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => store_error(e),
        Err(r) => r,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

pub fn router(store: Store) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/{collection}", get(get_query))
        .route("/v1/{collection}/{name}", get(get_versions))
        .route("/v1/{collection}/{name}/{version}", get(get_record).put(put_record))
        .with_state(store)
}

/// Serve until the process exits.
pub async fn serve(listener: TcpListener, store: Store) -> io::Result<()> {
    axum::serve(listener, router(store)).await
}

/// A server running on its own thread and runtime; stops when dropped.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn start(store: Store, addr: SocketAddr) -> io::Result<ServerHandle> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            runtime.block_on(async move {
                axum::serve(listener, router(store))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        });
        Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
