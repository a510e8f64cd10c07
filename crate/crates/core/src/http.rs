//! Shared plumbing for the REST servers (axum) and their blocking clients.

use std::net::SocketAddr;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::oneshot;
use url::Url;

use crate::error::{ErrorBody, FabricError, Result};

/// Request bodies up to the inline-input cap plus base64 and JSON overhead.
pub const BODY_LIMIT: usize = 128 << 20;

pub(crate) struct ApiError(pub FabricError);

impl From<FabricError> for ApiError {
    fn from(e: FabricError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.to_body())).into_response()
    }
}

pub(crate) type ApiResult<T> = std::result::Result<T, ApiError>;

/// Runs store or broker work off the async executor.
pub(crate) async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(FabricError::Internal(format!("worker task failed: {e}")))),
    }
}

/// A server running on its own runtime thread; dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `router` in the background.
pub fn spawn_server(router: axum::Router, addr: SocketAddr) -> Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| FabricError::Internal(format!("runtime: {e}")))?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(addr))
        .map_err(|e| FabricError::Unavailable(format!("bind {addr}: {e}")))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("http-{addr}"))
        .spawn(move || {
            rt.block_on(async move {
                let served = axum::serve(listener, router).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = served.await {
                    tracing::error!(error = %e, "server stopped");
                }
            });
            rt.shutdown_timeout(Duration::from_secs(1));
        })
        .map_err(|e| FabricError::Internal(format!("spawn server thread: {e}")))?;
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves in the foreground until interrupted (SIGINT or SIGTERM).
pub fn serve_until_interrupted(router: axum::Router, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| FabricError::Internal(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| FabricError::Unavailable(format!("bind {addr}: {e}")))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, router).with_graceful_shutdown(shutdown_signal()).await?;
        Ok(())
    })
}

pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

const PATH_SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~');

pub fn encode_segment(s: &str) -> String {
    utf8_percent_encode(s, PATH_SEGMENT).to_string()
}

/// Blocking JSON client that maps error bodies back to [`FabricError`].
#[derive(Debug, Clone)]
pub struct HttpClient {
    base: Url,
    inner: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(base: &str) -> Result<Self> {
        let mut base = Url::parse(base).map_err(|e| FabricError::validation(format!("bad URL {base:?}: {e}")))?;
        if !matches!(base.scheme(), "http" | "https") {
            return Err(FabricError::validation(format!("URL {base} must be http or https")));
        }
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        let inner = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| FabricError::Transport(e.to_string()))?;
        Ok(HttpClient { base, inner })
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    /// `path` is relative and already percent-encoded.
    pub fn url(&self, path: &str) -> Result<Url> {
        self.base.join(path).map_err(|e| FabricError::Internal(format!("join {path}: {e}")))
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<reqwest::blocking::Response> {
        let resp = req.send().map_err(|e| FabricError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| FabricError::Transport(e.to_string()))?;
        Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => FabricError::from_body(body),
            Err(_) => {
                let text = String::from_utf8_lossy(&bytes).into_owned();
                match status.as_u16() {
                    404 => FabricError::NotFound(text),
                    409 => FabricError::Conflict(text),
                    410 => FabricError::Gone(text),
                    413 | 422 => FabricError::validation(text),
                    403 => FabricError::Forbidden(text),
                    503 => FabricError::Unavailable(text),
                    _ => FabricError::Transport(format!("HTTP {status}: {text}")),
                }
            }
        })
    }

    fn json<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T> {
        resp.json().map_err(|e| FabricError::Transport(format!("response body: {e}")))
    }

    pub fn get_json<T: DeserializeOwned>(&self, url: Url) -> Result<T> {
        Self::json(self.send(self.inner.get(url))?)
    }

    pub fn get_bytes(&self, url: Url) -> Result<Vec<u8>> {
        let resp = self.send(self.inner.get(url))?;
        Ok(resp.bytes().map_err(|e| FabricError::Transport(e.to_string()))?.to_vec())
    }

    pub fn post_json<B: Serialize + ?Sized, T: DeserializeOwned>(&self, url: Url, body: &B) -> Result<T> {
        Self::json(self.send(self.inner.post(url).json(body))?)
    }

    pub fn delete_json<T: DeserializeOwned>(&self, url: Url) -> Result<T> {
        Self::json(self.send(self.inner.delete(url))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_are_escaped() {
        assert_eq!(encode_segment("local-doi:10.99999/ab12"), "local-doi%3A10.99999%2Fab12");
    }

    #[test]
    fn base_url_gets_trailing_slash() {
        let c = HttpClient::new("http://127.0.0.1:9/api").unwrap();
        assert_eq!(c.url("entries/x").unwrap().as_str(), "http://127.0.0.1:9/api/entries/x");
        assert!(HttpClient::new("ftp://x").is_err());
        assert!(HttpClient::new("not a url").is_err());
    }
}
