//! Socket transport for the core services: an axum front end that hands
//! each request to a [`Service`], and a blocking HTTP client implementing
//! [`HttpFetcher`].

use std::collections::HashMap;
use std::io::{self, Read};
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::Request;
use axum::response::Response;
use parking_lot::Mutex;
use tokio::sync::oneshot;
use wlcg_core::clock::SharedClock;
use wlcg_core::guard::{
    DirectoryBackend, Guard, MemoryBackend, ResourceConfig, StorageBackend, StorageService,
};
use wlcg_core::harness::Network;
use wlcg_core::http::{HttpFetcher, HttpRequest, HttpResponse, Service, TransportError};
use wlcg_core::issuer::ConfigError;
use wlcg_core::trust::{TrustConfig, TrustStore};

/// Largest request body accepted.
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

async fn dispatch(service: Arc<dyn Service>, request: Request) -> Response {
    let (parts, body) = request.into_parts();
    let body = match to_bytes(body, MAX_BODY_BYTES).await {
        Ok(b) => b.to_vec(),
        Err(_) => {
            return Response::builder()
                .status(http::StatusCode::PAYLOAD_TOO_LARGE)
                .body(Body::empty())
                .expect("static response");
        }
    };
    let request = HttpRequest::from_parts(parts, body);
    // Handlers block (password hashing, discovery fetches), so keep them
    // off the async workers.
    let response = tokio::task::spawn_blocking(move || service.handle(request)).await;
    match response {
        Ok(r) => r.map(Body::from),
        Err(_) => Response::builder()
            .status(http::StatusCode::INTERNAL_SERVER_ERROR)
            .body(Body::empty())
            .expect("static response"),
    }
}

fn router(service: Arc<dyn Service>) -> axum::Router {
    axum::Router::new().fallback(move |request: Request| dispatch(service.clone(), request))
}

fn runtime() -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

async fn run(
    listener: TcpListener,
    service: Arc<dyn Service>,
    stop: Option<oneshot::Receiver<()>>,
) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    let listener = tokio::net::TcpListener::from_std(listener)?;
    let server = axum::serve(listener, router(service));
    match stop {
        Some(rx) => {
            server
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        }
        None => server.await,
    }
}

/// Serves `service` on `listener` until the process exits.
pub fn serve_forever(listener: TcpListener, service: Arc<dyn Service>) -> io::Result<()> {
    runtime()?.block_on(run(listener, service, None))
}

/// A server running on a background thread. Stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn spawn(listener: TcpListener, service: Arc<dyn Service>) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let rt = runtime()?;
        let (tx, rx) = oneshot::channel();
        let thread = std::thread::Builder::new()
            .name(format!("serve-{addr}"))
            .spawn(move || rt.block_on(run(listener, service, Some(rx))))?;
        Ok(Self {
            addr,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop_and_join() {
            tracing::warn!(addr = %self.addr, "server stopped with error: {e}");
        }
    }
}

/// Blocking HTTP client. Redirects are returned, not followed.
#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::new(Duration::from_secs(10))
    }
}

impl HttpClient {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().redirects(0).timeout(timeout).build(),
        }
    }
}

fn convert(url: &str, response: ureq::Response) -> Result<HttpResponse, TransportError> {
    let mut builder = http::Response::builder().status(response.status());
    for name in response.headers_names() {
        for value in response.all(&name) {
            builder = builder.header(name.as_str(), value);
        }
    }
    let mut body = Vec::new();
    response
        .into_reader()
        .take(MAX_BODY_BYTES as u64)
        .read_to_end(&mut body)
        .map_err(|e| failed(url, e))?;
    builder.body(body).map_err(|e| failed(url, e))
}

fn failed(url: &str, reason: impl ToString) -> TransportError {
    TransportError::Failed {
        url: url.to_string(),
        reason: reason.to_string(),
    }
}

impl HttpFetcher for HttpClient {
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        let url = request.uri().to_string();
        if request.uri().scheme().is_none() {
            return Err(TransportError::InvalidUrl(url));
        }
        let mut call = self.agent.request(request.method().as_str(), &url);
        for (name, value) in request.headers() {
            let value = value.to_str().map_err(|e| failed(&url, e))?;
            call = call.set(name.as_str(), value);
        }
        match call.send_bytes(request.body()) {
            Ok(r) | Err(ureq::Error::Status(_, r)) => convert(&url, r),
            Err(e) => Err(failed(&url, e)),
        }
    }
}

/// Real sockets on 127.0.0.1: each endpoint reserves a port, and mounting
/// starts a server on it.
#[derive(Default)]
pub struct SocketNetwork {
    client: HttpClient,
    reserved: Mutex<HashMap<String, TcpListener>>,
    servers: Mutex<Vec<ServerHandle>>,
}

impl SocketNetwork {
    pub fn new() -> Self {
        Self::default()
    }
}

impl HttpFetcher for SocketNetwork {
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        self.client.fetch(request)
    }
}

impl Network for SocketNetwork {
    fn endpoint(&self, name: &str) -> Result<String, TransportError> {
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| failed(name, e))?;
        let addr = listener.local_addr().map_err(|e| failed(name, e))?;
        let url = format!("http://{addr}");
        self.reserved.lock().insert(url.clone(), listener);
        Ok(url)
    }

    fn mount(&self, base_url: &str, service: Arc<dyn Service>) -> Result<(), TransportError> {
        let base = base_url.trim_end_matches('/');
        let listener = self
            .reserved
            .lock()
            .remove(base)
            .ok_or_else(|| TransportError::NoRoute(base_url.to_string()))?;
        let server = ServerHandle::spawn(listener, service).map_err(|e| failed(base_url, e))?;
        self.servers.lock().push(server);
        Ok(())
    }
}

/// A trust store that discovers issuers over HTTP.
pub fn remote_trust_store(config: &TrustConfig, clock: SharedClock) -> Arc<TrustStore> {
    Arc::new(TrustStore::new(config, Arc::new(HttpClient::default()), clock))
}

/// The guarded storage service described by `config`.
pub fn resource_service(config: &ResourceConfig, clock: SharedClock) -> Result<StorageService, ConfigError> {
    let trust = remote_trust_store(&config.guard.trust_config(), clock.clone());
    let guard = Guard::new(config.guard.clone(), trust, clock)?;
    let backend: Arc<dyn StorageBackend> = match &config.storage_dir {
        Some(dir) => Arc::new(DirectoryBackend::new(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?),
        None => Arc::new(MemoryBackend::new()),
    };
    Ok(StorageService::new(guard, backend))
}
