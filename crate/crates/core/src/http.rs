//! Transport-neutral HTTP plumbing.
//!
//! Services are plain `request -> response` functions over [`http`] types,
//! so the same handler runs behind a real socket or an in-process
//! [`Loopback`] network.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http::header::{CONTENT_TYPE, LOCATION};
use http::{Method, StatusCode};
use parking_lot::RwLock;
use serde::Serialize;

pub type HttpRequest = http::Request<Vec<u8>>;
pub type HttpResponse = http::Response<Vec<u8>>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("invalid request URL {0:?}")]
    InvalidUrl(String),
    #[error("no route to {0}")]
    NoRoute(String),
    #[error("request to {url} failed: {reason}")]
    Failed { url: String, reason: String },
}

/// Something able to carry an HTTP request to its destination.
pub trait HttpFetcher: Send + Sync {
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError>;

    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let request = http::Request::get(url)
            .body(Vec::new())
            .map_err(|_| TransportError::InvalidUrl(url.to_string()))?;
        self.fetch(request)
    }
}

impl<F> HttpFetcher for F
where
    F: Fn(HttpRequest) -> Result<HttpResponse, TransportError> + Send + Sync,
{
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        self(request)
    }
}

impl<T: HttpFetcher + ?Sized> HttpFetcher for Arc<T> {
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        (**self).fetch(request)
    }
}

/// An HTTP request handler.
pub trait Service: Send + Sync {
    fn handle(&self, request: HttpRequest) -> HttpResponse;
}

/// Wraps a fetcher and counts the requests sent through it.
#[derive(Debug)]
pub struct CountingFetcher<F> {
    inner: F,
    count: AtomicU64,
}

impl<F> CountingFetcher<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }
}

impl<F: HttpFetcher> HttpFetcher for CountingFetcher<F> {
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.fetch(request)
    }
}

/// In-process network: requests are routed by URL authority to mounted
/// services, without sockets.
#[derive(Default)]
pub struct Loopback {
    routes: RwLock<HashMap<String, Arc<dyn Service>>>,
    requests: AtomicU64,
}

impl Loopback {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mounts `service` at the authority of `base_url`.
    pub fn mount(&self, base_url: &str, service: Arc<dyn Service>) -> Result<(), TransportError> {
        let authority = authority_of(base_url)?;
        self.routes.write().insert(authority, service);
        Ok(())
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

impl HttpFetcher for Loopback {
    fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let authority = request
            .uri()
            .authority()
            .map(|a| a.as_str().to_ascii_lowercase())
            .ok_or_else(|| TransportError::InvalidUrl(request.uri().to_string()))?;
        let service = self
            .routes
            .read()
            .get(&authority)
            .cloned()
            .ok_or(TransportError::NoRoute(authority))?;
        Ok(service.handle(request))
    }
}

pub fn authority_of(url: &str) -> Result<String, TransportError> {
    let parsed = url::Url::parse(url).map_err(|_| TransportError::InvalidUrl(url.to_string()))?;
    let host = parsed
        .host_str()
        .ok_or_else(|| TransportError::InvalidUrl(url.to_string()))?;
    Ok(match parsed.port() {
        Some(port) => format!("{host}:{port}"),
        None => host.to_string(),
    }
    .to_ascii_lowercase())
}

pub fn json_response<T: Serialize>(status: StatusCode, body: &T) -> HttpResponse {
    http::Response::builder()
        .status(status)
        .header(CONTENT_TYPE, "application/json")
        .header("cache-control", "no-store")
        .body(serde_json::to_vec(body).expect("response serializes"))
        .expect("valid response")
}

pub fn text_response(status: StatusCode, body: impl Into<Vec<u8>>) -> HttpResponse {
    http::Response::builder()
        .status(status)
        .header(CONTENT_TYPE, "text/plain; charset=utf-8")
        .body(body.into())
        .expect("valid response")
}

pub fn redirect(location: &str) -> HttpResponse {
    http::Response::builder()
        .status(StatusCode::FOUND)
        .header(LOCATION, location)
        .body(Vec::new())
        .expect("valid response")
}

/// Decodes `application/x-www-form-urlencoded` data. Repeated keys keep the
/// first value.
pub fn parse_form(data: &[u8]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (k, v) in url::form_urlencoded::parse(data) {
        out.entry(k.into_owned()).or_insert_with(|| v.into_owned());
    }
    out
}

pub fn encode_form<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<u8> {
    let mut ser = url::form_urlencoded::Serializer::new(String::new());
    for (k, v) in pairs {
        ser.append_pair(k, v);
    }
    ser.finish().into_bytes()
}

/// Query parameters for GET, form body for POST.
pub fn request_params(request: &HttpRequest) -> BTreeMap<String, String> {
    if request.method() == Method::POST {
        parse_form(request.body())
    } else {
        parse_form(request.uri().query().unwrap_or("").as_bytes())
    }
}

pub fn form_post(url: &str, body: Vec<u8>) -> Result<HttpRequest, TransportError> {
    http::Request::post(url)
        .header(CONTENT_TYPE, "application/x-www-form-urlencoded")
        .body(body)
        .map_err(|_| TransportError::InvalidUrl(url.to_string()))
}

pub fn basic_authorization(user: &str, password: &str) -> String {
    let enc = |s: &str| url::form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>();
    format!(
        "Basic {}",
        STANDARD.encode(format!("{}:{}", enc(user), enc(password)))
    )
}

/// Parses an RFC 6749 HTTP Basic client credential header value.
pub fn parse_basic_authorization(value: &str) -> Option<(String, String)> {
    let (scheme, rest) = value.split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let decoded = String::from_utf8(STANDARD.decode(rest.trim()).ok()?).ok()?;
    let (user, pass) = decoded.split_once(':')?;
    let dec = |s: &str| {
        url::form_urlencoded::parse(format!("x={s}").as_bytes())
            .next()
            .map(|(_, v)| v.into_owned())
            .unwrap_or_default()
    };
    Some((dec(user), dec(pass)))
}
