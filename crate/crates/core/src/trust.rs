//! Issuer trust anchors: discovery, JWKS retrieval and a shared key cache.
//!
//! The cache bounds network traffic per issuer: a fresh anchor answers from
//! memory, a stale one triggers a single metadata + JWKS fetch no matter how
//! many validators ask at once, and an unknown kid on a fresh anchor forces
//! exactly one refresh before failing.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use http::StatusCode;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::http::HttpFetcher;
use crate::token::{same_issuer, JwkSet, VerificationKey};

pub const DEFAULT_TTL_SECS: u64 = 6 * 60 * 60;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrustError {
    #[error("fetching {url} failed: {reason}")]
    FetchFailed { url: String, reason: String },
    #[error("metadata names issuer {found:?}, expected {expected:?}")]
    IssuerMismatch { expected: String, found: String },
    #[error("malformed metadata: {0}")]
    MalformedMetadata(String),
    #[error("issuer {0} is not accepted")]
    UnknownIssuer(String),
    #[error("issuer {issuer} has no key {kid:?}")]
    UnknownKid { issuer: String, kid: String },
    #[error("issuer {0} preloaded twice")]
    DuplicateIssuer(String),
    #[error("issuer URL {0:?} must be absolute https")]
    InsecureIssuer(String),
}

/// The subset of OIDC discovery / RFC 8414 metadata this crate consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuerMetadata {
    pub issuer: String,
    pub jwks_uri: String,
    pub token_endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authorization_endpoint: Option<String>,
    #[serde(default)]
    pub grant_types_supported: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssuerTrustAnchor {
    pub metadata: IssuerMetadata,
    pub keys: Vec<VerificationKey>,
    pub fetched_at: i64,
    pub ttl: Duration,
}

impl IssuerTrustAnchor {
    pub fn new(
        metadata: IssuerMetadata,
        keys: Vec<VerificationKey>,
        fetched_at: i64,
        ttl: Duration,
    ) -> Result<Self, TrustError> {
        for (i, k) in keys.iter().enumerate() {
            if keys[..i].iter().any(|o| o.kid() == k.kid()) {
                return Err(TrustError::MalformedMetadata(format!(
                    "duplicate kid {:?}",
                    k.kid()
                )));
            }
        }
        Ok(Self {
            metadata,
            keys,
            fetched_at,
            ttl,
        })
    }

    pub fn is_fresh(&self, now: i64) -> bool {
        let ttl = i64::try_from(self.ttl.as_secs()).unwrap_or(i64::MAX);
        now < self.fetched_at.saturating_add(ttl)
    }

    pub fn key(&self, kid: &str) -> Option<&VerificationKey> {
        self.keys.iter().find(|k| k.kid() == kid)
    }
}

/// Accepted issuers and cache policy, as read from configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustConfig {
    pub accepted_issuers: Vec<String>,
    #[serde(default = "default_ttl")]
    pub ttl_secs: u64,
    /// Permit plain-http issuers. Test deployments only.
    #[serde(default)]
    pub allow_http: bool,
}

fn default_ttl() -> u64 {
    DEFAULT_TTL_SECS
}

impl TrustConfig {
    pub fn new(accepted_issuers: Vec<String>) -> Self {
        Self {
            accepted_issuers,
            ttl_secs: DEFAULT_TTL_SECS,
            allow_http: false,
        }
    }
}

fn check_scheme(issuer_url: &str, allow_http: bool) -> Result<url::Url, TrustError> {
    let parsed = url::Url::parse(issuer_url).map_err(|_| TrustError::InsecureIssuer(issuer_url.into()))?;
    match parsed.scheme() {
        "https" => Ok(parsed),
        "http" if allow_http => Ok(parsed),
        _ => Err(TrustError::InsecureIssuer(issuer_url.into())),
    }
}

/// The two well-known locations, in the order they are tried: OpenID
/// discovery, then the RFC 8414 path-inserted form.
pub fn discovery_urls(issuer_url: &str) -> Result<[String; 2], TrustError> {
    let parsed = url::Url::parse(issuer_url).map_err(|_| TrustError::InsecureIssuer(issuer_url.into()))?;
    let oidc = format!(
        "{}/.well-known/openid-configuration",
        issuer_url.trim_end_matches('/')
    );
    let origin = &parsed[..url::Position::BeforePath];
    let path = parsed.path().trim_end_matches('/');
    let rfc8414 = format!("{origin}/.well-known/oauth-authorization-server{path}");
    Ok([oidc, rfc8414])
}

fn fetch_failed(url: &str, reason: impl ToString) -> TrustError {
    TrustError::FetchFailed {
        url: url.to_string(),
        reason: reason.to_string(),
    }
}

/// Fetches issuer metadata, falling back to the RFC 8414 location on 404,
/// and enforces that the document names the issuer it was fetched for.
pub fn discover(
    issuer_url: &str,
    fetcher: &dyn HttpFetcher,
    allow_http: bool,
) -> Result<IssuerMetadata, TrustError> {
    check_scheme(issuer_url, allow_http)?;
    let urls = discovery_urls(issuer_url)?;
    for url in &urls {
        let response = fetcher.get(url).map_err(|e| fetch_failed(url, e))?;
        match response.status() {
            StatusCode::NOT_FOUND => continue,
            StatusCode::OK => {
                let metadata: IssuerMetadata = serde_json::from_slice(response.body())
                    .map_err(|e| TrustError::MalformedMetadata(e.to_string()))?;
                if !same_issuer(&metadata.issuer, issuer_url) {
                    return Err(TrustError::IssuerMismatch {
                        expected: issuer_url.to_string(),
                        found: metadata.issuer,
                    });
                }
                return Ok(metadata);
            }
            other => return Err(fetch_failed(url, format!("HTTP {other}"))),
        }
    }
    Err(fetch_failed(
        &urls[0],
        "no metadata at either well-known location",
    ))
}

pub fn fetch_jwks(jwks_uri: &str, fetcher: &dyn HttpFetcher) -> Result<Vec<VerificationKey>, TrustError> {
    let response = fetcher.get(jwks_uri).map_err(|e| fetch_failed(jwks_uri, e))?;
    if response.status() != StatusCode::OK {
        return Err(fetch_failed(jwks_uri, format!("HTTP {}", response.status())));
    }
    let set: JwkSet = serde_json::from_slice(response.body())
        .map_err(|e| TrustError::MalformedMetadata(format!("JWKS: {e}")))?;
    set.verification_keys()
        .map_err(|e| TrustError::MalformedMetadata(format!("JWKS: {e}")))
}

#[derive(Default)]
struct SlotState {
    anchor: Option<Arc<IssuerTrustAnchor>>,
    refreshing: bool,
    /// Bumped after every completed refresh attempt.
    generation: u64,
    last_error: Option<TrustError>,
}

#[derive(Default)]
struct Slot {
    state: Mutex<SlotState>,
    done: Condvar,
}

/// Thread-safe per-issuer anchor cache with single-flight refresh.
pub struct TrustStore {
    fetcher: Arc<dyn HttpFetcher>,
    clock: SharedClock,
    accepted: Mutex<Vec<String>>,
    ttl: Duration,
    allow_http: bool,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
    fetches: AtomicU64,
}

fn issuer_key(issuer: &str) -> String {
    issuer.trim_end_matches('/').to_string()
}

struct CountedFetcher<'a> {
    inner: &'a dyn HttpFetcher,
    count: &'a AtomicU64,
}

impl HttpFetcher for CountedFetcher<'_> {
    fn fetch(
        &self,
        request: crate::http::HttpRequest,
    ) -> Result<crate::http::HttpResponse, crate::http::TransportError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.fetch(request)
    }
}

impl TrustStore {
    pub fn new(config: &TrustConfig, fetcher: Arc<dyn HttpFetcher>, clock: SharedClock) -> Self {
        Self {
            fetcher,
            clock,
            accepted: Mutex::new(config.accepted_issuers.iter().map(|i| issuer_key(i)).collect()),
            ttl: Duration::from_secs(config.ttl_secs),
            allow_http: config.allow_http,
            slots: Mutex::new(HashMap::new()),
            fetches: AtomicU64::new(0),
        }
    }

    pub fn is_accepted(&self, issuer: &str) -> bool {
        self.accepted.lock().contains(&issuer_key(issuer))
    }

    pub fn accepted_issuers(&self) -> Vec<String> {
        self.accepted.lock().clone()
    }

    /// Network requests made by this store so far.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    fn slot(&self, issuer: &str) -> Arc<Slot> {
        self.slots.lock().entry(issuer_key(issuer)).or_default().clone()
    }

    pub fn anchor(&self, issuer: &str) -> Option<Arc<IssuerTrustAnchor>> {
        self.slots
            .lock()
            .get(&issuer_key(issuer))
            .and_then(|s| s.state.lock().anchor.clone())
    }

    /// Installs anchors obtained out of band. Their issuers become accepted.
    pub fn preload(&self, anchors: Vec<IssuerTrustAnchor>) -> Result<(), TrustError> {
        for (i, a) in anchors.iter().enumerate() {
            let key = issuer_key(&a.metadata.issuer);
            let dup_in_batch = anchors[..i].iter().any(|o| issuer_key(&o.metadata.issuer) == key);
            if dup_in_batch || self.anchor(&key).is_some() {
                return Err(TrustError::DuplicateIssuer(a.metadata.issuer.clone()));
            }
        }
        for anchor in anchors {
            let key = issuer_key(&anchor.metadata.issuer);
            {
                let mut accepted = self.accepted.lock();
                if !accepted.contains(&key) {
                    accepted.push(key.clone());
                }
            }
            let slot = self.slot(&key);
            slot.state.lock().anchor = Some(Arc::new(anchor));
        }
        Ok(())
    }

    fn refresh(&self, issuer: &str) -> Result<IssuerTrustAnchor, TrustError> {
        let fetcher = CountedFetcher {
            inner: self.fetcher.as_ref(),
            count: &self.fetches,
        };
        let metadata = discover(issuer, &fetcher, self.allow_http)?;
        let keys = fetch_jwks(&metadata.jwks_uri, &fetcher)?;
        tracing::debug!(issuer, keys = keys.len(), "refreshed trust anchor");
        IssuerTrustAnchor::new(metadata, keys, self.clock.now(), self.ttl)
    }

    /// Returns the verification key `kid` of `issuer`, fetching the issuer's
    /// metadata and key set only when the cached anchor is stale, missing,
    /// or lacks `kid` (one forced refresh).
    pub fn get_key(&self, issuer: &str, kid: &str) -> Result<VerificationKey, TrustError> {
        if !self.is_accepted(issuer) {
            return Err(TrustError::UnknownIssuer(issuer.to_string()));
        }
        let slot = self.slot(issuer);
        let mut state = slot.state.lock();
        let mut refreshed = false;
        loop {
            if let Some(anchor) = &state.anchor {
                if anchor.is_fresh(self.clock.now()) {
                    if let Some(key) = anchor.key(kid) {
                        return Ok(key.clone());
                    }
                    if refreshed {
                        return Err(TrustError::UnknownKid {
                            issuer: issuer.to_string(),
                            kid: kid.to_string(),
                        });
                    }
                }
            }
            if state.refreshing {
                // Someone else is fetching; their result counts as our refresh.
                let generation = state.generation;
                while state.refreshing {
                    slot.done.wait(&mut state);
                }
                if state.generation != generation {
                    if let Some(err) = &state.last_error {
                        return Err(err.clone());
                    }
                    refreshed = true;
                }
                continue;
            }
            state.refreshing = true;
            drop(state);
            let result = self.refresh(issuer);
            state = slot.state.lock();
            state.refreshing = false;
            state.generation += 1;
            slot.done.notify_all();
            match result {
                Ok(anchor) => {
                    state.anchor = Some(Arc::new(anchor));
                    state.last_error = None;
                    refreshed = true;
                }
                Err(err) => {
                    state.last_error = Some(err.clone());
                    return Err(err);
                }
            }
        }
    }
}
