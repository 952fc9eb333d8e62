//! OAuth2 protected resource: bearer extraction, token validation and
//! authorization in a fixed pipeline, plus a small storage API behind it.

mod storage;

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use http::StatusCode;
use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use storage::{
    DirectoryBackend, Entry, MemoryBackend, StorageBackend, StorageError, StorageService, STORAGE_PREFIX,
};

use crate::authz::{authorize, AuthzDecision, AuthzPolicy, Operation, ResourcePath, ResourceRequest};
use crate::clock::SharedClock;
use crate::issuer::ConfigError;
use crate::token::{
    check_profile_shape, decode, validate_claims, verify_signature, ClaimSet, CompactToken, TokenKind,
    ValidationContext, ANY_AUDIENCE, DEFAULT_SKEW_SECS,
};
use crate::trust::{TrustConfig, TrustStore, DEFAULT_TTL_SECS};

fn default_skew() -> u64 {
    DEFAULT_SKEW_SECS
}

fn default_true() -> bool {
    true
}

fn default_ttl() -> u64 {
    DEFAULT_TTL_SECS
}

pub fn default_operation_map() -> BTreeMap<String, String> {
    [
        ("GET", "storage.read"),
        ("HEAD", "storage.read"),
        ("PUT", "storage.write"),
        ("MKCOL", "storage.create"),
    ]
    .into_iter()
    .map(|(m, o)| (m.to_string(), o.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardConfig {
    pub accepted_issuers: Vec<String>,
    pub expected_audiences: Vec<String>,
    #[serde(default)]
    pub policy: AuthzPolicy,
    #[serde(default = "default_skew")]
    pub skew_secs: u64,
    /// HTTP method to operation identifier.
    #[serde(default = "default_operation_map")]
    pub operation_map: BTreeMap<String, String>,
    /// Honour the profile's "any" audience.
    #[serde(default = "default_true")]
    pub accept_wildcard_audience: bool,
    /// Remember this many jti values and refuse their reuse. Off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_cache_size: Option<usize>,
    #[serde(default = "default_ttl")]
    pub trust_ttl_secs: u64,
    /// Permit plain-http issuers. Test deployments only.
    #[serde(default)]
    pub allow_http_issuers: bool,
}

impl GuardConfig {
    pub fn new(accepted_issuers: Vec<String>, expected_audiences: Vec<String>, policy: AuthzPolicy) -> Self {
        Self {
            accepted_issuers,
            expected_audiences,
            policy,
            skew_secs: DEFAULT_SKEW_SECS,
            operation_map: default_operation_map(),
            accept_wildcard_audience: true,
            replay_cache_size: None,
            trust_ttl_secs: DEFAULT_TTL_SECS,
            allow_http_issuers: false,
        }
    }

    pub fn trust_config(&self) -> TrustConfig {
        TrustConfig {
            accepted_issuers: self.accepted_issuers.clone(),
            ttl_secs: self.trust_ttl_secs,
            allow_http: self.allow_http_issuers,
        }
    }

    fn check(&self) -> Result<BTreeMap<String, Operation>, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if self.accepted_issuers.is_empty() {
            return Err(invalid("accepted_issuers must not be empty".into()));
        }
        if self.expected_audiences.is_empty() {
            return Err(invalid("expected_audiences must not be empty".into()));
        }
        let mut map = BTreeMap::new();
        for (method, op) in &self.operation_map {
            http::Method::from_bytes(method.as_bytes())
                .map_err(|_| invalid(format!("bad HTTP method {method:?}")))?;
            let op = Operation::parse(op).map_err(|e| invalid(e.to_string()))?;
            map.insert(method.to_ascii_uppercase(), op);
        }
        Ok(map)
    }
}

/// Resource server configuration file (TOML): a `[guard]` table plus where
/// the storage tree lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConfig {
    pub guard: GuardConfig,
    /// Directory backing the storage tree. In-memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_dir: Option<PathBuf>,
}

impl ResourceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = config.storage_dir.as_mut().filter(|d| d.is_relative()) {
            *dir = path.parent().unwrap_or(Path::new(".")).join(&*dir);
        }
        Ok(config)
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExtractBearer,
    Decode,
    ResolveKey,
    VerifySignature,
    ValidateClaims,
    CheckShape,
    Authorize,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::ExtractBearer,
        Stage::Decode,
        Stage::ResolveKey,
        Stage::VerifySignature,
        Stage::ValidateClaims,
        Stage::CheckShape,
        Stage::Authorize,
    ];
}

/// Test hook notified as each stage starts.
pub trait StageObserver: Send + Sync {
    fn enter(&self, stage: Stage);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardStatus {
    Allowed,
    Unauthenticated,
    Forbidden,
    /// The request itself is unusable: an unmapped method or a path that
    /// would need normalization.
    BadRequest,
}

impl GuardStatus {
    pub fn http_status(self) -> StatusCode {
        match self {
            GuardStatus::Allowed => StatusCode::OK,
            GuardStatus::Unauthenticated => StatusCode::UNAUTHORIZED,
            GuardStatus::Forbidden => StatusCode::FORBIDDEN,
            GuardStatus::BadRequest => StatusCode::BAD_REQUEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardOutcome {
    pub status: GuardStatus,
    pub decision: Option<AuthzDecision>,
    /// `WWW-Authenticate` value for 401 and 403 responses.
    pub challenge: Option<String>,
    /// The stage that rejected the request.
    pub failed_stage: Option<Stage>,
    pub reason: Option<String>,
    #[serde(skip)]
    pub claims: Option<ClaimSet>,
}

impl GuardOutcome {
    pub fn allowed(&self) -> bool {
        self.status == GuardStatus::Allowed
    }

    fn bad_request(reason: String) -> Self {
        Self {
            status: GuardStatus::BadRequest,
            decision: None,
            challenge: None,
            failed_stage: None,
            reason: Some(reason),
            claims: None,
        }
    }

    fn unauthenticated(stage: Stage, reason: Option<String>) -> Self {
        let challenge = match &reason {
            None => "Bearer".to_string(),
            Some(r) => format!(
                "Bearer error=\"invalid_token\", error_description=\"{}\"",
                r.replace(['"', '\\'], "'")
            ),
        };
        Self {
            status: GuardStatus::Unauthenticated,
            decision: None,
            challenge: Some(challenge),
            failed_stage: Some(stage),
            reason,
            claims: None,
        }
    }
}

/// The incoming request as the guard sees it.
#[derive(Debug, Clone, Copy)]
pub struct GuardRequest<'a> {
    pub method: &'a str,
    pub path: &'a str,
    pub authorization: Option<&'a str>,
}

pub struct Guard {
    config: GuardConfig,
    operations: BTreeMap<String, Operation>,
    trust: Arc<TrustStore>,
    clock: SharedClock,
    observer: Option<Arc<dyn StageObserver>>,
    replay: Option<Mutex<LruCache<String, i64>>>,
}

impl std::fmt::Debug for Guard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Guard")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Guard {
    pub fn new(config: GuardConfig, trust: Arc<TrustStore>, clock: SharedClock) -> Result<Self, ConfigError> {
        let operations = config.check()?;
        let replay = config
            .replay_cache_size
            .map(|n| {
                NonZeroUsize::new(n)
                    .map(|n| Mutex::new(LruCache::new(n)))
                    .ok_or_else(|| ConfigError::Invalid("replay_cache_size must be positive".into()))
            })
            .transpose()?;
        Ok(Self {
            config,
            operations,
            trust,
            clock,
            observer: None,
            replay,
        })
    }

    pub fn with_observer(mut self, observer: Arc<dyn StageObserver>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn config(&self) -> &GuardConfig {
        &self.config
    }

    pub fn trust(&self) -> &Arc<TrustStore> {
        &self.trust
    }

    fn enter(&self, stage: Stage) {
        if let Some(o) = &self.observer {
            o.enter(stage);
        }
    }

    /// Maps method and path to the operation being attempted.
    pub fn map_request(&self, method: &str, path: &str) -> Result<ResourceRequest, String> {
        let operation = self
            .operations
            .get(&method.to_ascii_uppercase())
            .ok_or_else(|| format!("method {method} is not supported"))?;
        let path = ResourcePath::parse(path).map_err(|e| e.to_string())?;
        Ok(ResourceRequest::new(operation.clone(), path))
    }

    fn validation_context(&self) -> ValidationContext {
        let mut ctx = ValidationContext::new(
            self.config.accepted_issuers.clone(),
            self.config.expected_audiences.clone(),
            self.clock.clone(),
        )
        .with_skew(Duration::from_secs(self.config.skew_secs))
        .with_kind(TokenKind::AccessToken);
        ctx.wildcard_audience = self
            .config
            .accept_wildcard_audience
            .then(|| ANY_AUDIENCE.to_string());
        ctx
    }

    /// Runs the pipeline. The first failing stage decides the outcome.
    pub fn guard(&self, req: GuardRequest<'_>) -> GuardOutcome {
        let resource = match self.map_request(req.method, req.path) {
            Ok(r) => r,
            Err(why) => return GuardOutcome::bad_request(why),
        };
        let claims = match self.authenticate(req.authorization) {
            Ok(c) => c,
            Err(outcome) => return *outcome,
        };

        self.enter(Stage::Authorize);
        let decision = authorize(&claims, &resource, &self.config.policy);
        if decision.allowed {
            GuardOutcome {
                status: GuardStatus::Allowed,
                decision: Some(decision),
                challenge: None,
                failed_stage: None,
                reason: None,
                claims: Some(claims),
            }
        } else {
            GuardOutcome {
                status: GuardStatus::Forbidden,
                challenge: Some("Bearer error=\"insufficient_scope\"".into()),
                failed_stage: Some(Stage::Authorize),
                reason: Some(format!("{resource} not permitted")),
                decision: Some(decision),
                claims: Some(claims),
            }
        }
    }

    /// Every stage up to authorization: the claims of an acceptable
    /// access token, or the 401 outcome.
    pub fn authenticate(&self, authorization: Option<&str>) -> Result<ClaimSet, Box<GuardOutcome>> {
        let fail = |stage, why: String| Err(Box::new(GuardOutcome::unauthenticated(stage, Some(why))));

        self.enter(Stage::ExtractBearer);
        let bearer = authorization.map(str::trim).and_then(|h| {
            let (scheme, rest) = h.split_once(' ').unwrap_or((h, ""));
            scheme.eq_ignore_ascii_case("bearer").then(|| rest.trim())
        });
        let raw = match bearer {
            None => {
                return Err(Box::new(GuardOutcome::unauthenticated(
                    Stage::ExtractBearer,
                    None,
                )))
            }
            Some("") => return fail(Stage::ExtractBearer, "empty bearer token".into()),
            Some(t) => t,
        };

        self.enter(Stage::Decode);
        let token = match CompactToken::parse(raw) {
            Ok(t) => t,
            Err(e) => return fail(Stage::Decode, e.to_string()),
        };
        let (header, claims) = match decode(&token) {
            Ok(parts) => parts,
            Err(e) => return fail(Stage::Decode, e.to_string()),
        };

        self.enter(Stage::ResolveKey);
        let Some(iss) = claims.iss.as_deref() else {
            return fail(Stage::ResolveKey, "token has no issuer".into());
        };
        let key = match self.trust.get_key(iss, &header.kid) {
            Ok(k) => k,
            Err(e) => return fail(Stage::ResolveKey, e.to_string()),
        };

        self.enter(Stage::VerifySignature);
        match verify_signature(&token, &key) {
            Ok(true) => {}
            Ok(false) => return fail(Stage::VerifySignature, "signature does not verify".into()),
            Err(e) => return fail(Stage::VerifySignature, e.to_string()),
        }

        self.enter(Stage::ValidateClaims);
        let report = validate_claims(&claims, &self.validation_context());
        if !report.accepted() {
            return fail(Stage::ValidateClaims, report.summary());
        }

        self.enter(Stage::CheckShape);
        if header.typ.is_some() && header.kind() != Some(TokenKind::AccessToken) {
            return fail(
                Stage::CheckShape,
                format!("typ {:?} is not an access token", header.typ),
            );
        }
        let shape = check_profile_shape(&claims, TokenKind::AccessToken);
        if !shape.conformant() {
            let list: Vec<String> = shape.violations.iter().map(ToString::to_string).collect();
            return fail(Stage::CheckShape, list.join("; "));
        }
        if let Some(cache) = &self.replay {
            let jti = claims.jti.clone().unwrap_or_default();
            let now = self.clock.now();
            let mut cache = cache.lock();
            if cache
                .get(&jti)
                .is_some_and(|exp| *exp + self.config.skew_secs as i64 > now)
            {
                return fail(Stage::CheckShape, "token replayed".into());
            }
            cache.put(jti, claims.exp.unwrap_or(now));
        }

        Ok(claims)
    }
}
