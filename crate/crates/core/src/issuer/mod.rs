//! Token issuer: client registry, stub user store, the four token grants,
//! discovery metadata and key publication.

mod config;
mod endpoints;
mod keyring;
mod store;

use std::collections::BTreeMap;

use http::StatusCode;
use parking_lot::{Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

pub use config::{
    derive_subject, hash_password, ClientConfig, ClientRegistration, ConfigError, GrantType, IssuerConfig,
    Lifetimes, Secret, UserConfig, UserRecord,
};
pub use endpoints::{ACCESS_TOKEN_TYPE, JWT_TOKEN_TYPE};
pub use keyring::KeyRing;
pub use store::{
    AuthorizationCode, CodeRedemption, GrantStore, RefreshRejection, RefreshTokenRecord, StoreError,
};

use crate::authz::{format_scope, parse_scope, Capability};
use crate::clock::SharedClock;
use crate::token::{
    b64, check_profile_shape, decode, encode_and_sign, validate_claims, verify_signature, ClaimSet,
    CompactToken, JwkSet, KeyPair, TokenKind, ValidationContext, ANY_AUDIENCE, DEFAULT_SKEW_SECS,
};
use crate::trust::IssuerMetadata;

/// OIDC request scopes that select protocol behaviour rather than grant a
/// capability. They are accepted and dropped.
pub const PROTOCOL_SCOPES: [&str; 4] = ["openid", "offline_access", "profile", "email"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IssuerError {
    #[error("unknown client {0:?}")]
    UnknownClient(String),
    #[error("client authentication failed")]
    InvalidClient,
    #[error("redirect URI {0:?} is not registered for this client")]
    RedirectMismatch(String),
    #[error("bad user credentials")]
    BadCredentials,
    #[error("invalid grant: {0}")]
    InvalidGrant(String),
    #[error("client may not use the {0:?} grant")]
    UnauthorizedClient(GrantType),
    #[error("unsupported grant type {0:?}")]
    UnsupportedGrantType(String),
    #[error("malformed scope: {0}")]
    InvalidScope(String),
    #[error("scope {0} is not allowed for this client")]
    ScopeNotAllowed(String),
    #[error("scope {0} exceeds the parent grant")]
    ScopeBroadening(String),
    #[error("invalid subject token: {0}")]
    InvalidSubjectToken(String),
    #[error("audience {0:?} is not permitted for token exchange")]
    AudienceNotPermitted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("grant store failure: {0}")]
    Store(#[from] StoreError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl IssuerError {
    /// The OAuth2 `error` code.
    pub fn oauth_code(&self) -> &'static str {
        match self {
            IssuerError::UnknownClient(_) | IssuerError::InvalidClient => "invalid_client",
            IssuerError::RedirectMismatch(_) | IssuerError::InvalidRequest(_) => "invalid_request",
            IssuerError::InvalidSubjectToken(_) => "invalid_request",
            IssuerError::BadCredentials => "access_denied",
            IssuerError::InvalidGrant(_) => "invalid_grant",
            IssuerError::UnauthorizedClient(_) => "unauthorized_client",
            IssuerError::UnsupportedGrantType(_) => "unsupported_grant_type",
            IssuerError::InvalidScope(_)
            | IssuerError::ScopeNotAllowed(_)
            | IssuerError::ScopeBroadening(_) => "invalid_scope",
            IssuerError::AudienceNotPermitted(_) => "invalid_target",
            IssuerError::Store(_) | IssuerError::Internal(_) => "server_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            IssuerError::UnknownClient(_) | IssuerError::InvalidClient | IssuerError::BadCredentials => {
                StatusCode::UNAUTHORIZED
            }
            IssuerError::Store(_) | IssuerError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }

    /// Finer-grained than the OAuth2 code; sent as the `cause` extension
    /// field of error responses.
    pub fn cause(&self) -> &'static str {
        match self {
            IssuerError::UnknownClient(_) => "unknown_client",
            IssuerError::InvalidClient => "invalid_client",
            IssuerError::RedirectMismatch(_) => "redirect_mismatch",
            IssuerError::BadCredentials => "bad_credentials",
            IssuerError::InvalidGrant(_) => "invalid_grant",
            IssuerError::UnauthorizedClient(_) => "unauthorized_client",
            IssuerError::UnsupportedGrantType(_) => "unsupported_grant_type",
            IssuerError::InvalidScope(_) => "invalid_scope",
            IssuerError::ScopeNotAllowed(_) => "scope_not_allowed",
            IssuerError::ScopeBroadening(_) => "scope_broadening",
            IssuerError::InvalidSubjectToken(_) => "invalid_subject_token",
            IssuerError::AudienceNotPermitted(_) => "audience_not_permitted",
            IssuerError::InvalidRequest(_) => "invalid_request",
            IssuerError::Store(_) => "store",
            IssuerError::Internal(_) => "internal",
        }
    }

    pub fn to_body(&self) -> OAuthErrorBody {
        OAuthErrorBody {
            error: self.oauth_code().to_string(),
            error_description: Some(self.to_string()),
            cause: Some(self.cause().to_string()),
        }
    }
}

/// OAuth2 error response document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OAuthErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub access_token: CompactToken,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_token: Option<CompactToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_token: Option<String>,
    pub token_type: String,
    pub expires_in: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued_token_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientCredentials {
    pub client_id: String,
    pub client_secret: Secret,
}

impl ClientCredentials {
    pub fn new(client_id: impl Into<String>, client_secret: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            client_secret: Secret::new(client_secret),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorizeRequest {
    pub client_id: String,
    pub redirect_uri: String,
    /// Space-separated; absent means every scope the client may receive.
    pub scope: Option<String>,
    pub username: String,
    pub password: Secret,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenGrant {
    AuthorizationCode {
        code: String,
        redirect_uri: Option<String>,
    },
    ClientCredentials {
        scope: Option<String>,
    },
    RefreshToken {
        refresh_token: String,
        scope: Option<String>,
    },
    TokenExchange {
        subject_token: String,
        audience: Option<String>,
        scope: Option<String>,
    },
}

impl TokenGrant {
    pub fn grant_type(&self) -> GrantType {
        match self {
            TokenGrant::AuthorizationCode { .. } => GrantType::AuthorizationCode,
            TokenGrant::ClientCredentials { .. } => GrantType::ClientCredentials,
            TokenGrant::RefreshToken { .. } => GrantType::RefreshToken,
            TokenGrant::TokenExchange { .. } => GrantType::TokenExchange,
        }
    }
}

fn covered(cap: &Capability, by: &[Capability]) -> bool {
    by.iter().any(|p| cap.is_covered_by(p))
}

fn dedup(caps: Vec<Capability>) -> Vec<Capability> {
    let mut out: Vec<Capability> = Vec::with_capacity(caps.len());
    for c in caps {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Parses a requested scope string, dropping protocol scopes. `None` when
/// the parameter was absent.
fn requested_scope(scope: Option<&str>) -> Result<Option<Vec<Capability>>, IssuerError> {
    let Some(scope) = scope else {
        return Ok(None);
    };
    let kept: Vec<&str> = scope
        .split(' ')
        .filter(|s| !s.is_empty() && !PROTOCOL_SCOPES.contains(s))
        .collect();
    parse_scope(&kept.join(" "))
        .map(|caps| Some(dedup(caps)))
        .map_err(|e| IssuerError::InvalidScope(e.to_string()))
}

fn scope_claim(caps: &[Capability]) -> Option<String> {
    (!caps.is_empty()).then(|| format_scope(caps))
}

pub struct Issuer {
    issuer: String,
    lifetimes: Lifetimes,
    exchange_audiences: Vec<String>,
    clients: BTreeMap<String, ClientRegistration>,
    users: BTreeMap<String, UserRecord>,
    keys: RwLock<KeyRing>,
    store: GrantStore,
    clock: SharedClock,
    rng: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for Issuer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Issuer")
            .field("issuer", &self.issuer)
            .field("clients", &self.clients.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Issuer {
    /// Builds an issuer from resolved parts. The first key signs; the others
    /// stay published. `rng` supplies codes, handles, jti values and
    /// password salts.
    pub fn new(
        config: &IssuerConfig,
        keys: Vec<KeyPair>,
        store: GrantStore,
        clock: SharedClock,
        mut rng: ChaCha20Rng,
    ) -> Result<Self, ConfigError> {
        config.check()?;
        let mut keys = keys.into_iter();
        let active = keys
            .next()
            .ok_or_else(|| ConfigError::Invalid("at least one signing key is required".into()))?;
        let ring = KeyRing::with_published(active, keys.map(|k| k.public_key()));
        let clients = config.resolve_clients()?;
        let users = config.resolve_users(&mut rng)?;
        Ok(Self {
            issuer: config.issuer.trim_end_matches('/').to_string(),
            lifetimes: config.lifetimes,
            exchange_audiences: config.exchange_audiences.clone(),
            clients,
            users,
            keys: RwLock::new(ring),
            store,
            clock,
            rng: Mutex::new(rng),
        })
    }

    /// Loads keys and the grant store named by `config`, seeding the RNG
    /// from the operating system.
    pub fn from_config(config: &IssuerConfig, clock: SharedClock) -> Result<Self, ConfigError> {
        let keys = config.load_signing_keys()?;
        let store = match &config.store_path {
            Some(path) => GrantStore::open(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => GrantStore::in_memory(),
        };
        Self::new(config, keys, store, clock, ChaCha20Rng::from_entropy())
    }

    pub fn issuer_url(&self) -> &str {
        &self.issuer
    }

    pub fn lifetimes(&self) -> Lifetimes {
        self.lifetimes
    }

    pub fn store(&self) -> &GrantStore {
        &self.store
    }

    pub fn client(&self, client_id: &str) -> Option<&ClientRegistration> {
        self.clients.get(client_id)
    }

    pub fn user(&self, username: &str) -> Option<&UserRecord> {
        self.users.get(username)
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    pub fn metadata(&self) -> IssuerMetadata {
        IssuerMetadata {
            issuer: self.issuer.clone(),
            jwks_uri: format!("{}/jwks", self.issuer),
            token_endpoint: format!("{}/token", self.issuer),
            authorization_endpoint: Some(format!("{}/authorize", self.issuer)),
            grant_types_supported: GrantType::ALL.iter().map(|g| g.wire_name().to_string()).collect(),
        }
    }

    pub fn jwks(&self) -> JwkSet {
        JwkSet::from_keys(&self.keys.read().published(self.clock.now()))
    }

    pub fn active_kid(&self) -> String {
        self.keys.read().active().kid().to_string()
    }

    /// Starts signing with `next`. The old key stays in the JWKS until the
    /// longest-lived token it may have signed is past its expiry and the
    /// validators' skew allowance.
    pub fn rotate_key(&self, next: KeyPair) {
        let longest = self.lifetimes.access_token_secs.max(self.lifetimes.id_token_secs);
        let retain_until = self.clock.now() + longest + DEFAULT_SKEW_SECS as i64;
        tracing::info!(kid = next.kid(), retain_until, "rotating signing key");
        self.keys.write().rotate(next, retain_until);
    }

    fn random_handle(&self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().fill_bytes(&mut bytes);
        b64(&bytes)
    }

    fn authenticate(&self, creds: &ClientCredentials) -> Result<&ClientRegistration, IssuerError> {
        let client = self
            .clients
            .get(&creds.client_id)
            .ok_or(IssuerError::InvalidClient)?;
        let expected = Sha256::digest(client.client_secret.expose().as_bytes());
        let given = Sha256::digest(creds.client_secret.expose().as_bytes());
        if bool::from(expected.ct_eq(&given)) {
            Ok(client)
        } else {
            Err(IssuerError::InvalidClient)
        }
    }

    fn sign(&self, claims: &ClaimSet, kind: TokenKind) -> Result<CompactToken, IssuerError> {
        let shape = check_profile_shape(claims, kind);
        if !shape.conformant() {
            return Err(IssuerError::Internal(format!(
                "refusing to issue non-conformant {}: {:?}",
                kind.label(),
                shape.violations
            )));
        }
        encode_and_sign(claims, kind, self.keys.read().active())
            .map_err(|e| IssuerError::Internal(e.to_string()))
    }

    fn audiences_for(client: &ClientRegistration) -> Vec<String> {
        if client.default_audiences.is_empty() {
            vec![ANY_AUDIENCE.to_string()]
        } else {
            client.default_audiences.clone()
        }
    }

    fn user_access_claims(
        &self,
        user: Option<&UserRecord>,
        sub: &str,
        aud: Vec<String>,
        scopes: &[Capability],
        now: i64,
    ) -> ClaimSet {
        let mut claims = ClaimSet::new(
            sub,
            &self.issuer,
            aud,
            now,
            self.lifetimes.access_token_secs,
            self.random_handle(),
        );
        claims.scope = scope_claim(scopes);
        if let Some(user) = user {
            if !user.groups.is_empty() {
                claims.wlcg_groups = Some(user.groups.iter().map(|g| g.to_string()).collect());
            }
            if !user.assurance.is_empty() {
                claims.eduperson_assurance = Some(user.assurance.clone());
            }
            claims.acr = user.acr.clone();
        }
        claims
    }

    fn id_claims(&self, user: &UserRecord, client_id: &str, auth_time: i64, now: i64) -> ClaimSet {
        let mut claims = ClaimSet::new(
            &user.subject,
            &self.issuer,
            vec![client_id.to_string()],
            now,
            self.lifetimes.id_token_secs,
            self.random_handle(),
        );
        claims.auth_time = Some(auth_time);
        claims.acr = user.acr.clone();
        if !user.groups.is_empty() {
            claims.wlcg_groups = Some(user.groups.iter().map(|g| g.to_string()).collect());
        }
        if !user.assurance.is_empty() {
            claims.eduperson_assurance = Some(user.assurance.clone());
        }
        let std = &mut claims.oidc_standard;
        std.insert("preferred_username".into(), user.username.clone().into());
        if let Some(name) = &user.name {
            std.insert("name".into(), name.clone().into());
        }
        if let Some(email) = &user.email {
            std.insert("email".into(), email.clone().into());
        }
        claims
    }

    fn new_refresh(
        &self,
        client_id: &str,
        subject: &str,
        username: Option<&str>,
        granted: &[Capability],
        auth_time: Option<i64>,
        now: i64,
    ) -> RefreshTokenRecord {
        RefreshTokenRecord {
            handle: self.random_handle(),
            client_id: client_id.to_string(),
            subject: subject.to_string(),
            username: username.map(str::to_string),
            granted_scopes: granted.to_vec(),
            auth_time,
            issued_at: now,
            expires_at: now + self.lifetimes.refresh_token_secs,
            revoked: false,
        }
    }

    /// Stub login plus code issuance. Requested scopes are narrowed to what
    /// the client may receive.
    pub fn authorize(&self, req: &AuthorizeRequest) -> Result<String, IssuerError> {
        let client = self
            .clients
            .get(&req.client_id)
            .ok_or_else(|| IssuerError::UnknownClient(req.client_id.clone()))?;
        if !client.allows(GrantType::AuthorizationCode) {
            return Err(IssuerError::UnauthorizedClient(GrantType::AuthorizationCode));
        }
        if !client.redirect_uris.contains(&req.redirect_uri) {
            return Err(IssuerError::RedirectMismatch(req.redirect_uri.clone()));
        }
        let user = self.users.get(&req.username).ok_or(IssuerError::BadCredentials)?;
        if !user.verify_password(req.password.expose()) {
            return Err(IssuerError::BadCredentials);
        }
        let scopes = match requested_scope(req.scope.as_deref())? {
            None => client.allowed_scopes.clone(),
            Some(caps) => caps
                .into_iter()
                .filter(|c| covered(c, &client.allowed_scopes))
                .collect(),
        };
        let now = self.clock.now();
        let code = self.random_handle();
        self.store.put_code(
            AuthorizationCode {
                code: code.clone(),
                client_id: client.client_id.clone(),
                redirect_uri: req.redirect_uri.clone(),
                username: user.username.clone(),
                scopes,
                auth_time: now,
                expires_at: now + self.lifetimes.code_secs,
            },
            now,
        )?;
        Ok(code)
    }

    /// The token endpoint.
    pub fn token(&self, creds: &ClientCredentials, grant: TokenGrant) -> Result<TokenResponse, IssuerError> {
        let client = self.authenticate(creds)?;
        let grant_type = grant.grant_type();
        if !client.allows(grant_type) {
            return Err(IssuerError::UnauthorizedClient(grant_type));
        }
        match grant {
            TokenGrant::AuthorizationCode { code, redirect_uri } => {
                self.grant_code(client, &code, redirect_uri.as_deref())
            }
            TokenGrant::ClientCredentials { scope } => {
                self.grant_client_credentials(client, scope.as_deref())
            }
            TokenGrant::RefreshToken { refresh_token, scope } => {
                self.grant_refresh(client, &refresh_token, scope.as_deref())
            }
            TokenGrant::TokenExchange {
                subject_token,
                audience,
                scope,
            } => self.grant_exchange(client, &subject_token, audience.as_deref(), scope.as_deref()),
        }
    }

    pub fn exchange_code(
        &self,
        creds: &ClientCredentials,
        code: &str,
        redirect_uri: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        self.token(
            creds,
            TokenGrant::AuthorizationCode {
                code: code.to_string(),
                redirect_uri: redirect_uri.map(str::to_string),
            },
        )
    }

    pub fn client_credentials(
        &self,
        creds: &ClientCredentials,
        scope: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        self.token(
            creds,
            TokenGrant::ClientCredentials {
                scope: scope.map(str::to_string),
            },
        )
    }

    pub fn refresh(
        &self,
        creds: &ClientCredentials,
        refresh_token: &str,
        scope: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        self.token(
            creds,
            TokenGrant::RefreshToken {
                refresh_token: refresh_token.to_string(),
                scope: scope.map(str::to_string),
            },
        )
    }

    pub fn exchange(
        &self,
        creds: &ClientCredentials,
        subject_token: &str,
        audience: &str,
        scope: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        self.token(
            creds,
            TokenGrant::TokenExchange {
                subject_token: subject_token.to_string(),
                audience: Some(audience.to_string()),
                scope: scope.map(str::to_string),
            },
        )
    }

    fn grant_code(
        &self,
        client: &ClientRegistration,
        code: &str,
        redirect_uri: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        let now = self.clock.now();
        let record = self.store.redeem_code(code, now)?.map_err(|why| {
            IssuerError::InvalidGrant(match why {
                CodeRedemption::Unknown => "unknown authorization code".into(),
                CodeRedemption::AlreadyUsed => "authorization code already used".into(),
                CodeRedemption::Expired => "authorization code expired".into(),
            })
        })?;
        if record.client_id != client.client_id {
            return Err(IssuerError::InvalidGrant(
                "code was issued to another client".into(),
            ));
        }
        if redirect_uri.is_some_and(|r| r != record.redirect_uri) {
            return Err(IssuerError::InvalidGrant("redirect_uri does not match".into()));
        }
        let user = self
            .users
            .get(&record.username)
            .ok_or_else(|| IssuerError::InvalidGrant("user no longer exists".into()))?;
        let access = self.user_access_claims(
            Some(user),
            &user.subject,
            Self::audiences_for(client),
            &record.scopes,
            now,
        );
        let id = self.id_claims(user, &client.client_id, record.auth_time, now);
        let refresh_token = if client.allows(GrantType::RefreshToken) {
            let rec = self.new_refresh(
                &client.client_id,
                &user.subject,
                Some(&user.username),
                &record.scopes,
                Some(record.auth_time),
                now,
            );
            let handle = rec.handle.clone();
            self.store.put_refresh(rec, now)?;
            Some(handle)
        } else {
            None
        };
        tracing::info!(
            client = client.client_id,
            sub = user.subject,
            "authorization code redeemed"
        );
        Ok(TokenResponse {
            access_token: self.sign(&access, TokenKind::AccessToken)?,
            id_token: Some(self.sign(&id, TokenKind::IdToken)?),
            refresh_token,
            token_type: "Bearer".into(),
            expires_in: self.lifetimes.access_token_secs,
            scope: access.scope.clone(),
            issued_token_type: None,
        })
    }

    fn grant_client_credentials(
        &self,
        client: &ClientRegistration,
        scope: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        let scopes = match requested_scope(scope)? {
            None => client.allowed_scopes.clone(),
            Some(caps) => {
                if let Some(bad) = caps.iter().find(|c| !covered(c, &client.allowed_scopes)) {
                    return Err(IssuerError::ScopeNotAllowed(bad.to_string()));
                }
                caps
            }
        };
        let now = self.clock.now();
        let access =
            self.user_access_claims(None, &client.client_id, Self::audiences_for(client), &scopes, now);
        Ok(TokenResponse {
            access_token: self.sign(&access, TokenKind::AccessToken)?,
            id_token: None,
            refresh_token: None,
            token_type: "Bearer".into(),
            expires_in: self.lifetimes.access_token_secs,
            scope: access.scope.clone(),
            issued_token_type: None,
        })
    }

    fn grant_refresh(
        &self,
        client: &ClientRegistration,
        handle: &str,
        scope: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        let now = self.clock.now();
        let reject = |why: RefreshRejection| {
            IssuerError::InvalidGrant(match why {
                RefreshRejection::Unknown => "unknown refresh token".into(),
                RefreshRejection::Revoked => "refresh token was revoked or already used".into(),
                RefreshRejection::Expired => "refresh token expired".into(),
                RefreshRejection::WrongClient => "refresh token was issued to another client".into(),
            })
        };
        let record = self
            .store
            .check_refresh(handle, &client.client_id, now)
            .map_err(reject)?;
        let scopes = match requested_scope(scope)? {
            None => record.granted_scopes.clone(),
            Some(caps) => {
                if let Some(bad) = caps.iter().find(|c| !covered(c, &record.granted_scopes)) {
                    return Err(IssuerError::ScopeBroadening(bad.to_string()));
                }
                caps
            }
        };
        let user = record.username.as_deref().and_then(|u| self.users.get(u));
        if record.username.is_some() && user.is_none() {
            return Err(IssuerError::InvalidGrant("user no longer exists".into()));
        }
        let replacement = self.new_refresh(
            &client.client_id,
            &record.subject,
            record.username.as_deref(),
            &record.granted_scopes,
            record.auth_time,
            now,
        );
        let new_handle = replacement.handle.clone();
        self.store
            .rotate_refresh(handle, replacement, now)?
            .map_err(reject)?;
        let access =
            self.user_access_claims(user, &record.subject, Self::audiences_for(client), &scopes, now);
        tracing::info!(
            client = client.client_id,
            sub = record.subject,
            "refresh token rotated"
        );
        Ok(TokenResponse {
            access_token: self.sign(&access, TokenKind::AccessToken)?,
            id_token: None,
            refresh_token: Some(new_handle),
            token_type: "Bearer".into(),
            expires_in: self.lifetimes.access_token_secs,
            scope: access.scope.clone(),
            issued_token_type: None,
        })
    }

    /// Verifies a token this issuer signed and returns its claims.
    pub fn verify_own_token(&self, raw: &str) -> Result<ClaimSet, IssuerError> {
        let bad = |why: String| IssuerError::InvalidSubjectToken(why);
        let token = CompactToken::parse(raw).map_err(|e| bad(e.to_string()))?;
        let (header, claims) = decode(&token).map_err(|e| bad(e.to_string()))?;
        if header.kind() != Some(TokenKind::AccessToken) {
            return Err(bad("not an access token".into()));
        }
        let now = self.clock.now();
        let key = self
            .keys
            .read()
            .lookup(&header.kid, now)
            .ok_or_else(|| bad(format!("unknown signing key {:?}", header.kid)))?;
        if !verify_signature(&token, &key).map_err(|e| bad(e.to_string()))? {
            return Err(bad("signature does not verify".into()));
        }
        // Any audience is fine here: the presenter is exchanging the token,
        // not using it against us as a resource.
        let ctx = ValidationContext::new(
            vec![self.issuer.clone()],
            claims.audiences().to_vec(),
            self.clock.clone(),
        )
        .with_skew(std::time::Duration::ZERO);
        let report = validate_claims(&claims, &ctx);
        if !report.accepted() {
            return Err(bad(report.summary()));
        }
        let shape = check_profile_shape(&claims, TokenKind::AccessToken);
        if !shape.conformant() {
            return Err(bad(format!("{:?}", shape.violations)));
        }
        Ok(claims)
    }

    fn grant_exchange(
        &self,
        client: &ClientRegistration,
        subject_token: &str,
        audience: Option<&str>,
        scope: Option<&str>,
    ) -> Result<TokenResponse, IssuerError> {
        let audience = audience
            .filter(|a| !a.is_empty())
            .ok_or_else(|| IssuerError::InvalidRequest("audience is required".into()))?;
        let parent = self.verify_own_token(subject_token)?;
        if !self.exchange_audiences.iter().any(|a| a == audience) {
            return Err(IssuerError::AudienceNotPermitted(audience.to_string()));
        }
        let parent_scopes = match parent.scope.as_deref() {
            Some(s) => parse_scope(s).map_err(|e| IssuerError::InvalidSubjectToken(e.to_string()))?,
            None => Vec::new(),
        };
        let scopes = match requested_scope(scope)? {
            None => parent_scopes
                .iter()
                .filter(|c| covered(c, &client.allowed_scopes))
                .cloned()
                .collect(),
            Some(caps) => {
                if let Some(bad) = caps.iter().find(|c| !covered(c, &parent_scopes)) {
                    return Err(IssuerError::ScopeBroadening(bad.to_string()));
                }
                if let Some(bad) = caps.iter().find(|c| !covered(c, &client.allowed_scopes)) {
                    return Err(IssuerError::ScopeNotAllowed(bad.to_string()));
                }
                caps
            }
        };
        let now = self.clock.now();
        let sub = parent.sub.clone().expect("validated token has sub");
        let parent_exp = parent.exp.expect("validated token has exp");
        let exp = (now + self.lifetimes.access_token_secs).min(parent_exp);
        let mut child = ClaimSet::new(
            &sub,
            &self.issuer,
            vec![audience.to_string()],
            now,
            exp - now,
            self.random_handle(),
        );
        child.scope = scope_claim(&scopes);
        child.wlcg_groups = parent.wlcg_groups.clone();
        child.eduperson_assurance = parent.eduperson_assurance.clone();
        child.acr = parent.acr.clone();
        tracing::info!(
            client = client.client_id,
            sub,
            parent_jti = parent.jti.as_deref().unwrap_or(""),
            audience,
            "token exchanged"
        );
        Ok(TokenResponse {
            access_token: self.sign(&child, TokenKind::AccessToken)?,
            id_token: None,
            refresh_token: None,
            token_type: "Bearer".into(),
            expires_in: exp - now,
            scope: child.scope.clone(),
            issued_token_type: Some(ACCESS_TOKEN_TYPE.to_string()),
        })
    }
}

#[cfg(test)]
mod tests;
