//! The profile claim set and its JSON wire mapping.

use serde_json::{Map, Value};

use super::TokenError;

/// Default value of the `wlcg.ver` claim.
pub const WLCG_VERSION: &str = "1.0";

/// Audience value that every resource accepts unless configured otherwise.
pub const ANY_AUDIENCE: &str = "https://wlcg.cern.ch/jwt/v1/any";

/// Claim names exactly as they appear on the wire.
pub mod names {
    pub const SUB: &str = "sub";
    pub const EXP: &str = "exp";
    pub const ISS: &str = "iss";
    pub const ACR: &str = "acr";
    pub const AUD: &str = "aud";
    pub const IAT: &str = "iat";
    pub const NBF: &str = "nbf";
    pub const JTI: &str = "jti";
    pub const EDUPERSON_ASSURANCE: &str = "eduperson_assurance";
    pub const WLCG_VER: &str = "wlcg.ver";
    pub const WLCG_GROUPS: &str = "wlcg.groups";
    pub const AUTH_TIME: &str = "auth_time";
    pub const SCOPE: &str = "scope";

    pub const ALL: [&str; 13] = [
        SUB,
        EXP,
        ISS,
        ACR,
        AUD,
        IAT,
        NBF,
        JTI,
        EDUPERSON_ASSURANCE,
        WLCG_VER,
        WLCG_GROUPS,
        AUTH_TIME,
        SCOPE,
    ];
}

/// The OpenID Connect standard claims (OIDC Core, "Standard Claims").
pub const OIDC_STANDARD_CLAIMS: [&str; 19] = [
    "name",
    "given_name",
    "family_name",
    "middle_name",
    "nickname",
    "preferred_username",
    "profile",
    "picture",
    "website",
    "email",
    "email_verified",
    "gender",
    "birthdate",
    "zoneinfo",
    "locale",
    "phone_number",
    "phone_number_verified",
    "address",
    "updated_at",
];

pub fn is_oidc_standard_claim(name: &str) -> bool {
    OIDC_STANDARD_CLAIMS.contains(&name)
}

pub fn is_profile_claim(name: &str) -> bool {
    names::ALL.contains(&name)
}

/// Every claim of the WLCG common JWT profile, plus pass-through maps.
///
/// All profile claims are optional at this level so that decoding stays
/// lossless and shape checks can report what is missing. Signing requires
/// the mandatory subset, see [`ClaimSet::check_invariants`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClaimSet {
    pub sub: Option<String>,
    pub iss: Option<String>,
    pub aud: Option<Vec<String>>,
    pub exp: Option<i64>,
    pub iat: Option<i64>,
    pub nbf: Option<i64>,
    pub jti: Option<String>,
    pub acr: Option<String>,
    pub eduperson_assurance: Option<Vec<String>>,
    pub wlcg_ver: Option<String>,
    pub wlcg_groups: Option<Vec<String>>,
    pub scope: Option<String>,
    pub auth_time: Option<i64>,
    /// OIDC standard claims (`name`, `email`, ...), ID tokens only.
    pub oidc_standard: Map<String, Value>,
    /// Anything else found in the payload.
    pub extra: Map<String, Value>,
}

impl ClaimSet {
    /// A claim set carrying the mandatory claims, with `wlcg.ver` set to
    /// [`WLCG_VERSION`] and `exp = iat + lifetime`.
    pub fn new(
        sub: impl Into<String>,
        iss: impl Into<String>,
        aud: Vec<String>,
        iat: i64,
        lifetime: i64,
        jti: impl Into<String>,
    ) -> Self {
        Self {
            sub: Some(sub.into()),
            iss: Some(iss.into()),
            aud: Some(aud),
            iat: Some(iat),
            exp: Some(iat + lifetime),
            jti: Some(jti.into()),
            wlcg_ver: Some(WLCG_VERSION.to_string()),
            ..Self::default()
        }
    }

    pub fn audiences(&self) -> &[String] {
        self.aud.as_deref().unwrap_or(&[])
    }

    pub fn groups(&self) -> &[String] {
        self.wlcg_groups.as_deref().unwrap_or(&[])
    }

    /// Scope entries split on single spaces. Empty when no scope claim.
    pub fn scope_entries(&self) -> Vec<&str> {
        match self.scope.as_deref() {
            Some(s) if !s.is_empty() => s.split(' ').collect(),
            _ => Vec::new(),
        }
    }

    /// Lists every violated invariant. Empty means the set may be signed.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut require_text = |name: &str, v: &Option<String>| match v {
            None => problems.push(format!("{name} is required")),
            Some(s) if s.is_empty() => problems.push(format!("{name} must be non-empty")),
            Some(_) => {}
        };
        require_text(names::SUB, &self.sub);
        require_text(names::ISS, &self.iss);
        require_text(names::JTI, &self.jti);
        require_text(names::WLCG_VER, &self.wlcg_ver);

        if let Some(iss) = &self.iss {
            if !iss.is_empty() && !is_acceptable_issuer_url(iss) {
                problems.push(format!("iss {iss:?} is not an absolute https URL"));
            }
        }
        match &self.aud {
            None => problems.push("aud is required".into()),
            Some(a) if a.is_empty() => problems.push("aud must be non-empty".into()),
            Some(a) if a.iter().any(String::is_empty) => {
                problems.push("aud entries must be non-empty".into())
            }
            Some(_) => {}
        }
        match (self.iat, self.exp) {
            (None, _) => problems.push("iat is required".into()),
            (_, None) => problems.push("exp is required".into()),
            (Some(iat), Some(exp)) if exp <= iat => {
                problems.push(format!("exp ({exp}) must be after iat ({iat})"))
            }
            _ => {}
        }
        if let (Some(nbf), Some(exp)) = (self.nbf, self.exp) {
            if nbf > exp {
                problems.push(format!("nbf ({nbf}) must not be after exp ({exp})"));
            }
        }
        for group in self.groups() {
            if !is_group_path(group) {
                problems.push(format!(
                    "group {group:?} must start with '/' and have no empty segment"
                ));
            }
        }
        if let Some(values) = &self.eduperson_assurance {
            for v in values {
                if url::Url::parse(v).is_err() {
                    problems.push(format!("assurance value {v:?} is not a URI"));
                }
            }
        }
        for key in self.oidc_standard.keys() {
            if !is_oidc_standard_claim(key) {
                problems.push(format!("{key:?} is not a standard OIDC claim"));
            }
        }
        for key in self.extra.keys() {
            if is_profile_claim(key) || is_oidc_standard_claim(key) {
                problems.push(format!("{key:?} must use its typed field, not extra"));
            }
        }
        problems
    }

    /// Serializes to the wire claim map. `aud` is always emitted as a list.
    pub fn to_json(&self) -> Map<String, Value> {
        let mut map = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        put(names::SUB, self.sub.clone().map(Value::from));
        put(names::ISS, self.iss.clone().map(Value::from));
        put(names::AUD, self.aud.clone().map(Value::from));
        put(names::EXP, self.exp.map(Value::from));
        put(names::IAT, self.iat.map(Value::from));
        put(names::NBF, self.nbf.map(Value::from));
        put(names::JTI, self.jti.clone().map(Value::from));
        put(names::ACR, self.acr.clone().map(Value::from));
        put(
            names::EDUPERSON_ASSURANCE,
            self.eduperson_assurance.clone().map(Value::from),
        );
        put(names::WLCG_VER, self.wlcg_ver.clone().map(Value::from));
        put(names::WLCG_GROUPS, self.wlcg_groups.clone().map(Value::from));
        put(names::SCOPE, self.scope.clone().map(Value::from));
        put(names::AUTH_TIME, self.auth_time.map(Value::from));
        for (k, v) in self.oidc_standard.iter().chain(self.extra.iter()) {
            map.insert(k.clone(), v.clone());
        }
        map
    }

    /// Parses a wire claim map without validating anything beyond types.
    pub fn from_json(map: Map<String, Value>) -> Result<Self, TokenError> {
        let mut claims = ClaimSet::default();
        for (key, value) in map {
            match key.as_str() {
                names::SUB => claims.sub = Some(string(&key, value)?),
                names::ISS => claims.iss = Some(string(&key, value)?),
                names::AUD => claims.aud = Some(string_or_list(&key, value)?),
                names::EXP => claims.exp = Some(integer(&key, &value)?),
                names::IAT => claims.iat = Some(integer(&key, &value)?),
                names::NBF => claims.nbf = Some(integer(&key, &value)?),
                names::JTI => claims.jti = Some(string(&key, value)?),
                names::ACR => claims.acr = Some(string(&key, value)?),
                names::EDUPERSON_ASSURANCE => claims.eduperson_assurance = Some(string_or_list(&key, value)?),
                names::WLCG_VER => claims.wlcg_ver = Some(string(&key, value)?),
                names::WLCG_GROUPS => claims.wlcg_groups = Some(list(&key, value)?),
                names::SCOPE => claims.scope = Some(string(&key, value)?),
                names::AUTH_TIME => claims.auth_time = Some(integer(&key, &value)?),
                k if is_oidc_standard_claim(k) => {
                    claims.oidc_standard.insert(key, value);
                }
                _ => {
                    claims.extra.insert(key, value);
                }
            }
        }
        Ok(claims)
    }
}

/// `true` for "/a", "/a/b"; `false` for "", "/", "a", "/a/", "/a//b".
pub(crate) fn is_group_path(group: &str) -> bool {
    match group.strip_prefix('/') {
        Some(rest) => rest.split('/').all(|s| !s.is_empty()),
        None => false,
    }
}

/// Absolute https URL, or http for loopback hosts.
pub fn is_acceptable_issuer_url(raw: &str) -> bool {
    match url::Url::parse(raw) {
        Ok(u) => match u.scheme() {
            "https" => u.host().is_some(),
            "http" => matches!(u.host_str(), Some("localhost" | "127.0.0.1" | "[::1]")),
            _ => false,
        },
        Err(_) => false,
    }
}

fn malformed(key: &str, expected: &str) -> TokenError {
    TokenError::Malformed(format!("claim {key:?} must be {expected}"))
}

fn string(key: &str, value: Value) -> Result<String, TokenError> {
    match value {
        Value::String(s) => Ok(s),
        _ => Err(malformed(key, "a string")),
    }
}

fn integer(key: &str, value: &Value) -> Result<i64, TokenError> {
    value.as_i64().ok_or_else(|| malformed(key, "an integer"))
}

fn list(key: &str, value: Value) -> Result<Vec<String>, TokenError> {
    match value {
        Value::Array(items) => items.into_iter().map(|v| string(key, v)).collect(),
        _ => Err(malformed(key, "a list of strings")),
    }
}

fn string_or_list(key: &str, value: Value) -> Result<Vec<String>, TokenError> {
    match value {
        Value::String(s) => Ok(vec![s]),
        other => list(key, other),
    }
}
