//! Profile tokens: claim model, compact JWS serialization, signatures,
//! claim validation and profile shape checks.

mod claims;
mod keys;
mod shape;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use claims::{
    is_acceptable_issuer_url, is_oidc_standard_claim, is_profile_claim, names, ClaimSet, ANY_AUDIENCE,
    OIDC_STANDARD_CLAIMS, WLCG_VERSION,
};
pub(crate) use keys::{b64, unb64};
pub use keys::{Algorithm, Jwk, JwkSet, KeyPair, VerificationKey};
pub use shape::{
    check_profile_shape, ClaimRule, Presence, ShapeReport, ShapeViolation, PROFILE_TABLE, STANDARD_OIDC_ROW,
};
pub use validate::{
    same_issuer, validate_claims, ClaimFailure, ValidationContext, ValidationReport, DEFAULT_SKEW_SECS,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("invalid claims: {}", .0.join("; "))]
    InvalidClaims(Vec<String>),
    #[error("unsupported algorithm: {0}")]
    UnsupportedAlgorithm(String),
    #[error("token kid {token:?} does not match key kid {key:?}")]
    KidMismatch { token: String, key: String },
    #[error("{0:?} tokens are opaque and cannot be encoded as JWTs")]
    OpaqueKind(TokenKind),
    #[error("key error: {0}")]
    Key(String),
    #[error("not a conformant {}: {}", .kind.label(), .violations.join("; "))]
    ShapeViolation {
        kind: TokenKind,
        violations: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    IdToken,
    AccessToken,
    RefreshToken,
}

impl TokenKind {
    /// The JOSE `typ` header used for each JWT kind.
    pub fn header_typ(self) -> Option<&'static str> {
        match self {
            TokenKind::AccessToken => Some("at+jwt"),
            TokenKind::IdToken => Some("JWT"),
            TokenKind::RefreshToken => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenKind::IdToken => "ID token",
            TokenKind::AccessToken => "access token",
            TokenKind::RefreshToken => "refresh token",
        }
    }
}

/// A compact serialized JWS: `header.payload.signature`, base64url.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompactToken(String);

impl CompactToken {
    /// Checks the three-segment structure; contents are not decoded.
    pub fn parse(raw: impl Into<String>) -> Result<Self, TokenError> {
        let raw = raw.into();
        let raw = raw.trim().to_string();
        let segments = raw.split('.').count();
        if segments != 3 {
            return Err(TokenError::Malformed(format!(
                "expected 3 segments, found {segments}"
            )));
        }
        Ok(Self(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    fn segments(&self) -> (&str, &str, &str) {
        let mut it = self.0.splitn(3, '.');
        let h = it.next().unwrap_or_default();
        let p = it.next().unwrap_or_default();
        let s = it.next().unwrap_or_default();
        (h, p, s)
    }

    /// The bytes covered by the signature.
    fn signing_input(&self) -> &str {
        let (h, p, _) = self.segments();
        &self.0[..h.len() + 1 + p.len()]
    }

    /// The token with its signature segment replaced, safe for logs and
    /// transcripts.
    pub fn redacted(&self) -> String {
        format!("{}.<signature>", self.signing_input())
    }
}

impl fmt::Display for CompactToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Decoded JOSE header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub alg: String,
    pub kid: String,
    pub typ: Option<String>,
    pub other: Map<String, Value>,
}

impl Header {
    fn from_json(mut map: Map<String, Value>) -> Result<Self, TokenError> {
        let mut take = |name: &str| -> Result<Option<String>, TokenError> {
            match map.remove(name) {
                None => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(TokenError::Malformed(format!("header {name} must be a string"))),
            }
        };
        let alg = take("alg")?.ok_or_else(|| TokenError::Malformed("header lacks alg".into()))?;
        let kid = take("kid")?.ok_or_else(|| TokenError::Malformed("header lacks kid".into()))?;
        let typ = take("typ")?;
        Ok(Self {
            alg,
            kid,
            typ,
            other: map,
        })
    }

    /// The JWT kind announced by `typ`, if recognizable.
    pub fn kind(&self) -> Option<TokenKind> {
        match self.typ.as_deref()?.to_ascii_lowercase().as_str() {
            "at+jwt" | "application/at+jwt" => Some(TokenKind::AccessToken),
            "jwt" => Some(TokenKind::IdToken),
            _ => None,
        }
    }
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    alg: &'a str,
    typ: &'a str,
    kid: &'a str,
}

/// Signs `claims` as a token of `kind`. The header carries the key's kid and
/// algorithm and a `typ` distinguishing access from ID tokens.
pub fn encode_and_sign(
    claims: &ClaimSet,
    kind: TokenKind,
    key: &KeyPair,
) -> Result<CompactToken, TokenError> {
    let typ = kind.header_typ().ok_or(TokenError::OpaqueKind(kind))?;
    let problems = claims.check_invariants();
    if !problems.is_empty() {
        return Err(TokenError::InvalidClaims(problems));
    }
    let header = serde_json::to_vec(&HeaderOut {
        alg: key.algorithm().as_str(),
        typ,
        kid: key.kid(),
    })
    .expect("header serializes");
    let payload = serde_json::to_vec(&Value::Object(claims.to_json())).expect("claims serialize");
    let signing_input = format!("{}.{}", b64(&header), b64(&payload));
    let signature = key.sign(signing_input.as_bytes());
    Ok(CompactToken(format!("{signing_input}.{}", b64(&signature))))
}

/// Like [`encode_and_sign`], but refuses claim sets that do not fit the
/// profile column for `kind`.
pub fn mint_conformant(
    claims: &ClaimSet,
    kind: TokenKind,
    key: &KeyPair,
) -> Result<CompactToken, TokenError> {
    let shape = check_profile_shape(claims, kind);
    if !shape.conformant() {
        return Err(TokenError::ShapeViolation {
            kind,
            violations: shape.violations.iter().map(ToString::to_string).collect(),
        });
    }
    encode_and_sign(claims, kind, key)
}

fn decode_segment(segment: &str, what: &str) -> Result<Map<String, Value>, TokenError> {
    let bytes = unb64(segment)?;
    match serde_json::from_slice::<Value>(&bytes) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(TokenError::Malformed(format!("{what} is not a JSON object"))),
        Err(e) => Err(TokenError::Malformed(format!("{what}: {e}"))),
    }
}

pub fn decode_header(token: &CompactToken) -> Result<Header, TokenError> {
    let (h, _, _) = token.segments();
    Header::from_json(decode_segment(h, "header")?)
}

/// Extracts header and claims. Nothing is validated.
pub fn decode(token: &CompactToken) -> Result<(Header, ClaimSet), TokenError> {
    let (_, p, _) = token.segments();
    let header = decode_header(token)?;
    let claims = ClaimSet::from_json(decode_segment(p, "payload")?)?;
    Ok((header, claims))
}

/// `Ok(true)` iff the signature is valid under `key` and the header's
/// algorithm is the key's algorithm. A header naming an algorithm outside
/// the allowlist is an error regardless of the signature bytes.
pub fn verify_signature(token: &CompactToken, key: &VerificationKey) -> Result<bool, TokenError> {
    let header = decode_header(token)?;
    let alg = Algorithm::from_name(&header.alg)?;
    if header.kid != key.kid() {
        return Err(TokenError::KidMismatch {
            token: header.kid,
            key: key.kid().to_string(),
        });
    }
    if alg != key.algorithm() {
        return Ok(false);
    }
    let (_, _, sig) = token.segments();
    let Ok(signature) = unb64(sig) else {
        return Ok(false);
    };
    Ok(key.verify(token.signing_input().as_bytes(), &signature))
}
