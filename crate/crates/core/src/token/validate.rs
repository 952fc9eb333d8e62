//! Time-window, issuer and audience validation.

use std::fmt;
use std::time::Duration;

use serde::Serialize;

use super::claims::ANY_AUDIENCE;
use super::{ClaimSet, TokenKind};
use crate::clock::SharedClock;

pub const DEFAULT_SKEW_SECS: u64 = 60;

/// Issuer URLs compare equal modulo one trailing slash.
pub fn same_issuer(a: &str, b: &str) -> bool {
    a.strip_suffix('/').unwrap_or(a) == b.strip_suffix('/').unwrap_or(b)
}

#[derive(Debug, Clone)]
pub struct ValidationContext {
    pub expected_audiences: Vec<String>,
    pub accepted_issuers: Vec<String>,
    pub clock: SharedClock,
    pub skew_tolerance: Duration,
    pub required_kind: TokenKind,
    /// A token whose `aud` contains this value matches every audience.
    pub wildcard_audience: Option<String>,
}

impl ValidationContext {
    pub fn new(accepted_issuers: Vec<String>, expected_audiences: Vec<String>, clock: SharedClock) -> Self {
        Self {
            expected_audiences,
            accepted_issuers,
            clock,
            skew_tolerance: Duration::from_secs(DEFAULT_SKEW_SECS),
            required_kind: TokenKind::AccessToken,
            wildcard_audience: Some(ANY_AUDIENCE.to_string()),
        }
    }

    pub fn with_skew(mut self, skew: Duration) -> Self {
        self.skew_tolerance = skew;
        self
    }

    pub fn with_kind(mut self, kind: TokenKind) -> Self {
        self.required_kind = kind;
        self
    }

    pub fn without_wildcard(mut self) -> Self {
        self.wildcard_audience = None;
        self
    }

    fn skew(&self) -> i64 {
        i64::try_from(self.skew_tolerance.as_secs()).unwrap_or(i64::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "failure", rename_all = "snake_case")]
pub enum ClaimFailure {
    MissingIssuer,
    IssuerNotAccepted { iss: String },
    AudienceMismatch { aud: Vec<String> },
    MissingExpiry,
    Expired { exp: i64, now: i64 },
    NotYetValid { nbf: i64, now: i64 },
    MissingIssuedAt,
    IssuedInFuture { iat: i64, now: i64 },
    MissingJti,
    MissingVersion,
}

impl fmt::Display for ClaimFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClaimFailure::MissingIssuer => f.write_str("token has no issuer"),
            ClaimFailure::IssuerNotAccepted { iss } => write!(f, "issuer {iss} is not accepted"),
            ClaimFailure::AudienceMismatch { aud } => {
                write!(f, "audience {aud:?} does not match this resource")
            }
            ClaimFailure::MissingExpiry => f.write_str("token has no expiry"),
            ClaimFailure::Expired { exp, now } => write!(f, "token expired at {exp} (now {now})"),
            ClaimFailure::NotYetValid { nbf, now } => {
                write!(f, "token not valid before {nbf} (now {now})")
            }
            ClaimFailure::MissingIssuedAt => f.write_str("token has no issued-at time"),
            ClaimFailure::IssuedInFuture { iat, now } => {
                write!(f, "token issued in the future at {iat} (now {now})")
            }
            ClaimFailure::MissingJti => f.write_str("token has no jti"),
            ClaimFailure::MissingVersion => f.write_str("token has no wlcg.ver"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub failures: Vec<ClaimFailure>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        self.failures
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Evaluates every claim rule and reports each one that fails.
pub fn validate_claims(claims: &ClaimSet, ctx: &ValidationContext) -> ValidationReport {
    let now = ctx.clock.now();
    let skew = ctx.skew();
    let mut failures = Vec::new();

    match &claims.iss {
        None => failures.push(ClaimFailure::MissingIssuer),
        Some(iss) if !ctx.accepted_issuers.iter().any(|a| same_issuer(a, iss)) => {
            failures.push(ClaimFailure::IssuerNotAccepted { iss: iss.clone() })
        }
        Some(_) => {}
    }

    let aud = claims.audiences();
    let wildcard = ctx.wildcard_audience.as_ref().is_some_and(|w| aud.contains(w));
    let intersects = aud.iter().any(|a| ctx.expected_audiences.contains(a));
    if !(wildcard || intersects) {
        failures.push(ClaimFailure::AudienceMismatch { aud: aud.to_vec() });
    }

    match claims.exp {
        None => failures.push(ClaimFailure::MissingExpiry),
        Some(exp) if now >= exp.saturating_add(skew) => failures.push(ClaimFailure::Expired { exp, now }),
        Some(_) => {}
    }
    if let Some(nbf) = claims.nbf {
        if now < nbf.saturating_sub(skew) {
            failures.push(ClaimFailure::NotYetValid { nbf, now });
        }
    }
    match claims.iat {
        None => failures.push(ClaimFailure::MissingIssuedAt),
        Some(iat) if now < iat.saturating_sub(skew) => {
            failures.push(ClaimFailure::IssuedInFuture { iat, now })
        }
        Some(_) => {}
    }
    if claims.jti.as_deref().is_none_or(str::is_empty) {
        failures.push(ClaimFailure::MissingJti);
    }
    if claims.wlcg_ver.as_deref().is_none_or(str::is_empty) {
        failures.push(ClaimFailure::MissingVersion);
    }
    ValidationReport { failures }
}
