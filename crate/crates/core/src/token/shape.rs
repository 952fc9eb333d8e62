//! Which claims each token kind carries.

use std::fmt;

use serde::Serialize;

use super::claims::names;
use super::{ClaimSet, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    Required,
    Optional,
    NotPermitted,
}

impl Presence {
    pub fn permitted(self) -> bool {
        self != Presence::NotPermitted
    }
}

/// One row of the claim matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClaimRule {
    pub claim: &'static str,
    pub id_token: Presence,
    pub access_token: Presence,
}

impl ClaimRule {
    pub fn presence(&self, kind: TokenKind) -> Presence {
        match kind {
            TokenKind::IdToken => self.id_token,
            TokenKind::AccessToken => self.access_token,
            TokenKind::RefreshToken => Presence::NotPermitted,
        }
    }
}

/// Row label for the OIDC standard claims group.
pub const STANDARD_OIDC_ROW: &str = "standard OIDC claims";

const fn rule(claim: &'static str, id_token: Presence, access_token: Presence) -> ClaimRule {
    ClaimRule {
        claim,
        id_token,
        access_token,
    }
}

use Presence::{NotPermitted as No, Optional as Opt, Required as Req};

pub const PROFILE_TABLE: [ClaimRule; 14] = [
    rule(names::SUB, Req, Req),
    rule(names::EXP, Req, Req),
    rule(names::ISS, Req, Req),
    rule(names::ACR, Opt, Opt),
    rule(names::AUD, Req, Req),
    rule(names::IAT, Req, Req),
    rule(names::NBF, Opt, Opt),
    rule(names::JTI, Req, Req),
    rule(names::EDUPERSON_ASSURANCE, Opt, Opt),
    rule(names::WLCG_VER, Req, Req),
    rule(names::WLCG_GROUPS, Opt, Opt),
    rule(names::AUTH_TIME, Opt, No),
    rule(STANDARD_OIDC_ROW, Opt, No),
    rule(names::SCOPE, No, Opt),
];

fn is_present(claims: &ClaimSet, row: &str) -> bool {
    match row {
        names::SUB => claims.sub.is_some(),
        names::EXP => claims.exp.is_some(),
        names::ISS => claims.iss.is_some(),
        names::ACR => claims.acr.is_some(),
        names::AUD => claims.aud.is_some(),
        names::IAT => claims.iat.is_some(),
        names::NBF => claims.nbf.is_some(),
        names::JTI => claims.jti.is_some(),
        names::EDUPERSON_ASSURANCE => claims.eduperson_assurance.is_some(),
        names::WLCG_VER => claims.wlcg_ver.is_some(),
        names::WLCG_GROUPS => claims.wlcg_groups.is_some(),
        names::AUTH_TIME => claims.auth_time.is_some(),
        names::SCOPE => claims.scope.is_some(),
        STANDARD_OIDC_ROW => !claims.oidc_standard.is_empty(),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum ShapeViolation {
    Missing { claim: String, kind: TokenKind },
    NotPermitted { claim: String, kind: TokenKind },
    OpaqueKind { kind: TokenKind },
}

fn column(kind: TokenKind) -> &'static str {
    match kind {
        TokenKind::IdToken => "ID-token",
        TokenKind::AccessToken => "access-token",
        TokenKind::RefreshToken => "refresh-token",
    }
}

impl fmt::Display for ShapeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeViolation::Missing { claim, kind } => {
                write!(f, "{claim} required in {} column but missing", column(*kind))
            }
            ShapeViolation::NotPermitted { claim, kind } => {
                write!(f, "{claim} not in {} column", column(*kind))
            }
            ShapeViolation::OpaqueKind { kind } => {
                write!(f, "{} has no claim profile", kind.label())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeReport {
    pub kind: TokenKind,
    pub violations: Vec<ShapeViolation>,
    pub warnings: Vec<String>,
}

impl ShapeReport {
    pub fn conformant(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `claims` against the profile column for `kind`. Unrecognized
/// claims only produce warnings.
pub fn check_profile_shape(claims: &ClaimSet, kind: TokenKind) -> ShapeReport {
    let mut report = ShapeReport {
        kind,
        violations: Vec::new(),
        warnings: Vec::new(),
    };
    if kind == TokenKind::RefreshToken {
        report.violations.push(ShapeViolation::OpaqueKind { kind });
        return report;
    }
    for row in &PROFILE_TABLE {
        let present = is_present(claims, row.claim);
        match (row.presence(kind), present) {
            (Presence::Required, false) => report.violations.push(ShapeViolation::Missing {
                claim: row.claim.to_string(),
                kind,
            }),
            (Presence::NotPermitted, true) => report.violations.push(ShapeViolation::NotPermitted {
                claim: row.claim.to_string(),
                kind,
            }),
            _ => {}
        }
    }
    for name in claims.extra.keys() {
        report.warnings.push(format!("unrecognized claim {name:?}"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ClaimSet {
        ClaimSet::new("u", "https://i.test", vec!["a".into()], 0, 600, "j")
    }

    #[test]
    fn auth_time_violates_access_column() {
        let mut c = minimal();
        c.auth_time = Some(0);
        let report = check_profile_shape(&c, TokenKind::AccessToken);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(
            report.violations[0].to_string(),
            "auth_time not in access-token column"
        );
    }

    #[test]
    fn access_token_without_authorization_claims_conforms() {
        let report = check_profile_shape(&minimal(), TokenKind::AccessToken);
        assert!(report.conformant());
    }

    #[test]
    fn minimal_id_token_has_no_warnings() {
        let report = check_profile_shape(&minimal(), TokenKind::IdToken);
        assert!(report.conformant());
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn extra_claims_warn_only() {
        let mut c = minimal();
        c.extra.insert("foo".into(), "bar".into());
        let report = check_profile_shape(&c, TokenKind::AccessToken);
        assert!(report.conformant());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn missing_required_claims_are_reported() {
        let mut c = minimal();
        c.sub = None;
        c.wlcg_ver = None;
        let report = check_profile_shape(&c, TokenKind::IdToken);
        assert_eq!(report.violations.len(), 2);
    }
}
