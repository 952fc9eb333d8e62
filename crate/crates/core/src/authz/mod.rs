//! Capability- and group-based authorization decisions.
//!
//! Capabilities come from the `scope` claim (`storage.write:/data`), groups
//! from `wlcg.groups`. A relying party picks which of the two it honours
//! with an [`AuthzPolicy`].

mod capability;
mod group;
mod path;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use capability::{authorize_capability, format_scope, parse_scope, scope_is_attenuation, Capability};
pub use group::{authorize_groups, GroupMatching, GroupName};
pub use path::{Operation, ResourcePath};

use crate::token::ClaimSet;

/// Trace marker for tokens carrying neither scope nor groups.
pub const NO_AUTHORIZATION_CLAIMS: &str = "no authorization claims";
/// Trace marker for group-only policies with no rule covering the request.
pub const NO_APPLICABLE_RULE: &str = "no applicable rule";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthzError {
    #[error("malformed scope entry {entry:?}: {reason}")]
    MalformedScopeEntry { entry: String, reason: String },
    #[error("invalid operation {0:?}")]
    InvalidOperation(String),
    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: String },
    #[error("invalid group {0:?}")]
    InvalidGroup(String),
    #[error("duplicate group rule for {operation} at {path}")]
    DuplicateRule { operation: String, path: String },
}

/// An operation on a path, as mapped from an incoming request.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResourceRequest {
    pub operation: Operation,
    pub path: ResourcePath,
}

impl ResourceRequest {
    pub fn new(operation: Operation, path: ResourcePath) -> Self {
        Self { operation, path }
    }

    pub fn parse(operation: &str, path: &str) -> Result<Self, AuthzError> {
        Ok(Self {
            operation: Operation::parse(operation)?,
            path: ResourcePath::parse(path)?,
        })
    }
}

impl fmt::Display for ResourceRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.operation, self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuthzDecision {
    pub allowed: bool,
    pub matched_rule: Option<String>,
    pub trace: Vec<String>,
}

impl AuthzDecision {
    pub(crate) fn from_parts(matched_rule: Option<String>, trace: Vec<String>) -> Self {
        Self {
            allowed: matched_rule.is_some(),
            matched_rule,
            trace,
        }
    }

    fn deny(trace: Vec<String>) -> Self {
        Self::from_parts(None, trace)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthzMode {
    CapabilityOnly,
    GroupOnly,
    #[default]
    Either,
}

/// Grants `operation` under `path` to members of `group`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRule {
    pub operation: Operation,
    pub path: ResourcePath,
    pub group: GroupName,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct PolicyFile {
    #[serde(default)]
    mode: AuthzMode,
    #[serde(default)]
    group_matching: GroupMatching,
    #[serde(default)]
    group_rules: Vec<GroupRule>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct AuthzPolicy {
    mode: AuthzMode,
    group_matching: GroupMatching,
    group_rules: Vec<GroupRule>,
}

impl TryFrom<PolicyFile> for AuthzPolicy {
    type Error = AuthzError;

    fn try_from(f: PolicyFile) -> Result<Self, Self::Error> {
        AuthzPolicy::new(f.mode, f.group_matching, f.group_rules)
    }
}

impl From<AuthzPolicy> for PolicyFile {
    fn from(p: AuthzPolicy) -> Self {
        PolicyFile {
            mode: p.mode,
            group_matching: p.group_matching,
            group_rules: p.group_rules,
        }
    }
}

impl AuthzPolicy {
    /// Rejects two rules for the same (operation, path) pair.
    pub fn new(
        mode: AuthzMode,
        group_matching: GroupMatching,
        group_rules: Vec<GroupRule>,
    ) -> Result<Self, AuthzError> {
        let mut seen = BTreeSet::new();
        for rule in &group_rules {
            if !seen.insert((rule.operation.clone(), rule.path.clone())) {
                return Err(AuthzError::DuplicateRule {
                    operation: rule.operation.to_string(),
                    path: rule.path.to_string(),
                });
            }
        }
        Ok(Self {
            mode,
            group_matching,
            group_rules,
        })
    }

    pub fn capability_only() -> Self {
        Self {
            mode: AuthzMode::CapabilityOnly,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> AuthzMode {
        self.mode
    }

    pub fn group_matching(&self) -> GroupMatching {
        self.group_matching
    }

    pub fn group_rules(&self) -> &[GroupRule] {
        &self.group_rules
    }

    /// The rule with the longest path covering the request, if any.
    pub fn most_specific_rule(&self, req: &ResourceRequest) -> Option<&GroupRule> {
        self.group_rules
            .iter()
            .filter(|r| r.operation == req.operation && r.path.is_prefix_of(&req.path))
            .max_by_key(|r| r.path.segments().len())
    }
}

fn capability_branch(claims: &ClaimSet, req: &ResourceRequest) -> AuthzDecision {
    let Some(scope) = claims.scope.as_deref() else {
        return AuthzDecision::deny(vec!["token carries no scope claim".into()]);
    };
    match parse_scope(scope) {
        Ok(caps) => authorize_capability(&caps, req),
        Err(e) => AuthzDecision::deny(vec![format!("unusable scope claim: {e}")]),
    }
}

fn group_branch(claims: &ClaimSet, req: &ResourceRequest, policy: &AuthzPolicy) -> AuthzDecision {
    let Some(rule) = policy.most_specific_rule(req) else {
        return AuthzDecision::deny(vec![format!("{NO_APPLICABLE_RULE} for {req}")]);
    };
    let mut trace = vec![format!(
        "rule {} {} requires {}",
        rule.operation, rule.path, rule.group
    )];
    let mut groups = Vec::new();
    for raw in claims.groups() {
        match GroupName::parse(raw) {
            Ok(g) => groups.push(g),
            Err(e) => trace.push(format!("ignoring {e}")),
        }
    }
    let decision = authorize_groups(&groups, &rule.group, policy.group_matching);
    trace.extend(decision.trace);
    AuthzDecision::from_parts(decision.matched_rule, trace)
}

/// Decides `req` for an already validated token.
pub fn authorize(claims: &ClaimSet, req: &ResourceRequest, policy: &AuthzPolicy) -> AuthzDecision {
    let has_scope = claims.scope.as_deref().is_some_and(|s| !s.is_empty());
    let has_groups = !claims.groups().is_empty();
    if !has_scope && !has_groups {
        return AuthzDecision::deny(vec![NO_AUTHORIZATION_CLAIMS.to_string()]);
    }
    match policy.mode {
        AuthzMode::CapabilityOnly => capability_branch(claims, req),
        AuthzMode::GroupOnly => group_branch(claims, req, policy),
        AuthzMode::Either => {
            let cap = capability_branch(claims, req);
            if cap.allowed {
                return cap;
            }
            let grp = group_branch(claims, req, policy);
            let mut trace = cap.trace;
            trace.extend(grp.trace);
            AuthzDecision::from_parts(grp.matched_rule, trace)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn claims(scope: Option<&str>, groups: &[&str]) -> ClaimSet {
        let mut c = ClaimSet::new("u", "https://i.test", vec!["a".into()], 0, 60, "j");
        c.scope = scope.map(str::to_string);
        if !groups.is_empty() {
            c.wlcg_groups = Some(groups.iter().map(|g| g.to_string()).collect());
        }
        c
    }

    fn read_anywhere_policy(mode: AuthzMode) -> AuthzPolicy {
        AuthzPolicy::new(
            mode,
            GroupMatching::Hierarchical,
            vec![GroupRule {
                operation: Operation::parse("storage.read").unwrap(),
                path: ResourcePath::root(),
                group: GroupName::parse("/wlcg").unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn either_mode_allows_by_group() {
        let policy = read_anywhere_policy(AuthzMode::Either);
        let req = ResourceRequest::parse("storage.read", "/any/where").unwrap();
        let d = authorize(&claims(None, &["/wlcg"]), &req, &policy);
        assert!(d.allowed, "{:?}", d.trace);
    }

    #[test]
    fn capability_only_ignores_groups() {
        let policy = read_anywhere_policy(AuthzMode::CapabilityOnly);
        let req = ResourceRequest::parse("storage.read", "/x").unwrap();
        assert!(!authorize(&claims(None, &["/wlcg"]), &req, &policy).allowed);
    }

    #[test]
    fn no_authorization_claims_denied() {
        let policy = read_anywhere_policy(AuthzMode::Either);
        let req = ResourceRequest::parse("storage.read", "/x").unwrap();
        let d = authorize(&claims(None, &[]), &req, &policy);
        assert!(!d.allowed);
        assert_eq!(d.trace, vec![NO_AUTHORIZATION_CLAIMS.to_string()]);
    }

    #[test]
    fn group_only_without_rule() {
        let policy = read_anywhere_policy(AuthzMode::GroupOnly);
        let req = ResourceRequest::parse("storage.write", "/x").unwrap();
        let d = authorize(&claims(None, &["/wlcg"]), &req, &policy);
        assert!(!d.allowed);
        assert!(d.trace[0].starts_with(NO_APPLICABLE_RULE));
    }

    #[test]
    fn most_specific_rule_wins() {
        let op = Operation::parse("storage.write").unwrap();
        let policy = AuthzPolicy::new(
            AuthzMode::GroupOnly,
            GroupMatching::Exact,
            vec![
                GroupRule {
                    operation: op.clone(),
                    path: ResourcePath::parse("/data").unwrap(),
                    group: GroupName::parse("/wlcg").unwrap(),
                },
                GroupRule {
                    operation: op.clone(),
                    path: ResourcePath::parse("/data/prod").unwrap(),
                    group: GroupName::parse("/wlcg/prod").unwrap(),
                },
            ],
        )
        .unwrap();
        let req = ResourceRequest::parse("storage.write", "/data/prod/f").unwrap();
        assert!(!authorize(&claims(None, &["/wlcg"]), &req, &policy).allowed);
        assert!(authorize(&claims(None, &["/wlcg/prod"]), &req, &policy).allowed);
    }

    #[test]
    fn duplicate_rules_rejected() {
        let rule = GroupRule {
            operation: Operation::parse("storage.read").unwrap(),
            path: ResourcePath::root(),
            group: GroupName::parse("/wlcg").unwrap(),
        };
        assert!(AuthzPolicy::new(AuthzMode::Either, GroupMatching::Exact, vec![rule.clone(), rule]).is_err());
    }

    #[test]
    fn policy_from_toml() {
        let policy: AuthzPolicy = toml::from_str(
            r#"
            mode = "group_only"
            group_matching = "exact"
            [[group_rules]]
            operation = "storage.read"
            path = "/"
            group = "/wlcg"
            "#,
        )
        .unwrap();
        assert_eq!(policy.mode(), AuthzMode::GroupOnly);
        assert_eq!(policy.group_rules().len(), 1);
        let bad: Result<AuthzPolicy, _> = toml::from_str(
            r#"
            [[group_rules]]
            operation = "storage.read"
            path = "relative"
            group = "/wlcg"
            "#,
        );
        assert!(bad.is_err());
    }
}
