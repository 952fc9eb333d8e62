use std::fmt;
use std::str::FromStr;

use super::path::string_serde;
use super::{AuthzDecision, AuthzError, Operation, ResourcePath, ResourceRequest};

/// One scope entry: an operation, optionally restricted to a path subtree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Capability {
    pub operation: Operation,
    pub path: Option<ResourcePath>,
}

impl Capability {
    pub fn new(operation: Operation, path: Option<ResourcePath>) -> Self {
        Self { operation, path }
    }

    /// Parses `operation[:path]`.
    pub fn parse(entry: &str) -> Result<Self, AuthzError> {
        let malformed = |reason: String| AuthzError::MalformedScopeEntry {
            entry: entry.to_string(),
            reason,
        };
        let (op, path) = match entry.split_once(':') {
            Some((op, path)) => (op, Some(path)),
            None => (entry, None),
        };
        let operation = Operation::parse(op).map_err(|e| malformed(e.to_string()))?;
        let path = path
            .map(ResourcePath::parse)
            .transpose()
            .map_err(|e| malformed(e.to_string()))?;
        Ok(Self { operation, path })
    }

    /// Whether this capability grants `req`.
    pub fn permits(&self, req: &ResourceRequest) -> bool {
        self.operation == req.operation && self.path.as_ref().is_none_or(|p| p.is_prefix_of(&req.path))
    }

    /// Whether every request this capability permits is also permitted by
    /// `parent`, i.e. `self` is an attenuation of `parent`.
    pub fn is_covered_by(&self, parent: &Capability) -> bool {
        if self.operation != parent.operation {
            return false;
        }
        match (&parent.path, &self.path) {
            (None, _) => true,
            (Some(p), None) => p.is_root(),
            (Some(p), Some(c)) => p.is_prefix_of(c),
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}:{p}", self.operation),
            None => write!(f, "{}", self.operation),
        }
    }
}

impl FromStr for Capability {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::parse(s)
    }
}

string_serde!(Capability);

/// Splits a scope claim on single spaces, keeping order and duplicates.
/// The empty string yields no capabilities.
pub fn parse_scope(scope_claim: &str) -> Result<Vec<Capability>, AuthzError> {
    if scope_claim.is_empty() {
        return Ok(Vec::new());
    }
    scope_claim.split(' ').map(Capability::parse).collect()
}

pub fn format_scope(caps: &[Capability]) -> String {
    caps.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// `true` iff every capability in `child` is covered by one in `parent`.
pub fn scope_is_attenuation(child: &[Capability], parent: &[Capability]) -> bool {
    child.iter().all(|c| parent.iter().any(|p| c.is_covered_by(p)))
}

/// Allows iff some capability names the requested operation and either has
/// no path or a path that is a segment prefix of the request path. Every
/// capability is examined and recorded in the trace.
pub fn authorize_capability(caps: &[Capability], req: &ResourceRequest) -> AuthzDecision {
    let mut trace = Vec::with_capacity(caps.len() + 1);
    let mut matched = None;
    for cap in caps {
        let verdict = if cap.operation != req.operation {
            "operation mismatch"
        } else if cap.permits(req) {
            "match"
        } else {
            "path prefix mismatch"
        };
        trace.push(format!("capability {cap} vs {req}: {verdict}"));
        if verdict == "match" && matched.is_none() {
            matched = Some(format!("capability {cap}"));
        }
    }
    if caps.is_empty() {
        trace.push("no capabilities in token".to_string());
    }
    AuthzDecision::from_parts(matched, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(op: &str, path: &str) -> ResourceRequest {
        ResourceRequest::parse(op, path).unwrap()
    }

    #[test]
    fn root_path_covers_unrestricted() {
        let bare = Capability::parse("storage.read").unwrap();
        let root = Capability::parse("storage.read:/").unwrap();
        assert!(bare.is_covered_by(&root));
        assert!(root.is_covered_by(&bare));
        assert!(!bare.is_covered_by(&Capability::parse("storage.read:/a").unwrap()));
    }

    #[test]
    fn parse_examples() {
        let caps = parse_scope("storage.write:/data").unwrap();
        assert_eq!(caps.len(), 1);
        assert_eq!(caps[0].operation.as_str(), "storage.write");
        assert_eq!(caps[0].path.as_ref().unwrap().to_string(), "/data");

        let caps = parse_scope("storage.read").unwrap();
        assert_eq!(caps[0].path, None);

        assert!(matches!(
            parse_scope("storage.read:data"),
            Err(AuthzError::MalformedScopeEntry { .. })
        ));
    }

    #[test]
    fn order_and_duplicates_preserved() {
        let caps = parse_scope("b.x a.y b.x").unwrap();
        assert_eq!(format_scope(&caps), "b.x a.y b.x");
    }

    #[test]
    fn double_space_is_malformed() {
        assert!(parse_scope("a  b").is_err());
        assert!(parse_scope("").unwrap().is_empty());
    }

    #[test]
    fn capability_examples() {
        let caps = parse_scope("storage.write:/data").unwrap();
        assert!(authorize_capability(&caps, &req("storage.write", "/data/2024/f.root")).allowed);
        let d = authorize_capability(&caps, &req("storage.write", "/database/f"));
        assert!(!d.allowed);
        assert!(d.trace[0].contains("path prefix mismatch"));

        let caps = parse_scope("storage.read:/data").unwrap();
        let d = authorize_capability(&caps, &req("storage.write", "/data"));
        assert!(!d.allowed);
        assert!(d.trace[0].contains("operation mismatch"));
    }

    #[test]
    fn trace_lists_every_capability() {
        let caps = parse_scope("storage.read storage.write:/a storage.write:/b").unwrap();
        let d = authorize_capability(&caps, &req("storage.write", "/a/x"));
        assert!(d.allowed);
        assert_eq!(d.trace.len(), 3);
        assert_eq!(d.matched_rule.as_deref(), Some("capability storage.write:/a"));
    }

    #[test]
    fn covering() {
        let p = Capability::parse("storage.write:/data").unwrap();
        assert!(Capability::parse("storage.write:/data/out")
            .unwrap()
            .is_covered_by(&p));
        assert!(Capability::parse("storage.write:/data")
            .unwrap()
            .is_covered_by(&p));
        assert!(!Capability::parse("storage.write").unwrap().is_covered_by(&p));
        assert!(!Capability::parse("storage.write:/database")
            .unwrap()
            .is_covered_by(&p));
        assert!(!Capability::parse("storage.read:/data").unwrap().is_covered_by(&p));
        let any = Capability::parse("storage.write").unwrap();
        assert!(p.is_covered_by(&any));
    }
}
