use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::path::string_serde;
use super::{AuthzDecision, AuthzError};

/// A VOMS-style group such as `/wlcg/ops`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupName {
    segments: Vec<String>,
}

impl GroupName {
    pub fn parse(raw: &str) -> Result<Self, AuthzError> {
        let invalid = || AuthzError::InvalidGroup(raw.to_string());
        let rest = raw.strip_prefix('/').ok_or_else(invalid)?;
        let segments: Vec<String> = rest.split('/').map(str::to_string).collect();
        if segments.iter().any(String::is_empty) {
            return Err(invalid());
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// Membership in `self` implies membership in `ancestor`.
    pub fn is_within(&self, ancestor: &GroupName) -> bool {
        self.segments.starts_with(&ancestor.segments)
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.segments {
            write!(f, "/{s}")?;
        }
        Ok(())
    }
}

impl FromStr for GroupName {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupName::parse(s)
    }
}

string_serde!(GroupName);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMatching {
    Exact,
    /// Subgroup membership implies membership of every ancestor group.
    #[default]
    Hierarchical,
}

pub fn authorize_groups(
    member_of: &[GroupName],
    required: &GroupName,
    matching: GroupMatching,
) -> AuthzDecision {
    let mut trace = Vec::with_capacity(member_of.len() + 1);
    let mut matched = None;
    for group in member_of {
        let hit = match matching {
            GroupMatching::Exact => group == required,
            GroupMatching::Hierarchical => group.is_within(required),
        };
        trace.push(format!(
            "group {group} vs required {required} ({matching:?}): {}",
            if hit { "match" } else { "no match" }
        ));
        if hit && matched.is_none() {
            matched = Some(format!("group {required} via {group}"));
        }
    }
    if member_of.is_empty() {
        trace.push("no groups in token".to_string());
    }
    AuthzDecision::from_parts(matched, trace)
}
