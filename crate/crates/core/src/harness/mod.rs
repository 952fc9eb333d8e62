//! End-to-end scenarios against in-process issuer and resource instances,
//! recorded as line-oriented JSON transcripts.

mod scenarios;
mod world;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use scenarios::{
    run_delegation_chain, run_delegation_chain_on, run_figure3, run_figure3_on, run_refresh_long_lived,
    run_refresh_long_lived_on, run_scenario, DelegationVariant, REFRESH_CYCLES, SCENARIOS,
};
pub use world::{Network, OAuthClient, ResourceNode, World, SEED};

use crate::clock::Clock;
use crate::token::{check_profile_shape, decode, CompactToken};

/// One declared step: who acts, what they do, what should happen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub actor: String,
    pub action: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub actors: Vec<String>,
    pub script: Vec<ScriptStep>,
}

impl Scenario {
    /// Fails when a step names an undeclared actor.
    pub fn new(name: &str, actors: &[&str], script: &[(&str, &str, &str)]) -> Result<Self, String> {
        let actors: Vec<String> = actors.iter().map(|a| a.to_string()).collect();
        let mut steps = Vec::with_capacity(script.len());
        for (actor, action, expected) in script {
            if !actors.iter().any(|a| a == actor) {
                return Err(format!("step {action:?} references undeclared actor {actor:?}"));
            }
            steps.push(ScriptStep {
                actor: actor.to_string(),
                action: action.to_string(),
                expected: expected.to_string(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            actors,
            script: steps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Passed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// A request and the summary of its response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub request: String,
    pub status: u16,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub label: String,
    /// Signature replaced by a placeholder.
    pub token: String,
    pub kind: Option<String>,
    pub conformant: bool,
    pub claims: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub scenario: String,
    pub step: usize,
    pub actor: String,
    pub action: String,
    pub expected: String,
    pub status: StepStatus,
    pub time: i64,
    pub exchanges: Vec<ExchangeRecord>,
    pub tokens: Vec<TokenRecord>,
    pub assertions: Vec<Assertion>,
    /// Trust-anchor network fetches made so far, per resource.
    pub fetches: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub scenario: String,
    pub steps: Vec<StepRecord>,
}

impl Transcript {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.status == StepStatus::Passed)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<StepRecord>, _>>()?;
        Ok(Self {
            scenario: steps.first().map(|s| s.scenario.clone()).unwrap_or_default(),
            steps,
        })
    }

    pub fn tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.steps.iter().flat_map(|s| s.tokens.iter())
    }

    pub fn max_fetches(&self, resource: &str) -> u64 {
        self.steps
            .iter()
            .filter_map(|s| s.fetches.get(resource))
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// A scenario stopped at its first failed assertion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFailure {
    pub scenario: String,
    pub step: usize,
    pub assertion: String,
    pub detail: Option<String>,
    /// The issuer's `cause` when the failure was an issuer refusal.
    pub cause: Option<String>,
    pub transcript: Transcript,
}

impl fmt::Display for ScenarioFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scenario {} failed at step {}: {}",
            self.scenario, self.step, self.assertion
        )?;
        if let Some(d) = &self.detail {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioFailure {}

/// Collects what happens during one step.
pub struct StepContext {
    record: StepRecord,
    cause: Option<String>,
}

impl StepContext {
    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl fmt::Display) -> bool {
        let detail = detail.to_string();
        self.record.assertions.push(Assertion {
            name: name.into(),
            passed,
            detail: (!detail.is_empty()).then_some(detail),
        });
        passed
    }

    pub fn exchange(&mut self, request: impl Into<String>, status: u16, response: impl Into<String>) {
        self.record.exchanges.push(ExchangeRecord {
            request: request.into(),
            status,
            response: response.into(),
        });
    }

    /// Records a token and asserts its profile shape.
    pub fn token(&mut self, label: &str, token: &CompactToken) {
        let (kind, conformant, claims) = match decode(token) {
            Ok((header, claims)) => {
                let kind = header.kind();
                let conformant = kind.is_some_and(|k| check_profile_shape(&claims, k).conformant());
                (kind, conformant, Value::Object(claims.to_json()))
            }
            Err(_) => (None, false, Value::Null),
        };
        self.record.tokens.push(TokenRecord {
            label: label.to_string(),
            token: token.redacted(),
            kind: kind.map(|k| format!("{k:?}")),
            conformant,
            claims,
        });
        self.check(format!("{label} is profile-conformant"), conformant, "");
    }

    pub fn set_cause(&mut self, cause: Option<String>) {
        self.cause = cause;
    }
}

/// Executes a [`Scenario`] step by step.
pub struct Run<'w> {
    scenario: Scenario,
    world: &'w World,
    records: Vec<StepRecord>,
}

impl<'w> Run<'w> {
    pub fn new(scenario: Scenario, world: &'w World) -> Self {
        Self {
            scenario,
            world,
            records: Vec::new(),
        }
    }

    fn blank(&self, index: usize, status: StepStatus) -> StepRecord {
        let s = &self.scenario.script[index];
        StepRecord {
            scenario: self.scenario.name.clone(),
            step: index + 1,
            actor: s.actor.clone(),
            action: s.action.clone(),
            expected: s.expected.clone(),
            status,
            time: self.world.clock.now(),
            exchanges: Vec::new(),
            tokens: Vec::new(),
            assertions: Vec::new(),
            fetches: BTreeMap::new(),
        }
    }

    /// Runs the next script step. On a failed assertion or error the
    /// remaining steps are recorded as skipped and the failure returned.
    pub fn step<T>(
        &mut self,
        body: impl FnOnce(&mut StepContext, &World) -> Result<T, String>,
    ) -> Result<T, Box<ScenarioFailure>> {
        let index = self.records.len();
        assert!(index < self.scenario.script.len(), "more steps run than scripted");
        let mut ctx = StepContext {
            record: self.blank(index, StepStatus::Passed),
            cause: None,
        };
        let result = body(&mut ctx, self.world);
        let mut record = ctx.record;
        record.time = self.world.clock.now();
        record.fetches = self.world.fetch_counts();
        if let Err(e) = &result {
            record.assertions.push(Assertion {
                name: "step completed".into(),
                passed: false,
                detail: Some(e.clone()),
            });
        }
        let failed = record.assertions.iter().find(|a| !a.passed).cloned();
        if failed.is_some() {
            record.status = StepStatus::Failed;
        }
        self.records.push(record);
        match (failed, result) {
            (None, Ok(v)) => Ok(v),
            (failed, _) => {
                let failed = failed.expect("an error always records a failed assertion");
                for i in self.records.len()..self.scenario.script.len() {
                    let skipped = self.blank(i, StepStatus::Skipped);
                    self.records.push(skipped);
                }
                Err(Box::new(ScenarioFailure {
                    scenario: self.scenario.name.clone(),
                    step: index + 1,
                    assertion: failed.name,
                    detail: failed.detail,
                    cause: ctx.cause,
                    transcript: self.transcript(),
                }))
            }
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            scenario: self.scenario.name.clone(),
            steps: self.records.clone(),
        }
    }

    pub fn finish(self) -> Transcript {
        assert_eq!(
            self.records.len(),
            self.scenario.script.len(),
            "scenario ran a different number of steps than scripted"
        );
        self.transcript()
    }
}
