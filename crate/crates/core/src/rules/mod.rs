//! Rule definitions, the condition language and the evaluation engine.

mod condition;
mod engine;
mod eval;
mod source;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use condition::{parse_condition, CmpOp, Condition, ConditionError, MetricRef, Window, WindowAgg, MAX_NESTING};
pub use engine::{CompiledRule, EngineDefaults, EngineSink, RuleBody, RuleEngine, RuleListing, RuleSet, TriggerEvent};
pub use eval::{bindings, empty_predicate, evaluate, Binding, MetricValue, PresenceTrace, StateSnapshot, Truth};
pub use source::MetricSource;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub String);

impl RuleId {
    pub fn new(id: impl Into<String>) -> Self {
        RuleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn valid(id: &str) -> bool {
        !id.is_empty() && id.len() <= 100 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Behavioral,
    Alert,
    Technical,
    Renewal,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Behavioral => "behavioral",
            Category::Alert => "alert",
            Category::Technical => "technical",
            Category::Renewal => "renewal",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "behavioral" => Ok(Category::Behavioral),
            "alert" => Ok(Category::Alert),
            "technical" => Ok(Category::Technical),
            "renewal" => Ok(Category::Renewal),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

fn default_cooldown() -> u64 {
    3600
}

fn default_enabled() -> bool {
    true
}

/// A rule as stored and exchanged. The condition text is the stored form;
/// the parsed tree is derived from it on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: RuleId,
    pub name: String,
    pub target: String,
    pub condition: String,
    pub category: Category,
    #[serde(rename = "suggestion")]
    pub suggestion_template: String,
    #[serde(default = "default_cooldown")]
    pub cooldown_s: u64,
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("rule validation failed: {0}")]
    ValidationFailed(String),
    #[error("unknown rule target `{0}`")]
    UnknownTarget(String),
    #[error("rule `{0}` not found")]
    NotFound(RuleId),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("rule persistence failed: {0}")]
    Io(#[from] std::io::Error),
}
