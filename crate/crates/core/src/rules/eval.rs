//! Three-valued condition evaluation over an immutable state snapshot.

use std::collections::HashMap;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;

use super::condition::{Condition, MetricRef};
use crate::model::SensorKind;

/// Kleene truth value. `Unknown` stands for missing or stale inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Truth {
    False,
    Unknown,
    True,
}

impl Truth {
    pub fn and(self, other: Truth) -> Truth {
        match (self, other) {
            (Truth::False, _) | (_, Truth::False) => Truth::False,
            (Truth::True, Truth::True) => Truth::True,
            _ => Truth::Unknown,
        }
    }

    pub fn or(self, other: Truth) -> Truth {
        match (self, other) {
            (Truth::True, _) | (_, Truth::True) => Truth::True,
            (Truth::False, Truth::False) => Truth::False,
            _ => Truth::Unknown,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Truth {
        match self {
            Truth::True => Truth::False,
            Truth::False => Truth::True,
            Truth::Unknown => Truth::Unknown,
        }
    }

    pub fn definite(self) -> Option<bool> {
        match self {
            Truth::True => Some(true),
            Truth::False => Some(false),
            Truth::Unknown => None,
        }
    }
}

impl From<bool> for Truth {
    fn from(b: bool) -> Self {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricValue {
    pub value: f64,
    pub timestamp: DateTime<Utc>,
    /// Older than the staleness horizon at snapshot time.
    pub stale: bool,
}

/// Occupancy and activity history at one resource, each kind as sorted
/// `(timestamp, value)` samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PresenceTrace {
    pub occupancy: Vec<(DateTime<Utc>, f64)>,
    pub activity: Vec<(DateTime<Utc>, f64)>,
    /// How long one sample stays valid without a successor.
    pub horizon: Duration,
}

/// Inputs for evaluating conditions at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub at: DateTime<Utc>,
    pub metrics: HashMap<MetricRef, MetricValue>,
    pub presence: HashMap<String, PresenceTrace>,
    /// Dwell used by `empty(path)` without an explicit duration.
    pub default_dwell: Duration,
}

impl StateSnapshot {
    pub fn new(at: DateTime<Utc>) -> Self {
        StateSnapshot {
            at,
            metrics: HashMap::new(),
            presence: HashMap::new(),
            default_dwell: Duration::seconds(900),
        }
    }

    pub fn with_metric(mut self, metric: MetricRef, value: f64, timestamp: DateTime<Utc>) -> Self {
        self.metrics.insert(
            metric,
            MetricValue {
                value,
                timestamp,
                stale: false,
            },
        );
        self
    }
}

/// Evaluates `cond` against `snap`. Missing or stale inputs yield `Unknown`,
/// which propagates by Kleene rules.
pub fn evaluate(cond: &Condition, snap: &StateSnapshot) -> Truth {
    match cond {
        Condition::Compare { metric, op, literal } => match snap.metrics.get(metric) {
            Some(m) if !m.stale => op.apply(m.value, *literal).into(),
            _ => Truth::Unknown,
        },
        Condition::Empty { path, dwell_s } => {
            let dwell = dwell_s
                .map(|s| Duration::seconds(s as i64))
                .unwrap_or(snap.default_dwell);
            empty_predicate(path, snap, dwell)
        }
        Condition::And(l, r) => evaluate(l, snap).and(evaluate(r, snap)),
        Condition::Or(l, r) => evaluate(l, snap).or(evaluate(r, snap)),
        Condition::Not(c) => evaluate(c, snap).not(),
    }
}

/// True iff occupancy and activity at `path` have stayed at or below zero for
/// the whole of `[at − dwell, at]`. False as soon as any positive sample is in
/// effect inside that window. Unknown when the samples do not cover the
/// window (no data, data starting late, or gaps longer than the horizon).
pub fn empty_predicate(path: &str, snap: &StateSnapshot, dwell: Duration) -> Truth {
    let Some(trace) = snap.presence.get(path) else {
        return Truth::Unknown;
    };
    let at = snap.at;
    let window_start = at - dwell;
    let mut covered: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    for samples in [&trace.occupancy, &trace.activity] {
        let upto: Vec<_> = samples.iter().filter(|(t, _)| *t <= at).collect();
        for (i, &&(t, v)) in upto.iter().enumerate() {
            let lapse = t + trace.horizon;
            let end = match upto.get(i + 1) {
                Some(&&(next, _)) => next.min(lapse),
                None => lapse,
            };
            // Sample in effect over [t, end); skip if it ends before the window.
            if end <= window_start {
                continue;
            }
            if v > 0.0 {
                return Truth::False;
            }
            covered.push((t.max(window_start), end));
        }
    }
    covered.sort();
    let mut reach = window_start;
    for (s, e) in covered {
        if s > reach {
            break;
        }
        reach = reach.max(e);
    }
    if reach > at {
        Truth::True
    } else {
        Truth::Unknown
    }
}

/// One metric value that fed a rule evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Binding {
    pub kind: SensorKind,
    pub path: String,
    pub value: f64,
    pub timestamp: DateTime<Utc>,
}

/// Known inputs of `cond` in leaf order: one per comparison, plus the latest
/// occupancy (or activity) sample for each `empty` leaf. Duplicates collapse.
pub fn bindings(cond: &Condition, snap: &StateSnapshot) -> Vec<Binding> {
    let mut out: Vec<Binding> = Vec::new();
    for leaf in cond.leaves() {
        let b = match leaf {
            Condition::Compare { metric, .. } => snap.metrics.get(metric).filter(|m| !m.stale).map(|m| Binding {
                kind: metric.kind,
                path: metric.path.clone(),
                value: m.value,
                timestamp: m.timestamp,
            }),
            Condition::Empty { path, .. } => snap.presence.get(path).and_then(|trace| {
                let pick = |samples: &[(DateTime<Utc>, f64)], kind| {
                    samples
                        .iter()
                        .rev()
                        .find(|(t, _)| *t <= snap.at)
                        .map(|&(t, v)| Binding {
                            kind,
                            path: path.clone(),
                            value: v,
                            timestamp: t,
                        })
                };
                pick(&trace.occupancy, SensorKind::OccupancyCount)
                    .or_else(|| pick(&trace.activity, SensorKind::ActivityCount))
            }),
            _ => None,
        };
        if let Some(b) = b {
            if !out.iter().any(|o| o.kind == b.kind && o.path == b.path) {
                out.push(b);
            }
        }
    }
    out
}
