use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::condition::{parse_condition, Condition, MetricRef};
use super::eval::{bindings, evaluate, Binding, MetricValue, PresenceTrace, StateSnapshot, Truth};
use super::source::MetricSource;
use super::{Category, Rule, RuleError, RuleId};
use crate::ingest::{Ack, Reading, ReadingSink};
use crate::model::{authorize, path_covers, Action, Published, ResourceTree, SensorKind, User};
use crate::notify::check_template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineDefaults {
    pub staleness_s: u64,
    pub dwell_s: u64,
    pub cooldown_s: u64,
}

impl Default for EngineDefaults {
    fn default() -> Self {
        EngineDefaults {
            staleness_s: 900,
            dwell_s: 900,
            cooldown_s: 3600,
        }
    }
}

/// Emitted when a rule's condition turns true outside its cooldown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerEvent {
    pub rule_id: RuleId,
    pub target: String,
    pub fired_at: DateTime<Utc>,
    pub bindings: Vec<Binding>,
}

#[derive(Debug)]
pub struct CompiledRule {
    pub rule: Rule,
    pub condition: Condition,
}

impl CompiledRule {
    fn triggers(&self) -> impl Iterator<Item = (String, SensorKind)> + '_ {
        self.condition.leaves().into_iter().flat_map(|leaf| match leaf {
            Condition::Compare { metric, .. } => vec![(metric.path.clone(), metric.kind)],
            Condition::Empty { path, .. } => vec![
                (path.clone(), SensorKind::OccupancyCount),
                (path.clone(), SensorKind::ActivityCount),
            ],
            _ => Vec::new(),
        })
    }
}

/// Immutable published rule set.
#[derive(Debug, Default)]
pub struct RuleSet {
    compiled: BTreeMap<RuleId, Arc<CompiledRule>>,
    invalid: BTreeMap<RuleId, (Rule, String)>,
    index: HashMap<(String, SensorKind), BTreeSet<RuleId>>,
}

impl RuleSet {
    fn build(compiled: BTreeMap<RuleId, Arc<CompiledRule>>, invalid: BTreeMap<RuleId, (Rule, String)>) -> Self {
        let mut index: HashMap<(String, SensorKind), BTreeSet<RuleId>> = HashMap::new();
        for (id, c) in &compiled {
            for key in c.triggers() {
                index.entry(key).or_default().insert(id.clone());
            }
        }
        RuleSet {
            compiled,
            invalid,
            index,
        }
    }

    pub fn get(&self, id: &RuleId) -> Option<&Rule> {
        self.compiled
            .get(id)
            .map(|c| &c.rule)
            .or_else(|| self.invalid.get(id).map(|(r, _)| r))
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.compiled
            .values()
            .map(|c| &c.rule)
            .chain(self.invalid.values().map(|(r, _)| r))
    }

    pub fn invalid(&self) -> impl Iterator<Item = (&Rule, &str)> {
        self.invalid.values().map(|(r, e)| (r, e.as_str()))
    }

    fn all_rules(&self) -> Vec<Rule> {
        let mut v: Vec<Rule> = self.rules().cloned().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleListing {
    #[serde(flatten)]
    pub rule: Rule,
    /// Target of the rule when it is inherited from an ancestor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inherited_from: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
struct RuleState {
    /// Last definite evaluation result.
    last: Option<bool>,
    last_fire: Option<DateTime<Utc>>,
}

#[derive(Debug, Default)]
struct EvalState {
    clock: Option<DateTime<Utc>>,
    rules: HashMap<RuleId, RuleState>,
}

/// Rule storage plus edge-triggered evaluation.
pub struct RuleEngine {
    tree: Arc<Published<ResourceTree>>,
    source: Arc<dyn MetricSource>,
    defaults: EngineDefaults,
    rules: Published<RuleSet>,
    state: Mutex<EvalState>,
    persist_path: Option<PathBuf>,
}

impl RuleEngine {
    pub fn new(tree: Arc<Published<ResourceTree>>, source: Arc<dyn MetricSource>, defaults: EngineDefaults) -> Self {
        RuleEngine {
            tree,
            source,
            defaults,
            rules: Published::new(RuleSet::default()),
            state: Mutex::new(EvalState::default()),
            persist_path: None,
        }
    }

    /// Persists the rule set as a JSON document at `path` after every change.
    pub fn with_persistence(mut self, path: impl Into<PathBuf>) -> Self {
        self.persist_path = Some(path.into());
        self
    }

    pub fn defaults(&self) -> EngineDefaults {
        self.defaults
    }

    /// Loads the persisted rule set if one exists, otherwise installs
    /// `initial` (and persists it). Rules that no longer compile are kept
    /// but skipped; see [`RuleEngine::invalid_rules`].
    pub fn bootstrap(&self, initial: Vec<Rule>) -> Result<usize, RuleError> {
        let rules = match &self.persist_path {
            Some(p) if p.exists() => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str::<Vec<Rule>>(&text)
                    .map_err(|e| RuleError::ValidationFailed(format!("{}: {e}", p.display())))?
            }
            _ => initial,
        };
        self.replace_all(rules)
    }

    /// Swaps in a whole rule set (no authorization; used at startup).
    pub fn replace_all(&self, rules: Vec<Rule>) -> Result<usize, RuleError> {
        let tree = self.tree.load();
        let mut compiled = BTreeMap::new();
        let mut invalid = BTreeMap::new();
        for rule in rules {
            match self.compile(&tree, rule.clone()) {
                Ok(c) => {
                    compiled.insert(rule.id.clone(), Arc::new(c));
                }
                Err(e) => {
                    log::warn!("rule `{}` skipped: {e}", rule.id);
                    invalid.insert(rule.id.clone(), (rule, e.to_string()));
                }
            }
        }
        let count = compiled.len();
        self.rules.update(|_| {
            let set = RuleSet::build(compiled, invalid);
            self.persist(&set)?;
            Ok::<_, RuleError>(set)
        })?;
        self.state.lock().expect("engine state").rules.clear();
        Ok(count)
    }

    fn persist(&self, set: &RuleSet) -> Result<(), RuleError> {
        if let Some(path) = &self.persist_path {
            let tmp = path.with_extension("json.tmp");
            let body = serde_json::to_vec_pretty(&set.all_rules()).expect("rules serialize");
            fs::write(&tmp, body)?;
            fs::rename(&tmp, path)?;
        }
        Ok(())
    }

    fn compile(&self, tree: &ResourceTree, rule: Rule) -> Result<CompiledRule, RuleError> {
        if !RuleId::valid(rule.id.as_str()) {
            return Err(RuleError::ValidationFailed(format!("invalid rule id `{}`", rule.id)));
        }
        if rule.name.trim().is_empty() {
            return Err(RuleError::ValidationFailed("rule name is empty".into()));
        }
        check_template(&rule.suggestion_template).map_err(|e| RuleError::ValidationFailed(e.to_string()))?;
        let target = tree
            .resolve_path(&rule.target)
            .map_err(|_| RuleError::UnknownTarget(rule.target.clone()))?;
        let parsed = parse_condition(&rule.condition)?;
        let condition = parsed.resolve(tree, target)?;
        let mut rule = rule;
        rule.target = tree.canonical_path(target);
        Ok(CompiledRule { rule, condition })
    }

    pub fn rule_set(&self) -> Arc<RuleSet> {
        self.rules.load()
    }

    pub fn rule(&self, id: &RuleId) -> Option<Rule> {
        self.rules.load().get(id).cloned()
    }

    pub fn invalid_rules(&self) -> Vec<(RuleId, String)> {
        self.rules
            .load()
            .invalid()
            .map(|(r, e)| (r.id.clone(), e.to_string()))
            .collect()
    }

    /// Rules attached to `path` or inherited from its ancestors.
    pub fn list_for(&self, path: &str) -> Result<Vec<RuleListing>, RuleError> {
        let tree = self.tree.load();
        let node = tree
            .resolve_path(path)
            .map_err(|_| RuleError::UnknownTarget(path.to_string()))?;
        let path = tree.canonical_path(node);
        let set = self.rules.load();
        let mut out: Vec<RuleListing> = set
            .compiled
            .values()
            .map(|c| (&c.rule, None))
            .chain(set.invalid.values().map(|(r, e)| (r, Some(e.clone()))))
            .filter(|(r, _)| path_covers(r.target.trim_matches('/'), &path))
            .map(|(r, error)| RuleListing {
                rule: r.clone(),
                inherited_from: (r.target.trim_matches('/') != path).then(|| r.target.clone()),
                error,
            })
            .collect();
        out.sort_by(|a, b| a.rule.id.cmp(&b.rule.id));
        Ok(out)
    }

    /// Creates or replaces a rule. Takes effect for the next reading; any
    /// evaluation already running finishes on the previous set.
    pub fn upsert_rule(&self, rule: Rule, user: &User) -> Result<Rule, RuleError> {
        let tree = self.tree.load();
        let target = tree
            .resolve_path(&rule.target)
            .map_err(|_| RuleError::UnknownTarget(rule.target.clone()))?;
        if !authorize(user, Action::EditRule, &tree, target).is_allowed() {
            return Err(RuleError::Unauthorized(format!(
                "user `{}` may not edit rules on {}",
                user.id, rule.target
            )));
        }
        let set = self.rules.load();
        if let Some(existing) = set.get(&rule.id) {
            if let Ok(old) = tree.resolve_path(&existing.target) {
                if !authorize(user, Action::EditRule, &tree, old).is_allowed() {
                    return Err(RuleError::Unauthorized(format!(
                        "user `{}` may not edit rules on {}",
                        user.id, existing.target
                    )));
                }
            }
        }
        let compiled = Arc::new(self.compile(&tree, rule)?);
        let stored = compiled.rule.clone();
        self.rules.update(|prev| {
            let mut c = prev.compiled.clone();
            let mut invalid = prev.invalid.clone();
            invalid.remove(&stored.id);
            c.insert(stored.id.clone(), compiled.clone());
            let set = RuleSet::build(c, invalid);
            self.persist(&set)?;
            Ok::<_, RuleError>(set)
        })?;
        let mut st = self.state.lock().expect("engine state");
        if let Some(s) = st.rules.get_mut(&stored.id) {
            s.last = None;
        }
        Ok(stored)
    }

    pub fn delete_rule(&self, id: &RuleId, user: &User) -> Result<(), RuleError> {
        let tree = self.tree.load();
        let existing = self
            .rules
            .load()
            .get(id)
            .cloned()
            .ok_or_else(|| RuleError::NotFound(id.clone()))?;
        let allowed = tree
            .resolve_path(&existing.target)
            .map(|n| authorize(user, Action::EditRule, &tree, n).is_allowed())
            .unwrap_or(user.role == crate::model::Role::BuildingManager);
        if !allowed {
            return Err(RuleError::Unauthorized(format!(
                "user `{}` may not edit rules on {}",
                user.id, existing.target
            )));
        }
        self.rules.update(|prev| {
            let mut c = prev.compiled.clone();
            let mut invalid = prev.invalid.clone();
            if c.remove(id).is_none() && invalid.remove(id).is_none() {
                return Err(RuleError::NotFound(id.clone()));
            }
            let set = RuleSet::build(c, invalid);
            self.persist(&set)?;
            Ok(set)
        })?;
        self.state.lock().expect("engine state").rules.remove(id);
        Ok(())
    }

    fn horizon(&self, path: &str, kind: SensorKind) -> Duration {
        let secs = self
            .source
            .nominal_interval(path, kind)
            .map(|i| 2 * u64::from(i))
            .unwrap_or(self.defaults.staleness_s);
        Duration::seconds(secs as i64)
    }

    /// Captures every input the given rules need at instant `at`.
    pub fn capture<'a>(&self, rules: impl IntoIterator<Item = &'a CompiledRule>, at: DateTime<Utc>) -> StateSnapshot {
        let mut snap = StateSnapshot::new(at);
        snap.default_dwell = Duration::seconds(self.defaults.dwell_s as i64);
        let mut metrics: BTreeSet<MetricRef> = BTreeSet::new();
        let mut dwell_by_path: BTreeMap<String, Duration> = BTreeMap::new();
        for rule in rules {
            for leaf in rule.condition.leaves() {
                match leaf {
                    Condition::Compare { metric, .. } => {
                        metrics.insert(metric.clone());
                    }
                    Condition::Empty { path, dwell_s } => {
                        let d = dwell_s
                            .map(|s| Duration::seconds(s as i64))
                            .unwrap_or(snap.default_dwell);
                        let e = dwell_by_path.entry(path.clone()).or_insert(d);
                        *e = (*e).max(d);
                    }
                    _ => {}
                }
            }
        }
        for m in metrics {
            let value = match m.window {
                None => self.source.latest(&m.path, m.kind, at).map(|(ts, value)| MetricValue {
                    value,
                    timestamp: ts,
                    stale: at - ts > self.horizon(&m.path, m.kind),
                }),
                Some(w) => {
                    let from = at - Duration::seconds(w.duration_s as i64) + Duration::seconds(1);
                    let samples = self.source.samples(&m.path, m.kind, from, at);
                    let values: Vec<f64> = samples.iter().map(|s| s.1).collect();
                    w.agg.apply(&values).map(|value| MetricValue {
                        value,
                        timestamp: samples.last().expect("non-empty window").0,
                        stale: false,
                    })
                }
            };
            if let Some(v) = value {
                snap.metrics.insert(m, v);
            }
        }
        for (path, dwell) in dwell_by_path {
            let horizon = self
                .horizon(&path, SensorKind::OccupancyCount)
                .max(self.horizon(&path, SensorKind::ActivityCount));
            let from = at - dwell - horizon;
            snap.presence.insert(
                path.clone(),
                PresenceTrace {
                    occupancy: self.source.samples(&path, SensorKind::OccupancyCount, from, at),
                    activity: self.source.samples(&path, SensorKind::ActivityCount, from, at),
                    horizon,
                },
            );
        }
        snap
    }

    /// Re-evaluates the enabled rules that read `(r.resource_path, r.kind)`
    /// and returns the events that fired, paired with the rule that fired.
    /// The engine clock is the latest reading time seen, so replays are
    /// deterministic.
    pub fn on_reading_detailed(&self, r: &Reading) -> Vec<(TriggerEvent, Rule)> {
        let set = self.rules.load();
        let key = (r.resource_path.trim_matches('/').to_string(), r.kind);
        let Some(ids) = set.index.get(&key) else {
            return Vec::new();
        };
        let candidates: Vec<&Arc<CompiledRule>> = ids
            .iter()
            .filter_map(|id| set.compiled.get(id))
            .filter(|c| c.rule.enabled)
            .collect();
        if candidates.is_empty() {
            return Vec::new();
        }

        let mut st = self.state.lock().expect("engine state");
        let now = st.clock.map_or(r.timestamp, |c| c.max(r.timestamp));
        st.clock = Some(now);
        let snap = self.capture(candidates.iter().map(|c| c.as_ref()), now);

        let mut fired = Vec::new();
        for c in candidates {
            let truth = evaluate(&c.condition, &snap);
            let state = st.rules.entry(c.rule.id.clone()).or_default();
            match truth {
                Truth::Unknown => {}
                Truth::False => state.last = Some(false),
                Truth::True => {
                    let edge = state.last != Some(true);
                    state.last = Some(true);
                    let cooled = state
                        .last_fire
                        .is_none_or(|t| now - t >= Duration::seconds(c.rule.cooldown_s as i64));
                    if edge && cooled {
                        state.last_fire = Some(now);
                        fired.push((
                            TriggerEvent {
                                rule_id: c.rule.id.clone(),
                                target: c.rule.target.clone(),
                                fired_at: now,
                                bindings: bindings(&c.condition, &snap),
                            },
                            c.rule.clone(),
                        ));
                    } else if edge {
                        log::debug!("rule {} re-triggered within cooldown", c.rule.id);
                    }
                }
            }
        }
        fired
    }

    pub fn on_reading(&self, r: &Reading) -> Vec<TriggerEvent> {
        self.on_reading_detailed(r).into_iter().map(|(e, _)| e).collect()
    }

    /// Metric references of all enabled rules; used for diagnostics.
    pub fn watched_metrics(&self) -> HashSet<(String, SensorKind)> {
        self.rules.load().index.keys().cloned().collect()
    }
}

/// Request body for creating or replacing a rule over the API.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct RuleBody {
    pub name: String,
    pub condition: String,
    pub category: Category,
    pub suggestion: String,
    #[serde(default)]
    pub cooldown_s: Option<u64>,
    #[serde(default)]
    pub enabled: Option<bool>,
}

impl RuleBody {
    pub fn into_rule(self, id: RuleId, target: &str, defaults: &EngineDefaults) -> Rule {
        Rule {
            id,
            name: self.name,
            target: target.trim_matches('/').to_string(),
            condition: self.condition,
            category: self.category,
            suggestion_template: self.suggestion,
            cooldown_s: self.cooldown_s.unwrap_or(defaults.cooldown_s),
            enabled: self.enabled.unwrap_or(true),
        }
    }
}

/// Adapter that feeds accepted readings into the engine and hands fired
/// events to a callback.
pub struct EngineSink<F> {
    engine: Arc<RuleEngine>,
    on_fire: F,
}

impl<F> EngineSink<F>
where
    F: Fn(TriggerEvent, Rule) + Send + Sync,
{
    pub fn new(engine: Arc<RuleEngine>, on_fire: F) -> Self {
        EngineSink { engine, on_fire }
    }
}

impl<F> ReadingSink for EngineSink<F>
where
    F: Fn(TriggerEvent, Rule) + Send + Sync,
{
    fn on_reading(&self, reading: &Reading, _ack: &Ack) {
        for (event, rule) in self.engine.on_reading_detailed(reading) {
            (self.on_fire)(event, rule);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Ingestor;
    use crate::model::{NodeDef, NodeKind};
    use crate::rules::ConditionError;
    use crate::store::Store;
    use chrono::TimeZone;

    const LAB: &str = "site1/building-a/floor2/lab-x";
    const OTHER: &str = "site1/building-a/floor2/lab-y";

    struct Rig {
        engine: Arc<RuleEngine>,
        ingest: Ingestor,
        manager: User,
    }

    fn rig() -> Rig {
        let tree = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "site1", None),
            NodeDef::new("b", NodeKind::Building, "building-a", Some("s")),
            NodeDef::new("f", NodeKind::Floor, "floor2", Some("b")),
            NodeDef::new("x", NodeKind::Room, "lab-x", Some("f")),
            NodeDef::new("y", NodeKind::Room, "lab-y", Some("f")),
        ])
        .unwrap();
        let tree = Arc::new(Published::new(tree));
        let store = Arc::new(Store::in_memory());
        let engine = Arc::new(RuleEngine::new(tree.clone(), store.clone(), EngineDefaults::default()));
        Rig {
            engine,
            ingest: Ingestor::new(tree, store),
            manager: User::manager("m", &["b"]),
        }
    }

    fn t(min: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 3, 6, 16, 0, 0).unwrap() + Duration::minutes(min)
    }

    fn rule(id: &str, target: &str, condition: &str, cooldown_s: u64) -> Rule {
        Rule {
            id: RuleId::new(id),
            name: id.to_string(),
            target: target.to_string(),
            condition: condition.to_string(),
            category: Category::Behavioral,
            suggestion_template: "Turn-off the light when leaving".to_string(),
            cooldown_s,
            enabled: true,
        }
    }

    impl Rig {
        fn feed(&self, path: &str, kind: SensorKind, min: i64, value: f64) -> Vec<TriggerEvent> {
            let r = Reading::iot(path, kind, t(min), value);
            self.ingest.ingest_reading(&r, None, t(min)).unwrap();
            self.engine.on_reading(&r)
        }

        /// One five-minute tick of a room: occupancy then light.
        fn tick(&self, path: &str, min: i64, occupied: bool, light: bool) -> Vec<TriggerEvent> {
            let mut ev = self.feed(path, SensorKind::OccupancyCount, min, if occupied { 12.0 } else { 0.0 });
            ev.extend(self.feed(path, SensorKind::LightState, min, if light { 1.0 } else { 0.0 }));
            ev
        }
    }

    const TABLE_ONE: &str = "empty(lab-x) AND light(lab-x) is on";

    #[test]
    fn fires_once_on_edge() {
        let rig = rig();
        rig.engine
            .upsert_rule(rule("r1", LAB, TABLE_ONE, 3600), &rig.manager)
            .unwrap();
        let mut events = Vec::new();
        for m in (0..=60).step_by(5) {
            // Occupied until 16:15, lights stay on afterwards.
            events.extend(rig.tick(LAB, m, m < 15, true));
        }
        assert_eq!(events.len(), 1);
        // Dwell of 15 minutes after the last presence sample at 16:10.
        assert_eq!(events[0].fired_at, t(30));
        assert!(events[0]
            .bindings
            .iter()
            .any(|b| b.kind == SensorKind::LightState && b.value == 1.0));
    }

    /// Level sequence replayed against an edge/cooldown oracle.
    fn replay(cooldown_s: u64, pattern: &[bool]) -> (usize, usize) {
        let rig = rig();
        rig.engine
            .upsert_rule(
                rule("r1", LAB, &format!("metric({LAB}, power_w) > 150"), cooldown_s),
                &rig.manager,
            )
            .unwrap();
        let mut got = 0;
        let mut expected = 0;
        let mut last = false;
        let mut last_fire: Option<i64> = None;
        for (i, &high) in pattern.iter().enumerate() {
            let min = i as i64 * 5;
            got += rig
                .feed(LAB, SensorKind::PowerW, min, if high { 200.0 } else { 100.0 })
                .len();
            if high && !last && last_fire.is_none_or(|f| (min - f) * 60 >= cooldown_s as i64) {
                expected += 1;
                last_fire = Some(min);
            }
            last = high;
        }
        (got, expected)
    }

    #[test]
    fn true_false_true_without_cooldown_fires_twice() {
        assert_eq!(replay(0, &[true, true, false, true]), (2, 2));
    }

    #[test]
    fn cooldown_suppresses_then_releases() {
        // Edges at 0, 10 (suppressed) and 70 minutes.
        let mut p = vec![true, false, true];
        p.extend(std::iter::repeat_n(true, 10));
        p.extend([false, true]);
        let (got, expected) = replay(3600, &p);
        assert_eq!(got, expected);
        assert_eq!(got, 2);
    }

    #[test]
    fn random_patterns_match_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_pcg::Pcg64::seed_from_u64(7);
        for _ in 0..20 {
            let pattern: Vec<bool> = (0..40).map(|_| rng.random_bool(0.4)).collect();
            let cooldown = [0, 600, 1800][rng.random_range(0..3)];
            let (got, expected) = replay(cooldown, &pattern);
            assert_eq!(got, expected, "cooldown {cooldown} pattern {pattern:?}");
        }
    }

    #[test]
    fn disabled_and_deleted_rules_stay_quiet() {
        let rig = rig();
        let mut r = rule("r1", LAB, &format!("metric({LAB}, power_w) > 150"), 0);
        r.enabled = false;
        rig.engine.upsert_rule(r.clone(), &rig.manager).unwrap();
        assert!(rig.feed(LAB, SensorKind::PowerW, 0, 200.0).is_empty());
        r.enabled = true;
        rig.engine.upsert_rule(r, &rig.manager).unwrap();
        assert!(rig.feed(LAB, SensorKind::PowerW, 5, 100.0).is_empty());
        assert_eq!(rig.feed(LAB, SensorKind::PowerW, 10, 200.0).len(), 1);
        rig.engine.delete_rule(&RuleId::new("r1"), &rig.manager).unwrap();
        rig.feed(LAB, SensorKind::PowerW, 15, 100.0);
        assert!(rig.feed(LAB, SensorKind::PowerW, 20, 200.0).is_empty());
        assert!(matches!(
            rig.engine.delete_rule(&RuleId::new("r1"), &rig.manager),
            Err(RuleError::NotFound(_))
        ));
    }

    #[test]
    fn other_rooms_never_trigger() {
        let rig = rig();
        rig.engine
            .upsert_rule(rule("r1", LAB, TABLE_ONE, 0), &rig.manager)
            .unwrap();
        let mut events = Vec::new();
        for m in (0..=60).step_by(5) {
            events.extend(rig.tick(OTHER, m, false, true));
        }
        assert!(events.is_empty());
    }

    #[test]
    fn untouched_rule_stream_is_isolated() {
        let run = |with_other: bool| {
            let rig = rig();
            rig.engine
                .upsert_rule(
                    rule("b", LAB, &format!("metric({LAB}, power_w) > 150"), 0),
                    &rig.manager,
                )
                .unwrap();
            if with_other {
                rig.engine
                    .upsert_rule(rule("a", LAB, &format!("metric({LAB}, power_w) > 50"), 0), &rig.manager)
                    .unwrap();
            }
            let mut out = Vec::new();
            for (i, v) in [200.0, 100.0, 40.0, 300.0, 10.0, 160.0].into_iter().enumerate() {
                if with_other && i == 3 {
                    rig.engine.delete_rule(&RuleId::new("a"), &rig.manager).unwrap();
                }
                out.extend(
                    rig.feed(LAB, SensorKind::PowerW, i as i64 * 5, v)
                        .into_iter()
                        .filter(|e| e.rule_id.as_str() == "b"),
                );
            }
            out
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn stale_values_are_unknown() {
        let rig = rig();
        let cond = format!("metric({LAB}, power_w) > 150 AND metric({LAB}, noise_db) > 80");
        rig.engine.upsert_rule(rule("r1", LAB, &cond, 0), &rig.manager).unwrap();
        rig.feed(LAB, SensorKind::PowerW, 0, 200.0);
        assert!(rig.feed(LAB, SensorKind::NoiseDb, 0, 50.0).is_empty());
        // Power is 30 minutes old by now, beyond the 900 s fallback horizon.
        assert!(rig.feed(LAB, SensorKind::NoiseDb, 30, 90.0).is_empty());
        assert_eq!(rig.feed(LAB, SensorKind::PowerW, 35, 200.0).len(), 1);
    }

    #[test]
    fn windowed_metric_uses_trailing_samples() {
        let rig = rig();
        rig.engine
            .upsert_rule(
                rule("r1", LAB, &format!("metric({LAB}, power_w, mean 15m) > 150"), 0),
                &rig.manager,
            )
            .unwrap();
        assert!(rig.feed(LAB, SensorKind::PowerW, 0, 100.0).is_empty());
        assert!(rig.feed(LAB, SensorKind::PowerW, 5, 190.0).is_empty());
        // Window (16:00, 16:15] holds 190 and 220.
        assert_eq!(rig.feed(LAB, SensorKind::PowerW, 15, 220.0).len(), 1);
    }

    #[test]
    fn authorization_and_validation() {
        let rig = rig();
        let teacher = User::teacher("t", "c1", &["b"]);
        let stranger = User::manager("m2", &["elsewhere"]);
        assert!(matches!(
            rig.engine.upsert_rule(rule("r1", LAB, TABLE_ONE, 0), &teacher),
            Err(RuleError::Unauthorized(_))
        ));
        assert!(matches!(
            rig.engine.upsert_rule(rule("r1", LAB, TABLE_ONE, 0), &stranger),
            Err(RuleError::Unauthorized(_))
        ));
        let mut bad = rule("r1", LAB, TABLE_ONE, 0);
        bad.suggestion_template = "{bogus}".into();
        assert!(matches!(
            rig.engine.upsert_rule(bad, &rig.manager),
            Err(RuleError::ValidationFailed(_))
        ));
        assert!(matches!(
            rig.engine.upsert_rule(rule("r1", LAB, "empty(lab-y)", 0), &rig.manager),
            Err(RuleError::Condition(ConditionError::OutOfScope { .. }))
        ));
        assert!(matches!(
            rig.engine
                .upsert_rule(rule("r1", "site1/nowhere", TABLE_ONE, 0), &rig.manager),
            Err(RuleError::UnknownTarget(_))
        ));
        assert!(rig.engine.rule_set().rules().next().is_none());
    }

    #[test]
    fn listing_shows_inherited_rules() {
        let rig = rig();
        rig.engine
            .upsert_rule(
                rule("bld", "site1/building-a", "metric(building-a, power_w) > 5000", 0),
                &rig.manager,
            )
            .unwrap();
        rig.engine
            .upsert_rule(rule("lab", LAB, TABLE_ONE, 0), &rig.manager)
            .unwrap();
        let listed = rig.engine.list_for(LAB).unwrap();
        assert_eq!(listed.len(), 2);
        assert_eq!(listed[0].inherited_from.as_deref(), Some("site1/building-a"));
        assert_eq!(listed[1].inherited_from, None);
        assert_eq!(rig.engine.list_for(OTHER).unwrap().len(), 1);
    }

    #[test]
    fn persisted_rules_survive_restart_and_bad_ones_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        {
            let rig = rig();
            let engine = RuleEngine::new(
                rig.engine.tree.clone(),
                rig.engine.source.clone(),
                EngineDefaults::default(),
            )
            .with_persistence(&path);
            engine.bootstrap(Vec::new()).unwrap();
            engine
                .upsert_rule(rule("r1", LAB, TABLE_ONE, 60), &rig.manager)
                .unwrap();
        }
        let mut doc: Vec<Rule> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc.len(), 1);
        doc.push(rule("broken", LAB, "empty(", 0));
        fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();

        let rig = rig();
        let engine = RuleEngine::new(
            rig.engine.tree.clone(),
            rig.engine.source.clone(),
            EngineDefaults::default(),
        )
        .with_persistence(&path);
        assert_eq!(engine.bootstrap(vec![rule("ignored", LAB, TABLE_ONE, 0)]).unwrap(), 1);
        assert_eq!(engine.rule(&RuleId::new("r1")).unwrap().cooldown_s, 60);
        let invalid = engine.invalid_rules();
        assert_eq!(invalid.len(), 1);
        assert_eq!(invalid[0].0.as_str(), "broken");
    }

    #[test]
    fn rule_body_defaults() {
        let body: RuleBody = serde_json::from_str(
            r#"{"name":"lights","condition":"empty(lab-x) AND light(lab-x) is on","category":"behavioral","suggestion":"Turn-off the light when leaving"}"#,
        )
        .unwrap();
        let r = body.into_rule(RuleId::new("r1"), "/site1/building-a/", &EngineDefaults::default());
        assert_eq!(r.cooldown_s, 3600);
        assert!(r.enabled);
        assert_eq!(r.target, "site1/building-a");
    }
}
