//! Wiring of the tree, store, ingestion, rule engine, notifier and
//! engagement into one running unit.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::engagement::{BadgeRule, ClassDef, Engagement, EngagementError, QuestDef};
use crate::ingest::{Ack, IngestError, Ingestor, Reading};
use crate::model::{Published, ResourceTree, UserDirectory};
use crate::notify::{Notifier, NotifyError};
use crate::rules::{EngineDefaults, EngineSink, Rule, RuleEngine, RuleError};
use crate::store::{Store, StoreError, StoreStats};

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("rules: {0}")]
    Rules(#[from] RuleError),
    #[error("notifications: {0}")]
    Notify(#[from] NotifyError),
    #[error("engagement: {0}")]
    Engagement(#[from] EngagementError),
    #[error("data directory: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct PlatformOptions {
    /// Everything is kept in memory when unset.
    pub data_dir: Option<PathBuf>,
    pub sync_on_append: bool,
    pub defaults: EngineDefaults,
    pub queue_capacity: usize,
    /// Installed only when no persisted rule set exists yet.
    pub initial_rules: Vec<Rule>,
    pub quests: Vec<QuestDef>,
    pub classes: Vec<ClassDef>,
    pub badge_rules: Vec<BadgeRule>,
}

impl Default for PlatformOptions {
    fn default() -> Self {
        PlatformOptions {
            data_dir: None,
            sync_on_append: true,
            defaults: EngineDefaults::default(),
            queue_capacity: 64,
            initial_rules: Vec::new(),
            quests: Vec::new(),
            classes: Vec::new(),
            badge_rules: crate::engagement::default_badge_rules(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvalidRule {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Health {
    pub ok: bool,
    pub store: StoreStats,
    pub rules_active: usize,
    pub invalid_rules: Vec<InvalidRule>,
    pub notifications_logged: usize,
    pub subscribers: usize,
    pub faults: Vec<String>,
}

pub struct Platform {
    pub tree: Arc<Published<ResourceTree>>,
    pub users: Arc<Published<UserDirectory>>,
    pub store: Arc<Store>,
    pub engine: Arc<RuleEngine>,
    pub notifier: Arc<Notifier>,
    pub ingestor: Arc<Ingestor>,
    pub engagement: Arc<Engagement>,
    faults: Arc<Mutex<Vec<String>>>,
}

impl Platform {
    pub fn open(tree: ResourceTree, users: UserDirectory, opts: PlatformOptions) -> Result<Self, PlatformError> {
        let tree = Arc::new(Published::new(tree));
        let users = Arc::new(Published::new(users));
        let dir = opts.data_dir.clone();
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let store = Arc::new(match &dir {
            Some(d) => Store::open_with(d.join("series"), opts.sync_on_append)?,
            None => Store::in_memory(),
        });
        let mut engine = RuleEngine::new(tree.clone(), store.clone(), opts.defaults);
        if let Some(d) = &dir {
            engine = engine.with_persistence(d.join("rules.json"));
        }
        let engine = Arc::new(engine);
        engine.bootstrap(opts.initial_rules.clone())?;
        let notifier = Arc::new(match &dir {
            Some(d) => Notifier::open(tree.clone(), opts.queue_capacity, &crate::notify::default_log_path(d))?,
            None => Notifier::in_memory(tree.clone(), opts.queue_capacity),
        });
        let mut engagement = Engagement::new(opts.quests, opts.classes, opts.badge_rules);
        if let Some(d) = &dir {
            engagement = engagement.with_log(&d.join("engagement.jsonl"))?;
        }

        let faults = Arc::new(Mutex::new(Vec::new()));
        let sink = {
            let notifier = notifier.clone();
            let faults = faults.clone();
            EngineSink::new(engine.clone(), move |event, rule| {
                if let Err(e) = notifier.emit(&event, &rule) {
                    log::error!("notification for rule {} lost: {e}", rule.id);
                    faults.lock().expect("faults").push(format!("rule {}: {e}", rule.id));
                }
            })
        };
        let ingestor = Arc::new(Ingestor::new(tree.clone(), store.clone()).with_sink(Arc::new(sink)));
        Ok(Platform {
            tree,
            users,
            store,
            engine,
            notifier,
            ingestor,
            engagement: Arc::new(engagement),
            faults,
        })
    }

    /// Ingests a reading authored by `user_id` (if any) at wall time `now`.
    pub fn ingest(&self, r: &Reading, user_id: Option<&str>, now: DateTime<Utc>) -> Result<Ack, IngestError> {
        let users = self.users.load();
        let user = match user_id {
            Some(id) => Some(
                users
                    .get(id)
                    .ok_or_else(|| IngestError::Unauthorized(format!("unknown user `{id}`")))?,
            ),
            None => None,
        };
        self.ingestor.ingest_reading(r, user, now)
    }

    pub fn health(&self) -> Health {
        let invalid_rules: Vec<InvalidRule> = self
            .engine
            .invalid_rules()
            .into_iter()
            .map(|(id, error)| InvalidRule { id: id.0, error })
            .collect();
        let faults = self.faults.lock().expect("faults").clone();
        let set = self.engine.rule_set();
        Health {
            ok: faults.is_empty(),
            store: self.store.stats(),
            rules_active: set.rules().count() - invalid_rules.len(),
            invalid_rules,
            notifications_logged: self.notifier.len(),
            subscribers: self.notifier.subscriber_count(),
            faults,
        }
    }

    pub fn flush(&self) -> Result<(), PlatformError> {
        self.store.flush()?;
        Ok(())
    }
}
