//! Suggestion composition and fan-out to subscribers.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::model::{path_covers, Published, ResourceTree};
use crate::rules::{Category, Rule, RuleId, TriggerEvent};

pub const PLACEHOLDERS: [&str; 3] = ["metric", "value", "resource"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub id: String,
    pub rule_id: RuleId,
    pub resource: String,
    pub category: Category,
    pub suggestion: String,
    pub event_description: String,
    pub emitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("unbalanced brace at byte {0}")]
    Unbalanced(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum NotifyError {
    #[error("unknown scope `{0}`")]
    UnknownScope(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("notification log: {0}")]
    Io(#[from] std::io::Error),
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push(Piece::Text(&template[start..i + 1]));
                i += 2;
                start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push(Piece::Text(&template[start..i + 1]));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = template[i..].find('}').ok_or(TemplateError::Unbalanced(i))? + i;
                let name = &template[i + 1..close];
                if !PLACEHOLDERS.contains(&name) {
                    return Err(TemplateError::UnknownPlaceholder(name.to_string()));
                }
                out.push(Piece::Text(&template[start..i]));
                out.push(Piece::Slot(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(TemplateError::Unbalanced(i)),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&template[start..]));
    Ok(out)
}

/// Checks that a suggestion template only uses known placeholders.
pub fn check_template(template: &str) -> Result<(), TemplateError> {
    pieces(template).map(|_| ())
}

pub fn render_template(template: &str, metric: &str, value: &str, resource: &str) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 16);
    for p in pieces(template)? {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot("metric") => out.push_str(metric),
            Piece::Slot("value") => out.push_str(value),
            Piece::Slot(_) => out.push_str(resource),
        }
    }
    Ok(out)
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Builds the notification for a fired rule. `{metric}` and `{value}` come
/// from the first bound input, `{resource}` is the rule target. The id and
/// emission time are assigned by [`Notifier::publish`].
pub fn compose_notification(event: &TriggerEvent, rule: &Rule) -> Result<Notification, TemplateError> {
    let first = event.bindings.first();
    let metric = first.map_or("n/a".to_string(), |b| b.kind.to_string());
    let value = first.map_or("n/a".to_string(), |b| format_value(b.value));
    let suggestion = render_template(&rule.suggestion_template, &metric, &value, &event.target)?;
    let inputs: Vec<String> = event
        .bindings
        .iter()
        .map(|b| {
            format!(
                "{}@{}={} ({})",
                b.kind,
                b.path,
                format_value(b.value),
                b.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true)
            )
        })
        .collect();
    let event_description = if inputs.is_empty() {
        format!("rule `{}` fired on {}", rule.name, event.target)
    } else {
        format!("rule `{}` fired on {}: {}", rule.name, event.target, inputs.join(", "))
    };
    Ok(Notification {
        id: String::new(),
        rule_id: event.rule_id.clone(),
        resource: event.target.clone(),
        category: rule.category,
        suggestion,
        event_description,
        emitted_at: event.fired_at,
    })
}

struct Subscriber {
    id: u64,
    scope: String,
    categories: Option<BTreeSet<Category>>,
    tx: mpsc::Sender<Notification>,
}

impl Subscriber {
    fn wants(&self, n: &Notification) -> bool {
        path_covers(&self.scope, n.resource.trim_matches('/'))
            && self.categories.as_ref().is_none_or(|c| c.contains(&n.category))
    }
}

/// Result of a publish: the stamped notification and how many live
/// subscribers it was handed to.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub notification: Notification,
    pub delivered: usize,
}

/// Live feed of notifications for one subscriber.
pub struct Subscription {
    pub id: u64,
    pub rx: mpsc::Receiver<Notification>,
}

#[derive(Default)]
struct HubState {
    next_id: u64,
    next_sub: u64,
    last_emitted: Option<DateTime<Utc>>,
    log: Vec<Notification>,
    subscribers: Vec<Subscriber>,
    file: Option<File>,
}

/// Assigns ids, keeps the notification log and fans out to subscribers.
/// A subscriber whose queue is full is disconnected rather than allowed
/// to stall the publisher.
pub struct Notifier {
    tree: Arc<Published<ResourceTree>>,
    queue_capacity: usize,
    state: Mutex<HubState>,
}

impl Notifier {
    pub fn in_memory(tree: Arc<Published<ResourceTree>>, queue_capacity: usize) -> Self {
        Notifier {
            tree,
            queue_capacity: queue_capacity.max(1),
            state: Mutex::new(HubState::default()),
        }
    }

    /// Opens (or creates) a JSON-lines log at `path` and resumes numbering
    /// after its last entry. An incomplete trailing line is discarded.
    pub fn open(tree: Arc<Published<ResourceTree>>, queue_capacity: usize, path: &Path) -> Result<Self, NotifyError> {
        let log = load_log(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let state = HubState {
            next_id: log.len() as u64,
            last_emitted: log.last().map(|n| n.emitted_at),
            log,
            file: Some(file),
            ..HubState::default()
        };
        Ok(Notifier {
            tree,
            queue_capacity: queue_capacity.max(1),
            state: Mutex::new(state),
        })
    }

    fn scope(&self, scope: &str) -> Result<String, NotifyError> {
        let trimmed = scope.trim_matches('/');
        if trimmed.is_empty() {
            return Ok(String::new());
        }
        let tree = self.tree.load();
        let node = tree
            .resolve_path(trimmed)
            .map_err(|_| NotifyError::UnknownScope(scope.to_string()))?;
        Ok(tree.canonical_path(node))
    }

    pub fn subscribe(&self, scope: &str, categories: Option<BTreeSet<Category>>) -> Result<Subscription, NotifyError> {
        let scope = self.scope(scope)?;
        let (tx, rx) = mpsc::channel(self.queue_capacity);
        let mut st = self.state.lock().expect("notifier state");
        st.next_sub += 1;
        let id = st.next_sub;
        st.subscribers.push(Subscriber {
            id,
            scope,
            categories,
            tx,
        });
        Ok(Subscription { id, rx })
    }

    pub fn unsubscribe(&self, id: u64) {
        self.state
            .lock()
            .expect("notifier state")
            .subscribers
            .retain(|s| s.id != id);
    }

    pub fn subscriber_count(&self) -> usize {
        self.state.lock().expect("notifier state").subscribers.len()
    }

    /// Drops every subscriber so their feeds end.
    pub fn close_all(&self) {
        self.state.lock().expect("notifier state").subscribers.clear();
    }

    /// Stamps, logs and delivers a composed notification.
    pub fn publish(&self, mut n: Notification) -> Result<Delivery, NotifyError> {
        let mut st = self.state.lock().expect("notifier state");
        n.id = format!("n-{:06}", st.next_id + 1);
        n.emitted_at = st.last_emitted.map_or(n.emitted_at, |l| l.max(n.emitted_at));
        if let Some(f) = st.file.as_mut() {
            let mut line = serde_json::to_vec(&n).expect("notification serializes");
            line.push(b'\n');
            f.write_all(&line)?;
        }
        st.next_id += 1;
        st.last_emitted = Some(n.emitted_at);
        st.log.push(n.clone());
        let mut delivered = 0;
        st.subscribers.retain(|s| {
            if !s.wants(&n) {
                return !s.tx.is_closed();
            }
            match s.tx.try_send(n.clone()) {
                Ok(()) => {
                    delivered += 1;
                    true
                }
                Err(mpsc::error::TrySendError::Full(_)) => {
                    log::warn!("subscriber {} is not keeping up; disconnecting", s.id);
                    false
                }
                Err(mpsc::error::TrySendError::Closed(_)) => false,
            }
        });
        Ok(Delivery {
            notification: n,
            delivered,
        })
    }

    pub fn emit(&self, event: &TriggerEvent, rule: &Rule) -> Result<Delivery, NotifyError> {
        let n = compose_notification(event, rule)?;
        self.publish(n)
    }

    /// Logged notifications under `scope` emitted strictly after `since`,
    /// oldest first, at most `limit`.
    pub fn history(
        &self,
        scope: &str,
        since: Option<DateTime<Utc>>,
        limit: usize,
    ) -> Result<Vec<Notification>, NotifyError> {
        let scope = self.scope(scope)?;
        let st = self.state.lock().expect("notifier state");
        Ok(st
            .log
            .iter()
            .filter(|n| since.is_none_or(|s| n.emitted_at > s))
            .filter(|n| path_covers(&scope, n.resource.trim_matches('/')))
            .take(limit)
            .cloned()
            .collect())
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("notifier state").log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn load_log(path: &Path) -> Result<Vec<Notification>, NotifyError> {
    let text = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut good = 0usize;
    for chunk in text.split_inclusive(|&b| b == b'\n') {
        if !chunk.ends_with(b"\n") {
            break;
        }
        match serde_json::from_slice::<Notification>(chunk) {
            Ok(n) => out.push(n),
            Err(e) => {
                log::warn!("{}: dropping unreadable entry: {e}", path.display());
                break;
            }
        }
        good += chunk.len();
    }
    if good < text.len() {
        log::warn!("{}: truncating incomplete tail", path.display());
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(good as u64)?;
    }
    Ok(out)
}

pub fn default_log_path(dir: &Path) -> PathBuf {
    dir.join("notifications.jsonl")
}
