//! Service configuration: one JSON document naming the data directory and
//! the tree, user, rule and engagement files. Relative paths are resolved
//! against the configuration file's directory.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use gaia_core::engagement::{default_badge_rules, BadgeRule, ClassDef, QuestDef};
use gaia_core::model::{NodeDef, ResourceTree, UserDirectory, UserEntry};
use gaia_core::platform::PlatformOptions;
use gaia_core::rules::{EngineDefaults, Rule};

pub const CONFIG_ENV: &str = "GAIA_CONFIG";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen: String,
    data_dir: PathBuf,
    tree_file: PathBuf,
    users_file: PathBuf,
    #[serde(default)]
    rules_file: Option<PathBuf>,
    #[serde(default)]
    engagement_file: Option<PathBuf>,
    #[serde(default)]
    defaults: Option<EngineDefaults>,
    #[serde(default = "default_log_level")]
    log_level: String,
    #[serde(default = "default_queue")]
    queue_capacity: usize,
    #[serde(default = "default_sync")]
    sync_on_append: bool,
}

fn default_log_level() -> String {
    "info".into()
}

fn default_queue() -> usize {
    64
}

fn default_sync() -> bool {
    true
}

/// Quest, class and badge definitions.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngagementDefs {
    #[serde(default)]
    pub quests: Vec<QuestDef>,
    #[serde(default)]
    pub classes: Vec<ClassDef>,
    #[serde(default = "default_badge_rules")]
    pub badges: Vec<BadgeRule>,
}

/// A validated configuration with every referenced file loaded.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub tree: ResourceTree,
    pub users: UserDirectory,
    pub initial_rules: Vec<Rule>,
    pub engagement: EngagementDefs,
    pub defaults: EngineDefaults,
    pub log_level: log::LevelFilter,
    pub queue_capacity: usize,
    pub sync_on_append: bool,
}

impl ServiceConfig {
    pub fn platform_options(&self) -> PlatformOptions {
        PlatformOptions {
            data_dir: Some(self.data_dir.clone()),
            sync_on_append: self.sync_on_append,
            defaults: self.defaults,
            queue_capacity: self.queue_capacity,
            initial_rules: self.initial_rules.clone(),
            quests: self.engagement.quests.clone(),
            classes: self.engagement.classes.clone(),
            badge_rules: self.engagement.badges.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub file: PathBuf,
    /// 1-based line and column when the problem has a position.
    pub location: Option<(usize, usize)>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some((line, col)) => write!(f, "{}:{line}:{col}: {}", self.file.display(), self.message),
            None => write!(f, "{}: {}", self.file.display(), self.message),
        }
    }
}

/// Every problem found in a configuration, not just the first.
#[derive(Debug, Clone, thiserror::Error)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s)", self.issues.len())?;
        for i in &self.issues {
            write!(f, "\n  {i}")?;
        }
        Ok(())
    }
}

/// Picks the explicit path, else the `GAIA_CONFIG` environment variable.
pub fn config_path(explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}

struct Collector {
    issues: Vec<ConfigIssue>,
}

impl Collector {
    fn push(&mut self, file: &Path, location: Option<(usize, usize)>, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            file: file.to_path_buf(),
            location,
            message: message.into(),
        });
    }

    fn read(&mut self, file: &Path) -> Option<String> {
        match std::fs::read_to_string(file) {
            Ok(text) => Some(text),
            Err(e) => {
                self.push(file, None, format!("cannot read: {e}"));
                None
            }
        }
    }

    fn json<T: DeserializeOwned>(&mut self, file: &Path) -> Option<T> {
        let text = self.read(file)?;
        match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                self.push(file, Some((e.line(), e.column())), e.to_string());
                None
            }
        }
    }
}

pub fn load_config(path: &Path) -> Result<ServiceConfig, ConfigError> {
    let mut c = Collector { issues: Vec::new() };
    let Some(raw) = c.json::<RawConfig>(path) else {
        return Err(ConfigError { issues: c.issues });
    };
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let listen = match raw.listen.parse::<SocketAddr>() {
        Ok(a) => Some(a),
        Err(e) => {
            c.push(path, None, format!("listen address `{}`: {e}", raw.listen));
            None
        }
    };
    let log_level = match raw.log_level.parse::<log::LevelFilter>() {
        Ok(l) => Some(l),
        Err(_) => {
            c.push(path, None, format!("unknown log level `{}`", raw.log_level));
            None
        }
    };
    if raw.queue_capacity == 0 {
        c.push(path, None, "queue_capacity must be positive");
    }
    let defaults = raw.defaults.unwrap_or_default();
    if defaults.staleness_s == 0 || defaults.dwell_s == 0 {
        c.push(path, None, "staleness_s and dwell_s must be positive");
    }

    let tree_file = resolve(&raw.tree_file);
    let tree = c
        .json::<Vec<NodeDef>>(&tree_file)
        .and_then(|defs| match ResourceTree::build(defs) {
            Ok(t) => Some(t),
            Err(e) => {
                c.push(&tree_file, None, e.to_string());
                None
            }
        });
    let users_file = resolve(&raw.users_file);
    let users = c
        .json::<Vec<UserEntry>>(&users_file)
        .and_then(|entries| match UserDirectory::from_entries(entries) {
            Ok(d) => Some(d),
            Err(e) => {
                c.push(&users_file, None, e);
                None
            }
        });
    let initial_rules = match &raw.rules_file {
        Some(f) => c.json::<Vec<Rule>>(&resolve(f)),
        None => Some(Vec::new()),
    };
    let engagement = match &raw.engagement_file {
        Some(f) => c.json::<EngagementDefs>(&resolve(f)),
        None => Some(EngagementDefs {
            badges: default_badge_rules(),
            ..EngagementDefs::default()
        }),
    };
    if let (Some(tree), Some(e), Some(f)) = (&tree, &engagement, &raw.engagement_file) {
        for class in &e.classes {
            if tree.get(&class.school).is_none() {
                c.push(
                    &resolve(f),
                    None,
                    format!("class `{}` names unknown school `{}`", class.id, class.school),
                );
            }
        }
    }

    match (listen, log_level, tree, users, initial_rules, engagement) {
        (Some(listen), Some(log_level), Some(tree), Some(users), Some(initial_rules), Some(engagement))
            if c.issues.is_empty() =>
        {
            Ok(ServiceConfig {
                listen,
                data_dir: resolve(&raw.data_dir),
                tree,
                users,
                initial_rules,
                engagement,
                defaults,
                log_level,
                queue_capacity: raw.queue_capacity,
                sync_on_append: raw.sync_on_append,
            })
        }
        _ => Err(ConfigError { issues: c.issues }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    fn valid_files(dir: &Path) {
        write(
            dir,
            "tree.json",
            r#"[{"id":"s","kind":"site","name":"s"},{"id":"b","kind":"building","name":"b","parent":"s"}]"#,
        );
        write(
            dir,
            "users.json",
            r#"[{"id":"m","role":"building_manager","building_ids":["b"],"token":"t"}]"#,
        );
    }

    #[test]
    fn minimal_config_loads() {
        let dir = tempfile::tempdir().unwrap();
        valid_files(dir.path());
        write(
            dir.path(),
            "gaia.json",
            r#"{"listen":"127.0.0.1:0","data_dir":"data","tree_file":"tree.json","users_file":"users.json"}"#,
        );
        let cfg = load_config(&dir.path().join("gaia.json")).unwrap();
        assert_eq!(cfg.data_dir, dir.path().join("data"));
        assert_eq!(cfg.defaults, EngineDefaults::default());
        assert_eq!(cfg.tree.len(), 2);
        assert!(cfg.users.by_token("t").is_some());
    }

    #[test]
    fn missing_tree_file_is_one_error() {
        let dir = tempfile::tempdir().unwrap();
        valid_files(dir.path());
        write(
            dir.path(),
            "gaia.json",
            r#"{"listen":"127.0.0.1:0","data_dir":"data","tree_file":"nope.json","users_file":"users.json"}"#,
        );
        let err = load_config(&dir.path().join("gaia.json")).unwrap_err();
        assert_eq!(err.issues.len(), 1, "{err}");
        assert!(err.issues[0].file.ends_with("nope.json"));
    }

    #[test]
    fn independent_errors_are_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        valid_files(dir.path());
        write(dir.path(), "rules.json", "[\n  {\"id\": }\n]");
        write(
            dir.path(),
            "gaia.json",
            r#"{"listen":"not-an-address","data_dir":"data","tree_file":"tree.json","users_file":"missing.json","rules_file":"rules.json"}"#,
        );
        let err = load_config(&dir.path().join("gaia.json")).unwrap_err();
        assert_eq!(err.issues.len(), 3, "{err}");
        let rules = err.issues.iter().find(|i| i.file.ends_with("rules.json")).unwrap();
        assert_eq!(rules.location.map(|l| l.0), Some(2));
        assert!(err.to_string().contains("missing.json"));
        assert!(err.to_string().contains("not-an-address"));
    }

    #[test]
    fn unparsable_config_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "gaia.json", "{\n\"listen\": 3\n}");
        let err = load_config(&dir.path().join("gaia.json")).unwrap_err();
        assert_eq!(err.issues[0].location.map(|l| l.0), Some(2));
    }
}
