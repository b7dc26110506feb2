//! Quest points, class and school scores, badges, facility points, weekly
//! tasks and leaderboards.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::analytics::{compare_periods, AnalyticsError, Period};
use crate::model::{NodeId, ResourceTree, Role, SensorKind, User};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestDef {
    pub id: String,
    pub points: u32,
    #[serde(default)]
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: String,
    /// Site node of the school the class belongs to.
    pub school: NodeId,
    #[serde(default)]
    pub name: String,
}

/// A class earns badge `kind` the first time its score reaches `min_score`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadgeRule {
    pub kind: String,
    pub min_score: u64,
}

pub fn default_badge_rules() -> Vec<BadgeRule> {
    vec![
        BadgeRule {
            kind: "first-steps".into(),
            min_score: 1,
        },
        BadgeRule {
            kind: "high-score".into(),
            min_score: 100,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestCompletion {
    pub student_id: String,
    pub class_id: String,
    pub quest_id: String,
    pub points: u32,
    pub completed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Badge {
    pub class_id: String,
    pub kind: String,
    pub awarded_at: DateTime<Utc>,
    pub criterion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub user_id: String,
    pub content: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeeklyTask {
    pub id: String,
    /// ISO week, e.g. `2017-W10`.
    pub week: String,
    pub description: String,
    pub hashtag: String,
    #[serde(default)]
    pub submissions: Vec<Submission>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub class_id: String,
    pub student_id: String,
    pub title: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityCredit {
    pub building: NodeId,
    pub school: NodeId,
    pub points: u32,
    pub delta_pct: Option<f64>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum EngagementError {
    #[error("student `{student}` already completed quest `{quest}`")]
    DuplicateCompletion { student: String, quest: String },
    #[error("unknown quest `{0}`")]
    UnknownQuest(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("user `{0}` is not a student")]
    NotAStudent(String),
    #[error("a task already exists for week {0}")]
    TaskExists(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("bad week `{0}`")]
    BadWeek(String),
    #[error("unknown school for building `{0}`")]
    UnknownSchool(String),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("engagement log: {0}")]
    Io(#[from] std::io::Error),
    #[error("engagement log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

/// One point per whole percent of reduction, nothing for an increase.
pub fn facility_points(delta_pct: Option<f64>) -> u32 {
    match delta_pct {
        Some(d) if d < 0.0 => (-d).floor() as u32,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderboardScope {
    Classes,
    Schools,
}

impl std::str::FromStr for LeaderboardScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classes" => Ok(LeaderboardScope::Classes),
            "schools" => Ok(LeaderboardScope::Schools),
            other => Err(format!("unknown leaderboard scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Standing {
    pub rank: usize,
    pub id: String,
    pub score: u64,
    pub last_scored_at: Option<DateTime<Utc>>,
}

/// Ranking order: score descending, then earliest last-scoring time (an
/// entity that never scored goes last), then id.
pub fn standing_order(a: &Standing, b: &Standing) -> Ordering {
    b.score
        .cmp(&a.score)
        .then_with(|| match (a.last_scored_at, b.last_scored_at) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StudentScore {
    pub id: String,
    pub score: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassView {
    pub id: String,
    pub name: String,
    pub school: NodeId,
    pub score: u64,
    pub students: Vec<StudentScore>,
    pub badges: Vec<Badge>,
    pub recent_snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Completion(QuestCompletion),
    Badge(Badge),
    Task(WeeklyTask),
    Submission { task_id: String, submission: Submission },
    Snapshot(Snapshot),
    Facility(FacilityCredit),
}

#[derive(Debug, Default)]
struct State {
    completions: BTreeMap<(String, String), QuestCompletion>,
    badges: Vec<Badge>,
    tasks: BTreeMap<String, WeeklyTask>,
    snapshots: Vec<Snapshot>,
    facility: Vec<FacilityCredit>,
    file: Option<File>,
}

impl State {
    fn apply(&mut self, e: Event) {
        match e {
            Event::Completion(c) => {
                self.completions.insert((c.student_id.clone(), c.quest_id.clone()), c);
            }
            Event::Badge(b) => self.badges.push(b),
            Event::Task(t) => {
                self.tasks.insert(t.id.clone(), t);
            }
            Event::Submission { task_id, submission } => {
                if let Some(t) = self.tasks.get_mut(&task_id) {
                    t.submissions.push(submission);
                }
            }
            Event::Snapshot(s) => self.snapshots.push(s),
            Event::Facility(f) => self.facility.push(f),
        }
    }

    fn record(&mut self, e: Event) -> Result<(), EngagementError> {
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&e).expect("event serializes");
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.apply(e);
        Ok(())
    }

    fn class_score(&self, class: &str) -> (u64, Option<DateTime<Utc>>) {
        self.completions
            .values()
            .filter(|c| c.class_id == class)
            .fold((0, None), |(s, last), c| {
                (
                    s + u64::from(c.points),
                    Some(last.map_or(c.completed_at, |l: DateTime<Utc>| l.max(c.completed_at))),
                )
            })
    }

    fn student_score(&self, student: &str) -> u64 {
        self.completions
            .values()
            .filter(|c| c.student_id == student)
            .map(|c| u64::from(c.points))
            .sum()
    }
}

pub struct Engagement {
    quests: BTreeMap<String, QuestDef>,
    classes: BTreeMap<String, ClassDef>,
    badge_rules: Vec<BadgeRule>,
    state: Mutex<State>,
}

impl Engagement {
    pub fn new(quests: Vec<QuestDef>, classes: Vec<ClassDef>, badge_rules: Vec<BadgeRule>) -> Self {
        Engagement {
            quests: quests.into_iter().map(|q| (q.id.clone(), q)).collect(),
            classes: classes.into_iter().map(|c| (c.id.clone(), c)).collect(),
            badge_rules,
            state: Mutex::new(State::default()),
        }
    }

    /// Replays and then appends to a JSON-lines event log.
    pub fn with_log(self, path: &Path) -> Result<Self, EngagementError> {
        let mut st = self.state.lock().expect("engagement state");
        match fs::read_to_string(path) {
            Ok(text) => {
                let complete = text.rfind('\n').map_or(0, |i| i + 1);
                for (i, line) in text[..complete].lines().enumerate() {
                    let e: Event = serde_json::from_str(line).map_err(|e| EngagementError::Corrupt {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                    st.apply(e);
                }
                if complete < text.len() {
                    log::warn!("{}: truncating incomplete tail", path.display());
                    OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        st.file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        drop(st);
        Ok(self)
    }

    pub fn quests(&self) -> impl Iterator<Item = &QuestDef> {
        self.quests.values()
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.values()
    }

    /// Credits a quest to a student and returns the student's new score.
    pub fn award_points(&self, student: &User, quest_id: &str, at: DateTime<Utc>) -> Result<u64, EngagementError> {
        if student.role != Role::Student {
            return Err(EngagementError::NotAStudent(student.id.clone()));
        }
        let quest = self
            .quests
            .get(quest_id)
            .ok_or_else(|| EngagementError::UnknownQuest(quest_id.to_string()))?;
        let class_id = student.class_id.clone().unwrap_or_default();
        if !self.classes.contains_key(&class_id) {
            return Err(EngagementError::UnknownClass(class_id));
        }
        let mut st = self.state.lock().expect("engagement state");
        if st.completions.contains_key(&(student.id.clone(), quest_id.to_string())) {
            return Err(EngagementError::DuplicateCompletion {
                student: student.id.clone(),
                quest: quest_id.to_string(),
            });
        }
        st.record(Event::Completion(QuestCompletion {
            student_id: student.id.clone(),
            class_id: class_id.clone(),
            quest_id: quest_id.to_string(),
            points: quest.points,
            completed_at: at,
        }))?;
        let (score, _) = st.class_score(&class_id);
        for rule in &self.badge_rules {
            let held = st.badges.iter().any(|b| b.class_id == class_id && b.kind == rule.kind);
            if !held && score >= rule.min_score {
                st.record(Event::Badge(Badge {
                    class_id: class_id.clone(),
                    kind: rule.kind.clone(),
                    awarded_at: at,
                    criterion: format!("class score {score} reached {}", rule.min_score),
                }))?;
            }
        }
        Ok(st.student_score(&student.id))
    }

    pub fn student_score(&self, student_id: &str) -> u64 {
        self.state.lock().expect("engagement state").student_score(student_id)
    }

    pub fn class_score(&self, class_id: &str) -> Result<u64, EngagementError> {
        if !self.classes.contains_key(class_id) {
            return Err(EngagementError::UnknownClass(class_id.to_string()));
        }
        Ok(self.state.lock().expect("engagement state").class_score(class_id).0)
    }

    pub fn badges(&self, class_id: &str) -> Vec<Badge> {
        let st = self.state.lock().expect("engagement state");
        st.badges.iter().filter(|b| b.class_id == class_id).cloned().collect()
    }

    /// Computes facility points for a building from its energy use in
    /// `window` against `baseline` and credits them to the building's school.
    pub fn credit_facility_points(
        &self,
        store: &Store,
        tree: &ResourceTree,
        building: &NodeId,
        window: &Period,
        baseline: &Period,
        at: DateTime<Utc>,
    ) -> Result<FacilityCredit, EngagementError> {
        let cmp = compare_periods(store, tree, building, SensorKind::EnergyKwh, window, baseline)?;
        let school = tree
            .get(building)
            .and_then(|n| tree.ancestry(n).last())
            .map(|n| n.id.clone())
            .ok_or_else(|| EngagementError::UnknownSchool(building.to_string()))?;
        let credit = FacilityCredit {
            building: building.clone(),
            school,
            points: facility_points(cmp.delta_pct),
            delta_pct: cmp.delta_pct,
            at,
        };
        self.state
            .lock()
            .expect("engagement state")
            .record(Event::Facility(credit.clone()))?;
        Ok(credit)
    }

    pub fn leaderboard(&self, scope: LeaderboardScope) -> Vec<Standing> {
        let st = self.state.lock().expect("engagement state");
        let class_standings = self.classes.keys().map(|id| {
            let (score, last) = st.class_score(id);
            Standing {
                rank: 0,
                id: id.clone(),
                score,
                last_scored_at: last,
            }
        });
        let mut out: Vec<Standing> = match scope {
            LeaderboardScope::Classes => class_standings.collect(),
            LeaderboardScope::Schools => {
                let mut schools: BTreeMap<String, Standing> = BTreeMap::new();
                let bump = |schools: &mut BTreeMap<String, Standing>, id: &str, pts: u64, at: Option<DateTime<Utc>>| {
                    let s = schools.entry(id.to_string()).or_insert_with(|| Standing {
                        rank: 0,
                        id: id.to_string(),
                        score: 0,
                        last_scored_at: None,
                    });
                    s.score += pts;
                    if pts > 0 {
                        s.last_scored_at = s.last_scored_at.max(at);
                    }
                };
                for (c, s) in self.classes.values().zip(class_standings) {
                    bump(&mut schools, c.school.as_str(), s.score, s.last_scored_at);
                }
                for f in &st.facility {
                    bump(&mut schools, f.school.as_str(), u64::from(f.points), Some(f.at));
                }
                schools.into_values().collect()
            }
        };
        out.sort_by(standing_order);
        for (i, s) in out.iter_mut().enumerate() {
            s.rank = i + 1;
        }
        out
    }

    pub fn create_task(&self, week: &str, description: &str, hashtag: &str) -> Result<WeeklyTask, EngagementError> {
        let week = normalize_week(week)?;
        let mut st = self.state.lock().expect("engagement state");
        if st.tasks.values().any(|t| t.week == week) {
            return Err(EngagementError::TaskExists(week));
        }
        let task = WeeklyTask {
            id: format!("task-{week}"),
            week,
            description: description.to_string(),
            hashtag: hashtag.trim_start_matches('#').to_string(),
            submissions: Vec::new(),
        };
        st.record(Event::Task(task.clone()))?;
        Ok(task)
    }

    pub fn task_for(&self, at: DateTime<Utc>) -> Option<WeeklyTask> {
        let w = at.iso_week();
        let key = format!("{}-W{:02}", w.year(), w.week());
        let st = self.state.lock().expect("engagement state");
        st.tasks.values().find(|t| t.week == key).cloned()
    }

    pub fn submit(&self, task_id: &str, user: &User, content: &str, at: DateTime<Utc>) -> Result<(), EngagementError> {
        let mut st = self.state.lock().expect("engagement state");
        if !st.tasks.contains_key(task_id) {
            return Err(EngagementError::UnknownTask(task_id.to_string()));
        }
        st.record(Event::Submission {
            task_id: task_id.to_string(),
            submission: Submission {
                user_id: user.id.clone(),
                content: content.to_string(),
                at,
            },
        })
    }

    pub fn add_snapshot(&self, student: &User, title: &str, at: DateTime<Utc>) -> Result<Snapshot, EngagementError> {
        let class_id = student
            .class_id
            .clone()
            .ok_or_else(|| EngagementError::NotAStudent(student.id.clone()))?;
        if !self.classes.contains_key(&class_id) {
            return Err(EngagementError::UnknownClass(class_id));
        }
        let snap = Snapshot {
            class_id,
            student_id: student.id.clone(),
            title: title.to_string(),
            at,
        };
        self.state
            .lock()
            .expect("engagement state")
            .record(Event::Snapshot(snap.clone()))?;
        Ok(snap)
    }

    /// Score, members, badges and the latest `recent` snapshots of a class.
    pub fn class_view(&self, class_id: &str, recent: usize) -> Result<ClassView, EngagementError> {
        let def = self
            .classes
            .get(class_id)
            .ok_or_else(|| EngagementError::UnknownClass(class_id.to_string()))?;
        let st = self.state.lock().expect("engagement state");
        let members: BTreeSet<&str> = st
            .completions
            .values()
            .filter(|c| c.class_id == class_id)
            .map(|c| c.student_id.as_str())
            .collect();
        let students: Vec<StudentScore> = members
            .into_iter()
            .map(|s| StudentScore {
                id: s.to_string(),
                score: st.student_score(s),
            })
            .collect();
        let mut snaps: Vec<Snapshot> = st
            .snapshots
            .iter()
            .filter(|s| s.class_id == class_id)
            .cloned()
            .collect();
        snaps.sort_by_key(|s| std::cmp::Reverse(s.at));
        snaps.truncate(recent);
        Ok(ClassView {
            id: def.id.clone(),
            name: def.name.clone(),
            school: def.school.clone(),
            score: students.iter().map(|s| s.score).sum(),
            students,
            badges: st.badges.iter().filter(|b| b.class_id == class_id).cloned().collect(),
            recent_snapshots: snaps,
        })
    }
}

fn normalize_week(week: &str) -> Result<String, EngagementError> {
    let bad = || EngagementError::BadWeek(week.to_string());
    let (y, w) = week.split_once("-W").ok_or_else(bad)?;
    let y: i32 = y.parse().map_err(|_| bad())?;
    let w: u32 = w.parse().map_err(|_| bad())?;
    chrono::NaiveDate::from_isoywd_opt(y, w, chrono::Weekday::Mon).ok_or_else(bad)?;
    Ok(format!("{y}-W{w:02}"))
}
