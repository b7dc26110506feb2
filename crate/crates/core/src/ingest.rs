//! Live, participatory and file-based reading intake.
//!
//! Every accepted sample is validated against its kind, bound to a catalogued
//! series and appended to the [`Store`]. Per-series work is serialized, and
//! accepted live readings are handed to an optional [`ReadingSink`] while
//! that series is still locked, so the sink sees each series in append order.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{authorize, Action, Published, ResourceTree, SensorKind, User};
use crate::store::{local_day_start, AppendOutcome, SeriesId, SeriesMeta, Source, Store, StoreError};

/// Upload files must use one of these grids.
pub const UPLOAD_INTERVALS: [u32; 2] = [900, 3600];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    /// Omitted ids are derived from `(resource_path, kind, source)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_id: Option<SeriesId>,
    pub resource_path: String,
    pub kind: SensorKind,
    pub timestamp: DateTime<Utc>,
    pub value: f64,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
}

impl Reading {
    pub fn iot(resource_path: &str, kind: SensorKind, timestamp: DateTime<Utc>, value: f64) -> Self {
        Reading {
            series_id: None,
            resource_path: resource_path.to_string(),
            kind,
            timestamp,
            value,
            source: Source::Iot,
            author: None,
        }
    }

    pub fn manual(resource_path: &str, kind: SensorKind, timestamp: DateTime<Utc>, value: f64) -> Self {
        Reading {
            source: Source::Manual,
            ..Reading::iot(resource_path, kind, timestamp, value)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub series_id: SeriesId,
    pub seq: u64,
    /// False when an identical sample was already stored.
    pub stored: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UploadReport {
    pub series_id: SeriesId,
    pub accepted_count: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("unknown series `{0}`")]
    UnknownSeries(SeriesId),
    #[error("upload contains no data rows")]
    EmptyFile,
    #[error("bad header: expected `timestamp,value`, found `{0}`")]
    BadHeader(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Receives each accepted live reading after it has been appended.
pub trait ReadingSink: Send + Sync {
    fn on_reading(&self, reading: &Reading, ack: &Ack);
}

pub struct Ingestor {
    tree: Arc<Published<ResourceTree>>,
    store: Arc<Store>,
    sink: Option<Arc<dyn ReadingSink>>,
    future_tolerance: Duration,
    series_locks: Mutex<HashMap<SeriesId, Arc<Mutex<()>>>>,
    votes: Mutex<HashSet<(String, String, SensorKind, i64)>>,
}

impl Ingestor {
    pub fn new(tree: Arc<Published<ResourceTree>>, store: Arc<Store>) -> Self {
        Ingestor {
            tree,
            store,
            sink: None,
            future_tolerance: Duration::minutes(5),
            series_locks: Mutex::new(HashMap::new()),
            votes: Mutex::new(HashSet::new()),
        }
    }

    pub fn with_sink(mut self, sink: Arc<dyn ReadingSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    fn series_lock(&self, id: &SeriesId) -> Arc<Mutex<()>> {
        self.series_locks
            .lock()
            .expect("series locks")
            .entry(id.clone())
            .or_default()
            .clone()
    }

    fn check_timestamp(&self, ts: DateTime<Utc>, now: DateTime<Utc>) -> Result<(), String> {
        if ts.nanosecond() != 0 {
            return Err("timestamps carry whole seconds only".into());
        }
        if ts > now + self.future_tolerance {
            return Err(format!("timestamp {ts} is more than 5 minutes in the future"));
        }
        Ok(())
    }

    /// Catalog entry for a reading, registering the series on first use.
    fn bind_series(&self, r: &Reading, path: &str) -> Result<SeriesMeta, IngestError> {
        let id = match &r.series_id {
            Some(id) => id.clone(),
            None => self
                .store
                .lookup(path, r.kind, r.source)
                .unwrap_or_else(|| SeriesId::derive(path, r.kind, r.source)),
        };
        match self.store.meta(&id) {
            Some(meta) if meta.key() == (path.to_string(), r.kind, r.source) => Ok(meta),
            Some(meta) => Err(IngestError::ValidationFailed(format!(
                "series `{id}` carries {} {} ({}), not {path} {} ({})",
                meta.resource_path, meta.kind, meta.source, r.kind, r.source
            ))),
            None => self
                .store
                .register(SeriesMeta::new(id, path, r.kind, r.source))
                .map_err(|e| match e {
                    StoreError::Conflict { reason, .. } => IngestError::ValidationFailed(reason),
                    StoreError::InvalidSeriesId(id) => {
                        IngestError::ValidationFailed(format!("invalid series id `{id}`"))
                    }
                    e => e.into(),
                }),
        }
    }

    /// Validates and appends one live or participatory reading.
    pub fn ingest_reading(&self, r: &Reading, user: Option<&User>, now: DateTime<Utc>) -> Result<Ack, IngestError> {
        r.kind.validate(r.value).map_err(IngestError::ValidationFailed)?;
        self.check_timestamp(r.timestamp, now)
            .map_err(IngestError::ValidationFailed)?;
        let tree = self.tree.load();
        let node = tree
            .resolve_path(&r.resource_path)
            .map_err(|_| IngestError::UnknownResource(r.resource_path.clone()))?;
        let path = tree.canonical_path(node);

        let mut reading = r.clone();
        reading.resource_path = path.clone();
        let mut vote_key = None;
        match r.source {
            Source::Iot => {}
            Source::Manual => {
                let user =
                    user.ok_or_else(|| IngestError::Unauthorized("manual readings need an authenticated user".into()))?;
                if !authorize(user, Action::InsertReading, &tree, node).is_allowed() {
                    return Err(IngestError::Unauthorized(format!(
                        "user `{}` may not submit readings for {path}",
                        user.id
                    )));
                }
                reading.author = Some(user.id.clone());
                if r.kind.is_comfort_vote() {
                    let hour = r.timestamp.timestamp().div_euclid(3600);
                    let key = (user.id.clone(), path.clone(), r.kind, hour);
                    if self.votes.lock().expect("votes").contains(&key) {
                        return Err(IngestError::ValidationFailed(format!(
                            "user `{}` already voted {} for {path} this hour",
                            user.id, r.kind
                        )));
                    }
                    vote_key = Some(key);
                }
            }
            Source::File => {
                return Err(IngestError::ValidationFailed(
                    "file-sourced samples are accepted through uploads only".into(),
                ))
            }
        }

        let meta = self.bind_series(&reading, &path)?;
        reading.series_id = Some(meta.series_id.clone());
        let lock = self.series_lock(&meta.series_id);
        let _guard = lock.lock().expect("series lock");
        if let Some(key) = vote_key {
            // Checked again under the series lock so two racing votes cannot both pass.
            if !self.votes.lock().expect("votes").insert(key) {
                return Err(IngestError::ValidationFailed(
                    "comfort vote already recorded this hour".into(),
                ));
            }
        }
        let appended = self.store.append(&meta.series_id, r.timestamp, r.value)?;
        let ack = Ack {
            series_id: meta.series_id,
            seq: appended.seq,
            stored: appended.outcome != AppendOutcome::Unchanged,
        };
        if ack.stored {
            if let Some(sink) = &self.sink {
                sink.on_reading(&reading, &ack);
            }
        }
        Ok(ack)
    }

    /// Registers a series explicitly (meters, upload targets). This is
    /// facility configuration and therefore manager-only.
    pub fn register_series(&self, meta: SeriesMeta, user: &User) -> Result<SeriesMeta, IngestError> {
        let tree = self.tree.load();
        let node = tree
            .resolve_path(&meta.resource_path)
            .map_err(|_| IngestError::UnknownResource(meta.resource_path.clone()))?;
        if !authorize(user, Action::ConfigureFacility, &tree, node).is_allowed() {
            return Err(IngestError::Unauthorized(format!(
                "user `{}` may not configure series on {}",
                user.id, meta.resource_path
            )));
        }
        let mut meta = meta;
        meta.resource_path = tree.canonical_path(node);
        if let Some(i) = meta.nominal_interval_s {
            if i == 0 {
                return Err(IngestError::ValidationFailed(
                    "nominal interval must be positive".into(),
                ));
            }
        }
        self.store.register(meta).map_err(|e| match e {
            StoreError::Conflict { reason, .. } => IngestError::ValidationFailed(reason),
            StoreError::InvalidSeriesId(id) => IngestError::ValidationFailed(format!("invalid series id `{id}`")),
            e => e.into(),
        })
    }

    /// Stores a manually read cumulative meter total for `date`, stamped at
    /// local midnight of the building's timezone.
    pub fn ingest_manual_monthly(
        &self,
        series: &SeriesId,
        date: NaiveDate,
        cumulative_kwh: f64,
        user: &User,
        now: DateTime<Utc>,
    ) -> Result<Ack, IngestError> {
        let meta = self
            .store
            .meta(series)
            .ok_or_else(|| IngestError::UnknownSeries(series.clone()))?;
        if meta.kind != SensorKind::EnergyKwh || !meta.cumulative {
            return Err(IngestError::ValidationFailed(format!(
                "series `{series}` is not a cumulative energy meter"
            )));
        }
        if !(cumulative_kwh.is_finite() && cumulative_kwh >= 0.0) {
            return Err(IngestError::ValidationFailed(format!(
                "meter reading must be a non-negative number, got {cumulative_kwh}"
            )));
        }
        let tree = self.tree.load();
        let node = tree
            .resolve_path(&meta.resource_path)
            .map_err(|_| IngestError::UnknownResource(meta.resource_path.clone()))?;
        if !authorize(user, Action::InsertReading, &tree, node).is_allowed() {
            return Err(IngestError::Unauthorized(format!(
                "user `{}` may not submit readings for {}",
                user.id, meta.resource_path
            )));
        }
        let tz = tree
            .building_of(node)
            .and_then(|b| b.metadata.as_ref())
            .map(|m| m.tz())
            .unwrap_or(chrono_tz::UTC);
        let ts = local_day_start(tz, date);
        self.check_timestamp(ts, now).map_err(IngestError::ValidationFailed)?;

        let lock = self.series_lock(series);
        let _guard = lock.lock().expect("series lock");
        let previous = self.store.latest_at(series, ts - Duration::seconds(1))?;
        if let Some(p) = previous {
            if cumulative_kwh < p.value {
                log::warn!(
                    "series {series}: meter reading {cumulative_kwh} on {date} is below {} (reset?)",
                    p.value
                );
            }
        }
        let appended = self.store.append(series, ts, cumulative_kwh)?;
        Ok(Ack {
            series_id: series.clone(),
            seq: appended.seq,
            stored: appended.outcome != AppendOutcome::Unchanged,
        })
    }

    /// Imports a `timestamp,value` CSV of interval energy. Each value is the
    /// consumption of the interval ending at its timestamp. Rows are accepted
    /// or rejected individually.
    pub fn ingest_file(
        &self,
        content: &[u8],
        meta: SeriesMeta,
        user: &User,
        now: DateTime<Utc>,
    ) -> Result<UploadReport, IngestError> {
        let interval = match meta.nominal_interval_s {
            Some(i) if UPLOAD_INTERVALS.contains(&i) => i,
            other => {
                return Err(IngestError::ValidationFailed(format!(
                    "upload interval must be 900 or 3600 seconds, got {other:?}"
                )))
            }
        };
        let tree = self.tree.load();
        let node = tree
            .resolve_path(&meta.resource_path)
            .map_err(|_| IngestError::UnknownResource(meta.resource_path.clone()))?;
        if !authorize(user, Action::InsertBuildingData, &tree, node).is_allowed() {
            return Err(IngestError::Unauthorized(format!(
                "user `{}` may not upload building data for {}",
                user.id, meta.resource_path
            )));
        }
        let mut meta = meta;
        meta.source = Source::File;
        meta.resource_path = tree.canonical_path(node);
        drop(tree);

        let rows = parse_upload(content)?;
        let meta = self.store.register(meta).map_err(|e| match e {
            StoreError::Conflict { reason, .. } => IngestError::ValidationFailed(reason),
            StoreError::InvalidSeriesId(id) => IngestError::ValidationFailed(format!("invalid series id `{id}`")),
            e => e.into(),
        })?;
        let id = meta.series_id.clone();

        let lock = self.series_lock(&id);
        let _guard = lock.lock().expect("series lock");
        let mut report = UploadReport {
            series_id: id.clone(),
            accepted_count: 0,
            rejected: Vec::new(),
        };
        let mut seen = HashSet::new();
        for row in rows {
            let verdict = row.fields.and_then(|(ts, value)| {
                if ts.timestamp().rem_euclid(i64::from(interval)) != 0 {
                    return Err("off-grid timestamp".to_string());
                }
                self.check_timestamp(ts, now)?;
                meta.kind.validate(value)?;
                if !seen.insert(ts) {
                    return Err("duplicate timestamp in file".to_string());
                }
                Ok((ts, value))
            });
            match verdict {
                Ok((ts, value)) => {
                    self.store.append(&id, ts, value)?;
                    report.accepted_count += 1;
                }
                Err(reason) => report.rejected.push(RejectedRow { line: row.line, reason }),
            }
        }
        log::info!(
            "upload into {id}: {} accepted, {} rejected",
            report.accepted_count,
            report.rejected.len()
        );
        Ok(report)
    }
}

struct UploadRow {
    line: u64,
    fields: Result<(DateTime<Utc>, f64), String>,
}

fn parse_upload(content: &[u8]) -> Result<Vec<UploadRow>, IngestError> {
    let content = content.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(content);
    if content.iter().all(u8::is_ascii_whitespace) {
        return Err(IngestError::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(content);
    let header = reader
        .headers()
        .map_err(|e| IngestError::BadHeader(e.to_string()))?
        .clone();
    if header.len() != 2 || &header[0] != "timestamp" || &header[1] != "value" {
        return Err(IngestError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let (line, fields) = match record {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                (line, parse_row(&rec))
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                (line, Err(format!("unreadable row: {e}")))
            }
        };
        rows.push(UploadRow { line, fields });
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyFile);
    }
    Ok(rows)
}

fn parse_row(rec: &csv::StringRecord) -> Result<(DateTime<Utc>, f64), String> {
    if rec.len() != 2 {
        return Err(format!("expected 2 columns, found {}", rec.len()));
    }
    let ts = DateTime::parse_from_rfc3339(&rec[0])
        .map_err(|_| format!("bad timestamp `{}`", &rec[0]))?
        .with_timezone(&Utc);
    let value: f64 = rec[1].parse().map_err(|_| format!("bad value `{}`", &rec[1]))?;
    Ok((ts, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeDef, NodeKind};

    struct Recorder(Mutex<Vec<(Reading, u64)>>);

    impl ReadingSink for Recorder {
        fn on_reading(&self, reading: &Reading, ack: &Ack) {
            self.0.lock().unwrap().push((reading.clone(), ack.seq));
        }
    }

    fn setup() -> (Ingestor, Arc<Recorder>) {
        let tree = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "site1", None),
            NodeDef::new("bA", NodeKind::Building, "building-a", Some("s")),
            NodeDef::new("bB", NodeKind::Building, "building-b", Some("s")),
            NodeDef::new("f", NodeKind::Floor, "floor2", Some("bA")),
            NodeDef::new("lx", NodeKind::Room, "lab-x", Some("f")),
            NodeDef::new("m", NodeKind::Meter, "main", Some("bA")),
            NodeDef::new("fb", NodeKind::Floor, "f1", Some("bB")),
            NodeDef::new("rb", NodeKind::Room, "r1", Some("fb")),
        ])
        .unwrap();
        let rec = Arc::new(Recorder(Mutex::new(Vec::new())));
        let ing = Ingestor::new(Arc::new(Published::new(tree)), Arc::new(Store::in_memory())).with_sink(rec.clone());
        (ing, rec)
    }

    fn now() -> DateTime<Utc> {
        "2017-03-01T12:00:00Z".parse().unwrap()
    }

    const LAB: &str = "site1/building-a/floor2/lab-x";

    #[test]
    fn iot_happy_path() {
        let (ing, rec) = setup();
        let t = "2017-03-01T10:00:00Z".parse().unwrap();
        let ack = ing
            .ingest_reading(&Reading::iot(LAB, SensorKind::TemperatureC, t, 21.4), None, now())
            .unwrap();
        assert_eq!(
            ack.series_id.as_str(),
            "site1.building-a.floor2.lab-x.temperature_c.iot"
        );
        let p = ing.store().latest(&ack.series_id).unwrap().unwrap();
        assert_eq!((p.timestamp, p.value), (t, 21.4));
        assert_eq!(rec.0.lock().unwrap().len(), 1);
    }

    #[test]
    fn validation_failures() {
        let (ing, rec) = setup();
        let t = now();
        let err = ing
            .ingest_reading(&Reading::iot(LAB, SensorKind::HumidityPct, t, 140.0), None, now())
            .unwrap_err();
        assert!(matches!(err, IngestError::ValidationFailed(_)));
        let future = now() + Duration::minutes(6);
        assert!(matches!(
            ing.ingest_reading(&Reading::iot(LAB, SensorKind::PowerW, future, 10.0), None, now()),
            Err(IngestError::ValidationFailed(_))
        ));
        let skewed = now() + Duration::minutes(5);
        assert!(ing
            .ingest_reading(&Reading::iot(LAB, SensorKind::PowerW, skewed, 10.0), None, now())
            .is_ok());
        assert!(matches!(
            ing.ingest_reading(&Reading::iot("site1/nowhere", SensorKind::PowerW, t, 1.0), None, now()),
            Err(IngestError::UnknownResource(_))
        ));
        assert_eq!(rec.0.lock().unwrap().len(), 1);
    }

    #[test]
    fn participatory_readings() {
        let (ing, _) = setup();
        let student = User::student("st", "c1", &["bA"]);
        let t = "2017-03-01T10:00:00Z".parse().unwrap();
        let r = Reading::manual(LAB, SensorKind::TemperatureC, t, 22.0);
        let ack = ing.ingest_reading(&r, Some(&student), now()).unwrap();
        assert!(ack.series_id.as_str().ends_with(".manual"));
        assert!(matches!(
            ing.ingest_reading(&r, None, now()),
            Err(IngestError::Unauthorized(_))
        ));
        let outsider = User::student("o", "c9", &["bB"]);
        assert!(matches!(
            ing.ingest_reading(&r, Some(&outsider), now()),
            Err(IngestError::Unauthorized(_))
        ));
    }

    #[test]
    fn comfort_votes_once_per_hour() {
        let (ing, _) = setup();
        let student = User::student("st", "c1", &["bA"]);
        let t: DateTime<Utc> = "2017-03-01T10:05:00Z".parse().unwrap();
        let vote = |ts, v| Reading::manual(LAB, SensorKind::ComfortThermal, ts, v);
        ing.ingest_reading(&vote(t, 4.0), Some(&student), now()).unwrap();
        assert!(ing
            .ingest_reading(&vote(t + Duration::minutes(20), 2.0), Some(&student), now())
            .is_err());
        ing.ingest_reading(&vote(t + Duration::hours(1), 2.0), Some(&student), now())
            .unwrap();
        let other = User::student("st2", "c1", &["bA"]);
        ing.ingest_reading(&vote(t, 5.0), Some(&other), now()).unwrap();
        ing.ingest_reading(
            &Reading::manual(LAB, SensorKind::ComfortLuminosity, t, 3.0),
            Some(&student),
            now(),
        )
        .unwrap();
        assert!(ing.ingest_reading(&vote(t, 6.0), Some(&other), now()).is_err());
    }

    #[test]
    fn identical_retransmission_is_idempotent() {
        let (ing, rec) = setup();
        let t = "2017-03-01T10:00:00Z".parse().unwrap();
        let r = Reading::iot(LAB, SensorKind::PowerW, t, 120.0);
        let a = ing.ingest_reading(&r, None, now()).unwrap();
        let b = ing.ingest_reading(&r, None, now()).unwrap();
        assert_eq!(a.seq, b.seq);
        assert!(!b.stored);
        assert_eq!(ing.store().points(&a.series_id).unwrap().len(), 1);
        assert_eq!(rec.0.lock().unwrap().len(), 1);
    }

    #[test]
    fn series_binding_is_one_to_one() {
        let (ing, _) = setup();
        let t = "2017-03-01T10:00:00Z".parse().unwrap();
        let mut r = Reading::iot(LAB, SensorKind::PowerW, t, 1.0);
        r.series_id = Some("lab-power".into());
        ing.ingest_reading(&r, None, now()).unwrap();
        // Same triple without an id reuses the registered series.
        let plain = Reading::iot(LAB, SensorKind::PowerW, t + Duration::minutes(1), 2.0);
        assert_eq!(
            ing.ingest_reading(&plain, None, now()).unwrap().series_id.as_str(),
            "lab-power"
        );
        let mut wrong = Reading::iot(LAB, SensorKind::TemperatureC, t, 20.0);
        wrong.series_id = Some("lab-power".into());
        assert!(matches!(
            ing.ingest_reading(&wrong, None, now()),
            Err(IngestError::ValidationFailed(_))
        ));
    }

    #[test]
    fn monthly_meter_readings() {
        let (ing, _) = setup();
        let manager = User::manager("m", &["bA"]);
        let teacher = User::teacher("t", "c1", &["bA"]);
        let meta = SeriesMeta::new(
            "main-meter".into(),
            "site1/building-a/main",
            SensorKind::EnergyKwh,
            Source::Manual,
        )
        .cumulative();
        // Setting up the meter is facility configuration.
        assert!(matches!(
            ing.register_series(meta.clone(), &teacher),
            Err(IngestError::Unauthorized(_))
        ));
        let meta = ing.register_series(meta, &manager).unwrap();
        let id = meta.series_id;
        let jan = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
        let feb = NaiveDate::from_ymd_opt(2017, 2, 1).unwrap();
        // Plain readings are open to teachers.
        ing.ingest_manual_monthly(&id, jan, 1000.0, &teacher, now()).unwrap();
        ing.ingest_manual_monthly(&id, feb, 1180.0, &manager, now()).unwrap();
        let pts = ing.store().points(&id).unwrap();
        assert_eq!(pts.iter().map(|p| p.value).collect::<Vec<_>>(), [1000.0, 1180.0]);
        // No building metadata: stamped at UTC midnight.
        assert_eq!(
            pts[0].timestamp,
            "2017-01-01T00:00:00Z".parse::<DateTime<Utc>>().unwrap()
        );
        // Meter resets are stored, not rejected.
        let mar = NaiveDate::from_ymd_opt(2017, 3, 1).unwrap();
        ing.ingest_manual_monthly(&id, mar, 3.0, &teacher, now()).unwrap();
        assert!(ing.ingest_manual_monthly(&id, mar, -1.0, &teacher, now()).is_err());
        assert!(matches!(
            ing.ingest_manual_monthly(&"nope".into(), mar, 1.0, &teacher, now()),
            Err(IngestError::UnknownSeries(_))
        ));
    }

    fn upload_meta() -> SeriesMeta {
        SeriesMeta::new(
            "bA-quarter".into(),
            "site1/building-a/main",
            SensorKind::EnergyKwh,
            Source::File,
        )
        .with_interval(900)
    }

    fn day_csv() -> String {
        let t0: DateTime<Utc> = "2017-01-15T00:00:00Z".parse().unwrap();
        let mut s = String::from("timestamp,value\n");
        for i in 0..96 {
            let ts = t0 + Duration::minutes(15 * i);
            s.push_str(&format!("{},0.25\n", ts.format("%Y-%m-%dT%H:%M:%SZ")));
        }
        s
    }

    #[test]
    fn upload_full_day() {
        let (ing, rec) = setup();
        let manager = User::manager("m", &["bA"]);
        let report = ing
            .ingest_file(day_csv().as_bytes(), upload_meta(), &manager, now())
            .unwrap();
        assert_eq!(report.accepted_count, 96);
        assert!(report.rejected.is_empty());
        assert_eq!(ing.store().points(&report.series_id).unwrap().len(), 96);
        // Historic uploads do not feed the live sink.
        assert!(rec.0.lock().unwrap().is_empty());
    }

    #[test]
    fn upload_rejects_rows_individually() {
        let (ing, _) = setup();
        let manager = User::manager("m", &["bA"]);
        let csv = "timestamp,value\n\
                   2017-01-15T10:00:00Z,0.25\n\
                   2017-01-15T10:07:00Z,0.25\n\
                   2017-01-15T10:15:00Z,abc\n\
                   2017-01-15T10:30:00Z\n\
                   2017-01-15T10:45:00Z,-1\n\
                   2017-01-15T10:00:00Z,0.30\n\
                   yesterday,1\n\
                   2017-01-15T11:00:00Z,0.5\n";
        let report = ing.ingest_file(csv.as_bytes(), upload_meta(), &manager, now()).unwrap();
        assert_eq!(report.accepted_count, 2);
        let lines: Vec<u64> = report.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, [3, 4, 5, 6, 7, 8]);
        assert_eq!(report.rejected[0].reason, "off-grid timestamp");
        assert_eq!(report.accepted_count + report.rejected.len(), 8);
    }

    #[test]
    fn upload_errors() {
        let (ing, _) = setup();
        let manager = User::manager("m", &["bA"]);
        let teacher = User::teacher("t", "c1", &["bA"]);
        assert!(matches!(
            ing.ingest_file(b"timestamp,value\n", upload_meta(), &manager, now()),
            Err(IngestError::EmptyFile)
        ));
        assert!(matches!(
            ing.ingest_file(b"", upload_meta(), &manager, now()),
            Err(IngestError::EmptyFile)
        ));
        assert!(matches!(
            ing.ingest_file(b"time,kwh\n2017-01-15T10:00:00Z,1\n", upload_meta(), &manager, now()),
            Err(IngestError::BadHeader(_))
        ));
        assert!(matches!(
            ing.ingest_file(day_csv().as_bytes(), upload_meta(), &teacher, now()),
            Err(IngestError::Unauthorized(_))
        ));
        let mut meta = upload_meta();
        meta.nominal_interval_s = Some(600);
        assert!(matches!(
            ing.ingest_file(day_csv().as_bytes(), meta, &manager, now()),
            Err(IngestError::ValidationFailed(_))
        ));
    }

    #[test]
    fn hourly_upload_grid() {
        let (ing, _) = setup();
        let manager = User::manager("m", &["bA"]);
        let meta = SeriesMeta::new(
            "bA-hourly".into(),
            "site1/building-a",
            SensorKind::EnergyKwh,
            Source::File,
        )
        .with_interval(3600);
        let csv = "timestamp,value\n2017-01-15T10:00:00Z,3\n2017-01-15T10:15:00Z,3\n";
        let report = ing.ingest_file(csv.as_bytes(), meta, &manager, now()).unwrap();
        assert_eq!(report.accepted_count, 1);
        assert_eq!(report.rejected[0].reason, "off-grid timestamp");
    }
}
