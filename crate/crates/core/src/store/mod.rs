//! Append-only time-series storage.
//!
//! Each series is a line-delimited log (`seq,unix_seconds,value`) plus an
//! in-memory ordered index rebuilt on open. A catalog log records series
//! metadata. Appends are written to the OS before they are acknowledged; with
//! `sync_on_append` they are also fsynced.

mod aggregate;
mod series;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, TimeZone, Utc};
use chrono_tz::Tz;

pub use aggregate::{aggregate_sorted, bucket_start, local_day_start, Agg, AggregateBucket, CompensatedSum, Timescale};
pub use series::{Point, SeriesId, SeriesMeta, Source};

use crate::model::SensorKind;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown series `{0}`")]
    UnknownSeries(SeriesId),
    #[error("bad range: start {0} is not before end {1}")]
    BadRange(DateTime<Utc>, DateTime<Utc>),
    #[error("invalid series id `{0}`")]
    InvalidSeriesId(String),
    #[error("series `{id}` conflicts with existing catalog entry: {reason}")]
    Conflict { id: SeriesId, reason: String },
    #[error("store corrupt: {file}:{line}: {reason}")]
    Corrupt { file: PathBuf, line: usize, reason: String },
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

/// Whether an append created, replaced, or matched an existing sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Inserted,
    /// Same timestamp, different value: last write wins.
    Replaced,
    /// Identical (timestamp, value) already stored; nothing written.
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appended {
    pub seq: u64,
    pub outcome: AppendOutcome,
}

#[derive(Debug)]
struct SeriesData {
    points: BTreeMap<i64, (f64, u64)>,
    next_seq: u64,
    log: Option<File>,
}

#[derive(Debug, Default)]
struct Catalog {
    by_id: HashMap<SeriesId, SeriesMeta>,
    by_key: HashMap<(String, SensorKind, Source), SeriesId>,
    by_metric: HashMap<(String, SensorKind), Vec<SeriesId>>,
}

impl Catalog {
    fn insert(&mut self, meta: SeriesMeta) {
        self.by_key.insert(meta.key(), meta.series_id.clone());
        self.by_metric
            .entry((meta.resource_path.clone(), meta.kind))
            .or_default()
            .push(meta.series_id.clone());
        self.by_id.insert(meta.series_id.clone(), meta);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct StoreStats {
    pub series: usize,
    pub points: usize,
}

#[derive(Debug)]
pub struct Store {
    dir: Option<PathBuf>,
    sync_on_append: bool,
    catalog: RwLock<Catalog>,
    catalog_log: Mutex<Option<File>>,
    series: RwLock<HashMap<SeriesId, Arc<RwLock<SeriesData>>>>,
}

fn to_ts(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(secs, 0).single().expect("in-range timestamp")
}

impl Store {
    /// Volatile store, used by tests and the simulator.
    pub fn in_memory() -> Self {
        Store {
            dir: None,
            sync_on_append: false,
            catalog: RwLock::new(Catalog::default()),
            catalog_log: Mutex::new(None),
            series: RwLock::new(HashMap::new()),
        }
    }

    /// Opens (or creates) a store rooted at `dir`, replaying every log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(dir, false)
    }

    pub fn open_with(dir: impl AsRef<Path>, sync_on_append: bool) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("series"))?;
        let catalog_path = dir.join("catalog.jsonl");
        let mut catalog = Catalog::default();
        if catalog_path.exists() {
            for (i, line) in read_complete_lines(&catalog_path)?.into_iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let meta: SeriesMeta = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                    file: catalog_path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                catalog.insert(meta);
            }
        }
        let mut series = HashMap::new();
        for id in catalog.by_id.keys() {
            let path = dir.join("series").join(format!("{id}.log"));
            let data = load_series(&path)?;
            series.insert(id.clone(), Arc::new(RwLock::new(data)));
        }
        let catalog_log = OpenOptions::new().create(true).append(true).open(&catalog_path)?;
        Ok(Store {
            dir: Some(dir),
            sync_on_append,
            catalog: RwLock::new(catalog),
            catalog_log: Mutex::new(Some(catalog_log)),
            series: RwLock::new(series),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Adds a series to the catalog. Registering an identical entry again is
    /// a no-op returning the stored meta.
    pub fn register(&self, meta: SeriesMeta) -> Result<SeriesMeta, StoreError> {
        if !meta.series_id.is_valid() {
            return Err(StoreError::InvalidSeriesId(meta.series_id.0));
        }
        let mut catalog = self.catalog.write().expect("catalog lock");
        if let Some(existing) = catalog.by_id.get(&meta.series_id) {
            if existing.key() != meta.key() {
                return Err(StoreError::Conflict {
                    id: meta.series_id,
                    reason: format!(
                        "already bound to {} {} ({})",
                        existing.resource_path, existing.kind, existing.source
                    ),
                });
            }
            return Ok(existing.clone());
        }
        if let Some(other) = catalog.by_key.get(&meta.key()) {
            return Err(StoreError::Conflict {
                id: meta.series_id.clone(),
                reason: format!(
                    "{} {} ({}) is already series `{other}`",
                    meta.resource_path, meta.kind, meta.source
                ),
            });
        }
        let log = match &self.dir {
            Some(dir) => {
                let mut line = serde_json::to_string(&meta).expect("meta serializes");
                line.push('\n');
                let mut guard = self.catalog_log.lock().expect("catalog log lock");
                let f = guard.as_mut().expect("catalog log open");
                f.write_all(line.as_bytes())?;
                if self.sync_on_append {
                    f.sync_data()?;
                }
                let path = dir.join("series").join(format!("{}.log", meta.series_id));
                Some(OpenOptions::new().create(true).append(true).open(path)?)
            }
            None => None,
        };
        self.series.write().expect("series lock").insert(
            meta.series_id.clone(),
            Arc::new(RwLock::new(SeriesData {
                points: BTreeMap::new(),
                next_seq: 1,
                log,
            })),
        );
        catalog.insert(meta.clone());
        Ok(meta)
    }

    pub fn meta(&self, id: &SeriesId) -> Option<SeriesMeta> {
        self.catalog.read().expect("catalog lock").by_id.get(id).cloned()
    }

    pub fn lookup(&self, resource_path: &str, kind: SensorKind, source: Source) -> Option<SeriesId> {
        self.catalog
            .read()
            .expect("catalog lock")
            .by_key
            .get(&(resource_path.to_string(), kind, source))
            .cloned()
    }

    /// Every series carrying `kind` at exactly `resource_path`, any source.
    pub fn series_for(&self, resource_path: &str, kind: SensorKind) -> Vec<SeriesMeta> {
        let catalog = self.catalog.read().expect("catalog lock");
        catalog
            .by_metric
            .get(&(resource_path.to_string(), kind))
            .map(|ids| ids.iter().map(|id| catalog.by_id[id].clone()).collect())
            .unwrap_or_default()
    }

    pub fn all_series(&self) -> Vec<SeriesMeta> {
        let mut v: Vec<_> = self
            .catalog
            .read()
            .expect("catalog lock")
            .by_id
            .values()
            .cloned()
            .collect();
        v.sort_by(|a, b| a.series_id.cmp(&b.series_id));
        v
    }

    fn handle(&self, id: &SeriesId) -> Result<Arc<RwLock<SeriesData>>, StoreError> {
        self.series
            .read()
            .expect("series lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSeries(id.clone()))
    }

    /// Appends a sample. Writes for one series are serialized; the sample is
    /// on disk before this returns.
    pub fn append(&self, id: &SeriesId, timestamp: DateTime<Utc>, value: f64) -> Result<Appended, StoreError> {
        let handle = self.handle(id)?;
        let mut data = handle.write().expect("series data lock");
        let key = timestamp.timestamp();
        let outcome = match data.points.get(&key) {
            Some(&(v, seq)) if v.to_bits() == value.to_bits() => {
                return Ok(Appended {
                    seq,
                    outcome: AppendOutcome::Unchanged,
                })
            }
            Some(_) => AppendOutcome::Replaced,
            None => AppendOutcome::Inserted,
        };
        let seq = data.next_seq;
        if let Some(log) = data.log.as_mut() {
            let line = format!("{seq},{key},{value}\n");
            log.write_all(line.as_bytes())?;
            if self.sync_on_append {
                log.sync_data()?;
            }
        }
        if outcome == AppendOutcome::Replaced {
            log::info!("series {id}: overwriting sample at {timestamp}");
        }
        data.next_seq += 1;
        data.points.insert(key, (value, seq));
        Ok(Appended { seq, outcome })
    }

    /// Most recent sample by timestamp.
    pub fn latest(&self, id: &SeriesId) -> Result<Option<Point>, StoreError> {
        let handle = self.handle(id)?;
        let data = handle.read().expect("series data lock");
        Ok(data.points.iter().next_back().map(|(&t, &(value, seq))| Point {
            timestamp: to_ts(t),
            value,
            seq,
        }))
    }

    /// Latest sample with timestamp ≤ `at`.
    pub fn latest_at(&self, id: &SeriesId, at: DateTime<Utc>) -> Result<Option<Point>, StoreError> {
        let handle = self.handle(id)?;
        let data = handle.read().expect("series data lock");
        Ok(data
            .points
            .range(..=at.timestamp())
            .next_back()
            .map(|(&t, &(value, seq))| Point {
                timestamp: to_ts(t),
                value,
                seq,
            }))
    }

    /// Samples with `t0 ≤ timestamp < t1`, timestamp-sorted.
    pub fn query_range(&self, id: &SeriesId, t0: DateTime<Utc>, t1: DateTime<Utc>) -> Result<Vec<Point>, StoreError> {
        if t0 >= t1 {
            return Err(StoreError::BadRange(t0, t1));
        }
        let handle = self.handle(id)?;
        let data = handle.read().expect("series data lock");
        Ok(data
            .points
            .range(t0.timestamp()..t1.timestamp())
            .map(|(&t, &(value, seq))| Point {
                timestamp: to_ts(t),
                value,
                seq,
            })
            .collect())
    }

    /// Every sample of the series.
    pub fn points(&self, id: &SeriesId) -> Result<Vec<Point>, StoreError> {
        let handle = self.handle(id)?;
        let data = handle.read().expect("series data lock");
        Ok(data
            .points
            .iter()
            .map(|(&t, &(value, seq))| Point {
                timestamp: to_ts(t),
                value,
                seq,
            })
            .collect())
    }

    /// Calendar buckets over `[t0, t1)` aligned in `tz`. The whole
    /// computation runs under one read lock so buckets never mix writes.
    pub fn aggregate(
        &self,
        id: &SeriesId,
        timescale: Timescale,
        agg: Agg,
        t0: DateTime<Utc>,
        t1: DateTime<Utc>,
        tz: Tz,
    ) -> Result<Vec<AggregateBucket>, StoreError> {
        if t0 >= t1 {
            return Err(StoreError::BadRange(t0, t1));
        }
        let handle = self.handle(id)?;
        let data = handle.read().expect("series data lock");
        let samples = data
            .points
            .range(t0.timestamp()..t1.timestamp())
            .map(|(&t, &(v, _))| (to_ts(t), v));
        Ok(aggregate_sorted(samples, timescale, agg, tz))
    }

    pub fn stats(&self) -> StoreStats {
        let series = self.series.read().expect("series lock");
        StoreStats {
            series: series.len(),
            points: series
                .values()
                .map(|s| s.read().expect("series data lock").points.len())
                .sum(),
        }
    }

    /// Flushes every open log to stable storage.
    pub fn flush(&self) -> Result<(), StoreError> {
        for s in self.series.read().expect("series lock").values() {
            if let Some(f) = s.write().expect("series data lock").log.as_mut() {
                f.sync_all()?;
            }
        }
        if let Some(f) = self.catalog_log.lock().expect("catalog log lock").as_mut() {
            f.sync_all()?;
        }
        Ok(())
    }
}

/// Reads all newline-terminated lines. A trailing partial line (torn write)
/// is cut off the file so later appends start on a clean boundary.
fn read_complete_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let mut file = OpenOptions::new().read(true).write(true).open(path)?;
    let mut lines = Vec::new();
    let mut good_len = 0u64;
    {
        let mut reader = BufReader::new(&mut file);
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 {
                break;
            }
            if !buf.ends_with('\n') {
                log::warn!("{}: dropping torn trailing record", path.display());
                break;
            }
            good_len += n as u64;
            lines.push(buf.trim_end_matches(['\n', '\r']).to_string());
        }
    }
    if file.metadata()?.len() != good_len {
        file.set_len(good_len)?;
        file.seek(SeekFrom::End(0))?;
    }
    Ok(lines)
}

fn load_series(path: &Path) -> Result<SeriesData, StoreError> {
    let mut points = BTreeMap::new();
    let mut next_seq = 1;
    if path.exists() {
        for (i, line) in read_complete_lines(path)?.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let corrupt = |reason: &str| StoreError::Corrupt {
                file: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.splitn(3, ',');
            let (Some(seq), Some(ts), Some(value)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(corrupt("expected seq,timestamp,value"));
            };
            let seq: u64 = seq.parse().map_err(|_| corrupt("bad sequence number"))?;
            let ts: i64 = ts.parse().map_err(|_| corrupt("bad timestamp"))?;
            let value: f64 = value.parse().map_err(|_| corrupt("bad value"))?;
            if Utc.timestamp_opt(ts, 0).single().is_none() {
                return Err(corrupt("timestamp out of range"));
            }
            if seq < next_seq {
                return Err(corrupt("sequence numbers not increasing"));
            }
            next_seq = seq + 1;
            points.insert(ts, (value, seq));
        }
    }
    let log = OpenOptions::new().create(true).append(true).open(path)?;
    Ok(SeriesData {
        points,
        next_seq,
        log: Some(log),
    })
}
