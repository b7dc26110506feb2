use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::SensorKind;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeriesId(pub String);

impl SeriesId {
    pub fn new(id: impl Into<String>) -> Self {
        SeriesId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Ids double as file names, so they are limited to a safe alphabet.
    pub fn is_valid(&self) -> bool {
        !self.0.is_empty()
            && self.0.len() <= 200
            && !self.0.starts_with('.')
            && self
                .0
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
    }

    /// Default id for a (resource, kind, source) triple:
    /// `site1/b/f/lab-x` + `power_w` + `iot` → `site1.b.f.lab-x.power_w.iot`.
    pub fn derive(resource_path: &str, kind: SensorKind, source: Source) -> Self {
        let path = resource_path.trim_matches('/').replace('/', ".");
        SeriesId(format!("{path}.{kind}.{source}"))
    }
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SeriesId {
    fn from(s: &str) -> Self {
        SeriesId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Iot,
    Manual,
    File,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Iot => "iot",
            Source::Manual => "manual",
            Source::File => "file",
        })
    }
}

/// Catalog entry for one series. `(resource_path, kind, source)` maps
/// one-to-one onto `series_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub series_id: SeriesId,
    pub resource_path: String,
    pub kind: SensorKind,
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_interval_s: Option<u32>,
    pub source: Source,
    /// Values are running meter totals rather than per-interval amounts.
    #[serde(default)]
    pub cumulative: bool,
}

impl SeriesMeta {
    pub fn new(series_id: SeriesId, resource_path: &str, kind: SensorKind, source: Source) -> Self {
        SeriesMeta {
            series_id,
            resource_path: resource_path.trim_matches('/').to_string(),
            kind,
            unit: kind.unit().to_string(),
            nominal_interval_s: None,
            source,
            cumulative: false,
        }
    }

    pub fn with_interval(mut self, secs: u32) -> Self {
        self.nominal_interval_s = Some(secs);
        self
    }

    pub fn cumulative(mut self) -> Self {
        self.cumulative = true;
        self
    }

    pub fn key(&self) -> (String, SensorKind, Source) {
        (self.resource_path.clone(), self.kind, self.source)
    }
}

/// One stored sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
    pub seq: u64,
}
