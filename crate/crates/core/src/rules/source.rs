use chrono::{DateTime, Duration, Utc};

use crate::model::SensorKind;
use crate::store::Store;

/// Read access to observed values, keyed by resource path and kind.
pub trait MetricSource: Send + Sync {
    /// Samples with `from <= t <= to` from every series of the pair,
    /// ordered by timestamp.
    fn samples(
        &self,
        path: &str,
        kind: SensorKind,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Vec<(DateTime<Utc>, f64)>;

    /// Most recent sample at or before `at`.
    fn latest(&self, path: &str, kind: SensorKind, at: DateTime<Utc>) -> Option<(DateTime<Utc>, f64)>;

    /// Expected spacing between samples, if declared.
    fn nominal_interval(&self, path: &str, kind: SensorKind) -> Option<u32>;
}

impl MetricSource for Store {
    fn samples(
        &self,
        path: &str,
        kind: SensorKind,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Vec<(DateTime<Utc>, f64)> {
        if to < from {
            return Vec::new();
        }
        let end = to + Duration::seconds(1);
        let mut out: Vec<(DateTime<Utc>, f64)> = self
            .series_for(path, kind)
            .iter()
            .filter_map(|m| self.query_range(&m.series_id, from, end).ok())
            .flatten()
            .map(|p| (p.timestamp, p.value))
            .collect();
        out.sort_by_key(|s| s.0);
        out
    }

    fn latest(&self, path: &str, kind: SensorKind, at: DateTime<Utc>) -> Option<(DateTime<Utc>, f64)> {
        self.series_for(path, kind)
            .iter()
            .filter_map(|m| self.latest_at(&m.series_id, at).ok().flatten())
            .max_by_key(|p| (p.timestamp, p.seq))
            .map(|p| (p.timestamp, p.value))
    }

    fn nominal_interval(&self, path: &str, kind: SensorKind) -> Option<u32> {
        self.series_for(path, kind)
            .iter()
            .filter_map(|m| m.nominal_interval_s)
            .max()
    }
}
