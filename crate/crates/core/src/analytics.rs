//! Consumption derivation, historic and peer comparisons, normalization and
//! anomaly detection.

use std::fmt;

use chrono::{DateTime, Datelike, Months, NaiveDate, Timelike, Utc};
use chrono_tz::Tz;
use serde::Serialize;

use crate::model::{BuildingMeta, Nature, NodeId, NodeKind, ResourceNode, ResourceTree, SensorKind};
use crate::store::{local_day_start, CompensatedSum, SeriesId, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("at least two meter readings are needed, got {0}")]
    TooFewPoints(usize),
    #[error("no data for {0}")]
    NoData(String),
    #[error("building `{0}` has no metadata")]
    MissingMetadata(String),
    #[error("not enough history: need {needed_weeks} weeks before {from}")]
    InsufficientHistory { needed_weeks: u32, from: DateTime<Utc> },
    #[error("unknown building `{0}`")]
    UnknownBuilding(String),
    #[error("bad period `{0}`")]
    BadPeriod(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Consumption between two consecutive cumulative meter readings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsumptionInterval {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// None when the meter went backwards over this interval.
    pub consumption: Option<f64>,
    pub reset: bool,
}

/// Differences of a cumulative meter. A negative step is treated as a
/// meter reset: the interval is flagged and its consumption left unknown.
pub fn derive_consumption(readings: &[(DateTime<Utc>, f64)]) -> Result<Vec<ConsumptionInterval>, AnalyticsError> {
    if readings.len() < 2 {
        return Err(AnalyticsError::TooFewPoints(readings.len()));
    }
    let mut sorted = readings.to_vec();
    sorted.sort_by_key(|r| r.0);
    Ok(sorted
        .windows(2)
        .map(|w| {
            let step = w[1].1 - w[0].1;
            let reset = step < 0.0;
            ConsumptionInterval {
                start: w[0].0,
                end: w[1].0,
                consumption: (!reset).then_some(step),
                reset,
            }
        })
        .collect())
}

/// Half-open span `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Period {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
}

impl Period {
    pub fn new(from: DateTime<Utc>, to: DateTime<Utc>) -> Result<Self, AnalyticsError> {
        if from >= to {
            return Err(AnalyticsError::BadPeriod(format!("{from}..{to}")));
        }
        Ok(Period { from, to })
    }

    /// Parses `YYYY`, `YYYY-MM`, `YYYY-MM-DD` or `START/END` (dates, end
    /// exclusive) as local calendar spans in `tz`.
    pub fn parse(text: &str, tz: Tz) -> Result<Self, AnalyticsError> {
        let bad = || AnalyticsError::BadPeriod(text.to_string());
        let (start, end) = match text.split_once('/') {
            Some((a, b)) => (parse_start(a).ok_or_else(bad)?.0, parse_start(b).ok_or_else(bad)?.0),
            None => {
                let (start, unit) = parse_start(text).ok_or_else(bad)?;
                let end = match unit {
                    Unit::Year => start.with_year(start.year() + 1),
                    Unit::Month => start.checked_add_months(Months::new(1)),
                    Unit::Day => start.succ_opt(),
                }
                .ok_or_else(bad)?;
                (start, end)
            }
        };
        Period::new(local_day_start(tz, start), local_day_start(tz, end)).map_err(|_| bad())
    }

    pub fn shifted_year(&self, years: i32) -> Option<Period> {
        let shift = |t: DateTime<Utc>| t.with_year(t.year() + years);
        Some(Period {
            from: shift(self.from)?,
            to: shift(self.to)?,
        })
    }
}

enum Unit {
    Year,
    Month,
    Day,
}

fn parse_start(s: &str) -> Option<(NaiveDate, Unit)> {
    let parts: Vec<&str> = s.trim().split('-').collect();
    let num = |p: &str| p.parse::<u32>().ok();
    match parts.as_slice() {
        [y] => Some((NaiveDate::from_ymd_opt(num(y)? as i32, 1, 1)?, Unit::Year)),
        [y, m] => Some((NaiveDate::from_ymd_opt(num(y)? as i32, num(m)?, 1)?, Unit::Month)),
        [y, m, d] => Some((NaiveDate::from_ymd_opt(num(y)? as i32, num(m)?, num(d)?)?, Unit::Day)),
        _ => None,
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} to {}",
            self.from.format("%Y-%m-%d %H:%M"),
            self.to.format("%Y-%m-%d %H:%M")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Baseline {
    Period(Period),
    Peers { buildings: Vec<NodeId> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonResult {
    pub subject: NodeId,
    pub baseline: Baseline,
    pub metric: String,
    pub subject_value: f64,
    pub baseline_value: f64,
    /// Undefined (None) when the baseline value is zero.
    pub delta_pct: Option<f64>,
    pub comments: String,
}

pub fn delta_pct(subject: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (subject - baseline) / baseline)
}

fn comment(delta: Option<f64>, against: &str) -> String {
    match delta {
        None => format!("no percentage change: {against} is zero"),
        Some(d) if d < 0.0 => format!("{:.1}% less than {against}", -d),
        Some(d) if d > 0.0 => format!("{d:.1}% more than {against}"),
        Some(_) => format!("same as {against}"),
    }
}

fn building<'a>(tree: &'a ResourceTree, id: &NodeId) -> Result<&'a ResourceNode, AnalyticsError> {
    tree.get(id)
        .filter(|n| n.kind == NodeKind::Building)
        .ok_or_else(|| AnalyticsError::UnknownBuilding(id.to_string()))
}

/// Total (energy-like kinds) or mean (levels) of `kind` over `period`, taken
/// from the series attached directly to the building. Cumulative meters
/// contribute the differences between their readings inside the period.
pub fn period_value(
    store: &Store,
    tree: &ResourceTree,
    building_id: &NodeId,
    kind: SensorKind,
    period: &Period,
) -> Result<Option<f64>, AnalyticsError> {
    let node = building(tree, building_id)?;
    let path = tree.canonical_path(node);
    let mut total = CompensatedSum::default();
    let mut count = 0usize;
    for meta in store.series_for(&path, kind) {
        if meta.cumulative {
            let mut readings: Vec<(DateTime<Utc>, f64)> = store
                .query_range(&meta.series_id, period.from, period.to)?
                .into_iter()
                .map(|p| (p.timestamp, p.value))
                .collect();
            // A reading exactly at the end closes the last interval.
            if let Some(p) = store.latest_at(&meta.series_id, period.to)? {
                if p.timestamp == period.to {
                    readings.push((p.timestamp, p.value));
                }
            }
            if let Ok(intervals) = derive_consumption(&readings) {
                for c in intervals.iter().filter_map(|i| i.consumption) {
                    total.add(c);
                    count += 1;
                }
            }
        } else {
            for p in store.query_range(&meta.series_id, period.from, period.to)? {
                total.add(p.value);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(match kind.nature() {
        Nature::Extensive => total.value(),
        Nature::Intensive => total.value() / count as f64,
    }))
}

/// Compares a building with itself over two periods.
pub fn compare_periods(
    store: &Store,
    tree: &ResourceTree,
    building_id: &NodeId,
    kind: SensorKind,
    period: &Period,
    baseline: &Period,
) -> Result<ComparisonResult, AnalyticsError> {
    let subject_value = period_value(store, tree, building_id, kind, period)?
        .ok_or_else(|| AnalyticsError::NoData(format!("{kind} in {period}")))?;
    let baseline_value = period_value(store, tree, building_id, kind, baseline)?
        .ok_or_else(|| AnalyticsError::NoData(format!("{kind} in {baseline}")))?;
    let delta = delta_pct(subject_value, baseline_value);
    let against = if period.shifted_year(-1).as_ref() == Some(baseline) {
        "the same period last year".to_string()
    } else {
        format!("the baseline period ({baseline})")
    };
    Ok(ComparisonResult {
        subject: building_id.clone(),
        baseline: Baseline::Period(*baseline),
        metric: kind.to_string(),
        subject_value,
        baseline_value,
        delta_pct: delta,
        comments: comment(delta, &against),
    })
}

/// Buildings of the same type whose surface lies within ±25% of the
/// subject's surface. The band is relative to the subject, so the relation
/// is not symmetric in general.
pub fn peer_group(tree: &ResourceTree, building_id: &NodeId) -> Result<Vec<NodeId>, AnalyticsError> {
    let subject = building(tree, building_id)?;
    let meta = subject
        .metadata
        .as_ref()
        .ok_or_else(|| AnalyticsError::MissingMetadata(building_id.to_string()))?;
    Ok(tree
        .buildings()
        .filter(|b| b.id != subject.id)
        .filter(|b| b.metadata.as_ref().is_some_and(|m| is_peer(meta, m)))
        .map(|b| b.id.clone())
        .collect())
}

pub fn is_peer(subject: &BuildingMeta, other: &BuildingMeta) -> bool {
    subject.building_type == other.building_type
        && (other.surface_m2 - subject.surface_m2).abs() <= 0.25 * subject.surface_m2
}

pub fn energy_intensity(
    meta: Option<&BuildingMeta>,
    building_id: &NodeId,
    total_kwh: f64,
) -> Result<f64, AnalyticsError> {
    let meta = meta.ok_or_else(|| AnalyticsError::MissingMetadata(building_id.to_string()))?;
    Ok(total_kwh / meta.surface_m2)
}

/// Energy intensity of the subject against the mean intensity of its peers
/// that have energy data in the period.
pub fn compare_with_peers(
    store: &Store,
    tree: &ResourceTree,
    building_id: &NodeId,
    period: &Period,
) -> Result<ComparisonResult, AnalyticsError> {
    let intensity = |id: &NodeId| -> Result<Option<f64>, AnalyticsError> {
        let node = building(tree, id)?;
        match period_value(store, tree, id, SensorKind::EnergyKwh, period)? {
            Some(kwh) => energy_intensity(node.metadata.as_ref(), id, kwh).map(Some),
            None => Ok(None),
        }
    };
    let subject_value =
        intensity(building_id)?.ok_or_else(|| AnalyticsError::NoData(format!("energy_kwh in {period}")))?;
    let mut used = Vec::new();
    let mut sum = CompensatedSum::default();
    for peer in peer_group(tree, building_id)? {
        if let Some(v) = intensity(&peer)? {
            sum.add(v);
            used.push(peer);
        }
    }
    if used.is_empty() {
        return Err(AnalyticsError::NoData(format!("peer energy_kwh in {period}")));
    }
    let baseline_value = sum.value() / used.len() as f64;
    let delta = delta_pct(subject_value, baseline_value);
    let against = format!("the average of {} similar building(s)", used.len());
    Ok(ComparisonResult {
        subject: building_id.clone(),
        baseline: Baseline::Peers { buildings: used },
        metric: "energy_intensity_kwh_m2".into(),
        subject_value,
        baseline_value,
        delta_pct: delta,
        comments: comment(delta, &against),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnomalyParams {
    pub baseline_weeks: u32,
    pub threshold: f64,
    /// Deviation unit used when the baseline has no spread at all.
    pub floor: f64,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        AnomalyParams {
            baseline_weeks: 4,
            threshold: 3.0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Anomaly {
    pub series_id: SeriesId,
    pub timestamp: DateTime<Utc>,
    pub observed: f64,
    pub expected: f64,
    pub score: f64,
    pub direction: Direction,
}

pub const MAD_SCALE: f64 = 1.4826;

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

fn hour_of_week(ts: DateTime<Utc>, tz: Tz) -> u32 {
    let local = ts.with_timezone(&tz);
    local.weekday().num_days_from_monday() * 24 + local.hour()
}

/// Robust z-scores against the same local hour-of-week over the trailing
/// `baseline_weeks`. Points in `[from, to)` are scored; `points` must
/// include the history before `from`.
pub fn detect_anomalies(
    series_id: &SeriesId,
    points: &[(DateTime<Utc>, f64)],
    from: DateTime<Utc>,
    to: DateTime<Utc>,
    tz: Tz,
    params: &AnomalyParams,
) -> Result<Vec<Anomaly>, AnalyticsError> {
    let span = chrono::Duration::weeks(i64::from(params.baseline_weeks));
    let first = points.iter().map(|p| p.0).min();
    if first.is_none_or(|f| f > from - span) {
        return Err(AnalyticsError::InsufficientHistory {
            needed_weeks: params.baseline_weeks,
            from,
        });
    }
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    let keyed: Vec<(DateTime<Utc>, f64, u32)> = sorted.iter().map(|&(t, v)| (t, v, hour_of_week(t, tz))).collect();
    let mut out = Vec::new();
    for &(ts, observed, how) in keyed.iter().filter(|p| p.0 >= from && p.0 < to) {
        let lo = keyed.partition_point(|p| p.0 < ts - span);
        let hi = keyed.partition_point(|p| p.0 < ts);
        let mut base: Vec<f64> = keyed[lo..hi].iter().filter(|p| p.2 == how).map(|p| p.1).collect();
        let Some(expected) = median(&mut base) else {
            continue;
        };
        let mut abs_dev: Vec<f64> = base.iter().map(|v| (v - expected).abs()).collect();
        let scale = MAD_SCALE * median(&mut abs_dev).expect("non-empty baseline");
        let dev = observed - expected;
        let (score, flagged) = if scale > 0.0 {
            let z = dev / scale;
            (z, z.abs() >= params.threshold)
        } else {
            (dev / params.floor, dev.abs() > params.floor * params.threshold)
        };
        if flagged {
            out.push(Anomaly {
                series_id: series_id.clone(),
                timestamp: ts,
                observed,
                expected,
                score,
                direction: if dev > 0.0 { Direction::High } else { Direction::Low },
            });
        }
    }
    Ok(out)
}
