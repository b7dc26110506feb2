use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::model::{Nature, SensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timescale {
    Daily,
    Weekly,
    Monthly,
    Yearly,
}

impl Timescale {
    pub const ALL: [Timescale; 4] = [
        Timescale::Daily,
        Timescale::Weekly,
        Timescale::Monthly,
        Timescale::Yearly,
    ];

    /// First local calendar date of the bucket containing `date`.
    pub fn bucket_date(self, date: NaiveDate) -> NaiveDate {
        match self {
            Timescale::Daily => date,
            Timescale::Weekly => date - Duration::days(i64::from(date.weekday().num_days_from_monday())),
            Timescale::Monthly => date.with_day(1).expect("day 1 exists"),
            Timescale::Yearly => NaiveDate::from_ymd_opt(date.year(), 1, 1).expect("jan 1 exists"),
        }
    }
}

impl fmt::Display for Timescale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timescale::Daily => "daily",
            Timescale::Weekly => "weekly",
            Timescale::Monthly => "monthly",
            Timescale::Yearly => "yearly",
        })
    }
}

impl FromStr for Timescale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timescale::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| format!("unknown timescale `{s}` (daily|weekly|monthly|yearly)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    Sum,
    Mean,
    Min,
    Max,
    Count,
}

impl Agg {
    pub const ALL: [Agg; 5] = [Agg::Sum, Agg::Mean, Agg::Min, Agg::Max, Agg::Count];

    /// Energy-like kinds add up; instantaneous levels average.
    pub fn default_for(kind: SensorKind) -> Agg {
        match kind.nature() {
            Nature::Extensive => Agg::Sum,
            Nature::Intensive => Agg::Mean,
        }
    }
}

impl fmt::Display for Agg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agg::Sum => "sum",
            Agg::Mean => "mean",
            Agg::Min => "min",
            Agg::Max => "max",
            Agg::Count => "count",
        })
    }
}

impl FromStr for Agg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Agg::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown aggregate `{s}` (sum|mean|min|max|count)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateBucket {
    pub bucket_start: DateTime<Utc>,
    pub timescale: Timescale,
    pub agg: Agg,
    pub value: f64,
    pub sample_count: u64,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// UTC instant of local midnight starting `date` in `tz`. When midnight does
/// not exist (a DST jump at 00:00) the first valid local instant is used.
pub fn local_day_start(tz: Tz, date: NaiveDate) -> DateTime<Utc> {
    let midnight = date.and_hms_opt(0, 0, 0).expect("midnight");
    for shift in 0..=4 {
        let local = midnight + Duration::minutes(30 * shift);
        if let Some(t) = tz.from_local_datetime(&local).earliest() {
            return t.with_timezone(&Utc);
        }
    }
    Utc.from_utc_datetime(&midnight)
}

/// Start of the calendar bucket containing `ts`, as seen in `tz`.
pub fn bucket_start(ts: DateTime<Utc>, timescale: Timescale, tz: Tz) -> DateTime<Utc> {
    let local_date = ts.with_timezone(&tz).date_naive();
    local_day_start(tz, timescale.bucket_date(local_date))
}

#[derive(Debug, Default)]
struct Acc {
    sum: CompensatedSum,
    min: f64,
    max: f64,
    count: u64,
}

impl Acc {
    fn push(&mut self, v: f64) {
        if self.count == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.sum.add(v);
        self.count += 1;
    }

    fn finish(&self, agg: Agg) -> f64 {
        match agg {
            Agg::Sum => self.sum.value(),
            Agg::Mean => self.sum.value() / self.count as f64,
            Agg::Min => self.min,
            Agg::Max => self.max,
            Agg::Count => self.count as f64,
        }
    }
}

/// Groups timestamp-sorted samples into calendar buckets. Empty buckets are
/// not emitted.
pub fn aggregate_sorted(
    samples: impl IntoIterator<Item = (DateTime<Utc>, f64)>,
    timescale: Timescale,
    agg: Agg,
    tz: Tz,
) -> Vec<AggregateBucket> {
    let mut out = Vec::new();
    let mut current: Option<(DateTime<Utc>, Acc)> = None;
    for (ts, v) in samples {
        let start = bucket_start(ts, timescale, tz);
        match &mut current {
            Some((s, acc)) if *s == start => acc.push(v),
            _ => {
                if let Some((s, acc)) = current.take() {
                    out.push(emit(s, &acc, timescale, agg));
                }
                let mut acc = Acc::default();
                acc.push(v);
                current = Some((start, acc));
            }
        }
    }
    if let Some((s, acc)) = current {
        out.push(emit(s, &acc, timescale, agg));
    }
    out
}

fn emit(start: DateTime<Utc>, acc: &Acc, timescale: Timescale, agg: Agg) -> AggregateBucket {
    AggregateBucket {
        bucket_start: start,
        timescale,
        agg,
        value: acc.finish(agg),
        sample_count: acc.count,
    }
}
