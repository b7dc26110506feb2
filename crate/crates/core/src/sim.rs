//! Deterministic sensor-fleet simulator standing in for the physical
//! gateways. Profiles are synthetic.

use std::f64::consts::PI;
use std::io;

use chrono::{DateTime, Datelike, Timelike, Utc, Weekday};
use chrono_tz::Tz;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::ingest::Reading;
use crate::model::{NodeKind, ResourceTree, SensorKind};
use crate::store::SeriesId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("unknown room `{0}`")]
    UnknownRoom(String),
    #[error("scenario overlaps an existing {0} scenario on the same room")]
    OverlappingScenario(String),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Local hours, `start_hour <= h < end_hour`, Monday to Friday.
    pub start_hour: f64,
    pub end_hour: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            start_hour: 8.0,
            end_hour: 14.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub mean_c: f64,
    /// Half the daily swing; the peak is at 15:00 local.
    pub amplitude_c: f64,
    pub noise_c: f64,
}

impl Default for TemperatureModel {
    fn default() -> Self {
        TemperatureModel {
            mean_c: 20.0,
            amplitude_c: 2.0,
            noise_c: 0.3,
        }
    }
}

fn d_base() -> f64 {
    80.0
}
fn d_extra() -> f64 {
    400.0
}
fn d_light() -> f64 {
    200.0
}
fn d_occupants() -> u32 {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomProfile {
    pub room: String,
    #[serde(default = "d_base")]
    pub base_power_w: f64,
    #[serde(default = "d_extra")]
    pub occupied_extra_w: f64,
    #[serde(default = "d_light")]
    pub lighting_w: f64,
    #[serde(default = "d_occupants")]
    pub occupants: u32,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub temperature: TemperatureModel,
}

impl RoomProfile {
    pub fn new(room: &str) -> Self {
        RoomProfile {
            room: room.trim_matches('/').to_string(),
            base_power_w: d_base(),
            occupied_extra_w: d_extra(),
            lighting_w: d_light(),
            occupants: d_occupants(),
            schedule: Schedule::default(),
            temperature: TemperatureModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Lights stay on in the empty room; magnitude unused.
    LightsLeftOn,
    /// Extra watts drawn while the room is empty.
    StandbyLoad,
    /// Factor applied to the temperature deviation from the mean.
    HeatingSpike,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::LightsLeftOn => "lights_left_on",
            ScenarioKind::StandbyLoad => "standby_load",
            ScenarioKind::HeatingSpike => "heating_spike",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub room: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    #[serde(default)]
    pub magnitude: f64,
}

impl Scenario {
    fn active(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

fn pcg64() -> String {
    "pcg64".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Path of the building whose whole-building meter is simulated.
    pub building: String,
    pub rooms: Vec<RoomProfile>,
    pub interval_s: u32,
    pub seed: u64,
    pub timezone: String,
    /// Name of the noise generator; only `pcg64` (PCG XSL RR 128/64) exists.
    #[serde(default = "pcg64")]
    pub prng: String,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
}

impl SimConfig {
    pub fn new(building: &str, rooms: Vec<RoomProfile>, interval_s: u32, seed: u64, timezone: &str) -> Self {
        SimConfig {
            building: building.trim_matches('/').to_string(),
            rooms,
            interval_s,
            seed,
            timezone: timezone.to_string(),
            prng: pcg64(),
            scenarios: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<Tz, SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.interval_s == 0 {
            return bad("interval_s must be positive".into());
        }
        if self.prng != "pcg64" {
            return bad(format!("unsupported prng `{}`", self.prng));
        }
        if self.rooms.is_empty() {
            return bad("no rooms".into());
        }
        for r in &self.rooms {
            let s = &r.schedule;
            if !(0.0..=24.0).contains(&s.start_hour) || !(0.0..=24.0).contains(&s.end_hour) || s.start_hour > s.end_hour
            {
                return bad(format!(
                    "room {}: schedule hours must satisfy 0 <= start <= end <= 24",
                    r.room
                ));
            }
            if r.base_power_w < 0.0 || r.occupied_extra_w < 0.0 || r.lighting_w < 0.0 {
                return bad(format!("room {}: powers must be non-negative", r.room));
            }
        }
        self.timezone
            .parse::<Tz>()
            .or_else(|_| bad(format!("unknown timezone `{}`", self.timezone)))
    }

    /// Checks that the building and every room exist in `tree`.
    pub fn check_tree(&self, tree: &ResourceTree) -> Result<(), SimError> {
        let b = tree
            .resolve_path(&self.building)
            .map_err(|_| SimError::InvalidConfig(format!("unknown building `{}`", self.building)))?;
        if b.kind != NodeKind::Building {
            return Err(SimError::InvalidConfig(format!(
                "`{}` is not a building",
                self.building
            )));
        }
        for r in &self.rooms {
            let node = tree
                .resolve_path(&r.room)
                .map_err(|_| SimError::UnknownRoom(r.room.clone()))?;
            if node.kind != NodeKind::Room || tree.building_of(node).map(|n| &n.id) != Some(&b.id) {
                return Err(SimError::UnknownRoom(r.room.clone()));
            }
        }
        Ok(())
    }
}

/// Adds a scenario to a copy of `cfg`.
pub fn inject(cfg: &SimConfig, scenario: Scenario) -> Result<SimConfig, SimError> {
    if scenario.start >= scenario.end {
        return Err(SimError::BadRange(format!(
            "scenario {} >= {}",
            scenario.start, scenario.end
        )));
    }
    let room = scenario.room.trim_matches('/').to_string();
    if !cfg.rooms.iter().any(|r| r.room == room) {
        return Err(SimError::UnknownRoom(room));
    }
    if let Some(o) = cfg
        .scenarios
        .iter()
        .find(|s| s.room == room && s.start < scenario.end && scenario.start < s.end)
    {
        return Err(SimError::OverlappingScenario(o.kind.as_str().into()));
    }
    let mut next = cfg.clone();
    next.scenarios.push(Scenario { room, ..scenario });
    Ok(next)
}

fn occupied(profile: &RoomProfile, local: DateTime<Tz>) -> bool {
    if matches!(local.weekday(), Weekday::Sat | Weekday::Sun) {
        return false;
    }
    let h = f64::from(local.hour()) + f64::from(local.minute()) / 60.0 + f64::from(local.second()) / 3600.0;
    profile.schedule.start_hour <= h && h < profile.schedule.end_hour
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Readings for every grid instant in `[t0, t1)`. Per instant and room the
/// order is occupancy, activity, light, power, temperature, humidity, noise;
/// the building power (sum of room powers) closes each instant.
pub fn simulate(cfg: &SimConfig, t0: DateTime<Utc>, t1: DateTime<Utc>) -> Result<Vec<Reading>, SimError> {
    if t0 >= t1 {
        return Err(SimError::BadRange(format!("{t0} >= {t1}")));
    }
    let tz = cfg.validate()?;
    let step = i64::from(cfg.interval_s);
    let first = t0.timestamp().div_euclid(step) * step + if t0.timestamp().rem_euclid(step) == 0 { 0 } else { step };
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut secs = first;
    while secs < t1.timestamp() {
        let t = DateTime::from_timestamp(secs, 0).expect("in range");
        let local = t.with_timezone(&tz);
        let mut building_w = 0.0;
        for p in &cfg.rooms {
            // Draws happen unconditionally so scenarios never shift the
            // noise seen by other rooms or instants.
            let jitter: u32 = rng.random_range(0..=3);
            let activity: u32 = rng.random_range(5..=30);
            let t_noise: f64 = rng.random_range(-1.0..=1.0);
            let h_noise: f64 = rng.random_range(-1.0..=1.0);
            let n_noise: f64 = rng.random_range(0.0..=1.0);

            let here: Vec<&Scenario> = cfg
                .scenarios
                .iter()
                .filter(|s| s.room == p.room && s.active(t))
                .collect();
            let has = |k: ScenarioKind| here.iter().find(|s| s.kind == k);

            let occ = occupied(p, local);
            let occupancy = if occ {
                p.occupants.saturating_sub(jitter).max(1)
            } else {
                0
            };
            let activity = if occ { activity } else { 0 };
            let light = occ || has(ScenarioKind::LightsLeftOn).is_some();
            let mut power =
                p.base_power_w + if occ { p.occupied_extra_w } else { 0.0 } + if light { p.lighting_w } else { 0.0 };
            if let Some(s) = has(ScenarioKind::StandbyLoad) {
                if !occ {
                    power += s.magnitude;
                }
            }
            let power = round2(power);
            let hour = f64::from(local.hour()) + f64::from(local.minute()) / 60.0;
            let m = &p.temperature;
            let mut dev = m.amplitude_c * (2.0 * PI * (hour - 9.0) / 24.0).sin() + m.noise_c * t_noise;
            if let Some(s) = has(ScenarioKind::HeatingSpike) {
                dev *= s.magnitude;
            }
            let temperature = round2((m.mean_c + dev).clamp(-60.0, 100.0));
            let humidity =
                round2((45.0 - 8.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin() + 3.0 * h_noise).clamp(0.0, 100.0));
            let noise = round2(if occ {
                55.0 + 10.0 * n_noise
            } else {
                30.0 + 3.0 * n_noise
            });

            let room = p.room.as_str();
            out.push(Reading::iot(room, SensorKind::OccupancyCount, t, f64::from(occupancy)));
            out.push(Reading::iot(room, SensorKind::ActivityCount, t, f64::from(activity)));
            out.push(Reading::iot(
                room,
                SensorKind::LightState,
                t,
                if light { 1.0 } else { 0.0 },
            ));
            out.push(Reading::iot(room, SensorKind::PowerW, t, power));
            out.push(Reading::iot(room, SensorKind::TemperatureC, t, temperature));
            out.push(Reading::iot(room, SensorKind::HumidityPct, t, humidity));
            out.push(Reading::iot(room, SensorKind::NoiseDb, t, noise));
            building_w += power;
        }
        out.push(Reading::iot(&cfg.building, SensorKind::PowerW, t, building_w));
        secs += step;
    }
    Ok(out)
}

/// Writes `series_id,timestamp,kind,value` rows.
pub fn write_csv<W: io::Write>(readings: &[Reading], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series_id", "timestamp", "kind", "value"])?;
    for r in readings {
        let id = r
            .series_id
            .clone()
            .unwrap_or_else(|| SeriesId::derive(&r.resource_path, r.kind, r.source));
        w.write_record([
            id.as_str(),
            &r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            r.kind.as_str(),
            &r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
