#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use chrono_tz::Tz;
use serde_json::json;

use gaia_core::ingest::Reading;
use gaia_core::sim::{inject, simulate, RoomProfile, Scenario, ScenarioKind, SimConfig};
use gaia_service::{load_config, run, ServiceConfig, ServiceHandle};

pub const LAB: &str = "site1/building-a/floor2/lab-x";
pub const BUILDING: &str = "site1/building-a";
pub const MANAGER: &str = "mgr-token";
pub const TEACHER: &str = "teacher-token";
pub const STUDENT: &str = "student-token";

fn write(dir: &Path, name: &str, value: serde_json::Value) {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn building(id: &str, name: &str, surface: f64) -> serde_json::Value {
    json!({
        "id": id, "kind": "building", "name": name, "parent": "site1",
        "metadata": {
            "surface_m2": surface,
            "energy_types": ["electricity"],
            "building_type": "secondary-school",
            "construction_year": 1978,
            "occupant_count": 320,
            "timezone": "Europe/Athens"
        }
    })
}

/// Writes a complete configuration into `dir` and returns its path.
pub fn write_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "tree.json",
        json!([
            {"id": "site1", "kind": "site", "name": "site1"},
            building("bA", "building-a", 1200.0),
            building("bB", "building-b", 1300.0),
            {"id": "f2", "kind": "floor", "name": "floor2", "parent": "bA"},
            {"id": "labx", "kind": "room", "name": "lab-x", "parent": "f2"},
            {"id": "laby", "kind": "room", "name": "lab-y", "parent": "f2"}
        ]),
    );
    write(
        dir,
        "users.json",
        json!([
            {"id": "mgr", "role": "building_manager", "building_ids": ["bA", "bB"], "token": MANAGER},
            {"id": "tch", "role": "teacher", "class_id": "class-a", "building_ids": ["bA"], "token": TEACHER},
            {"id": "stu", "role": "student", "class_id": "class-a", "building_ids": ["bA"], "token": STUDENT}
        ]),
    );
    write(
        dir,
        "rules.json",
        json!([{
            "id": "table-1",
            "name": "Lights on in an empty room",
            "target": LAB,
            "condition": "empty(lab-x) AND light(lab-x) is on",
            "category": "behavioral",
            "suggestion": "Turn-off the light when leaving",
            "cooldown_s": 3600
        }]),
    );
    write(
        dir,
        "engagement.json",
        json!({
            "quests": [{"id": "switch-off", "points": 20, "title": "Switch off unused devices"}],
            "classes": [
                {"id": "class-a", "school": "site1", "name": "A1"},
                {"id": "class-b", "school": "site1", "name": "B1"}
            ]
        }),
    );
    write(
        dir,
        "gaia.json",
        json!({
            "listen": "127.0.0.1:0",
            "data_dir": "data",
            "tree_file": "tree.json",
            "users_file": "users.json",
            "rules_file": "rules.json",
            "engagement_file": "engagement.json",
            "log_level": "warn",
            "sync_on_append": false
        }),
    );
    dir.join("gaia.json")
}

pub fn config(dir: &Path) -> ServiceConfig {
    load_config(&write_config(dir)).unwrap()
}

pub async fn start(dir: &Path) -> ServiceHandle {
    run(config(dir)).await.unwrap()
}

pub fn url(h: &ServiceHandle, path: &str) -> String {
    format!("http://{}{path}", h.addr())
}

pub fn athens(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> DateTime<Utc> {
    let tz: Tz = "Europe/Athens".parse().unwrap();
    tz.with_ymd_and_hms(y, mo, d, h, mi, 0).unwrap().with_timezone(&Utc)
}

pub fn sim_config() -> SimConfig {
    SimConfig::new(BUILDING, vec![RoomProfile::new(LAB)], 300, 11, "Europe/Athens")
}

/// A Monday in which lab-x is left lit from 17:00 to 17:20.
pub fn lights_left_on_day() -> Vec<Reading> {
    let cfg = inject(
        &sim_config(),
        Scenario {
            kind: ScenarioKind::LightsLeftOn,
            room: LAB.into(),
            start: athens(2017, 3, 6, 17, 0),
            end: athens(2017, 3, 6, 17, 20),
            magnitude: 0.0,
        },
    )
    .unwrap();
    let t0 = athens(2017, 3, 6, 0, 0);
    simulate(&cfg, t0, t0 + Duration::days(1)).unwrap()
}
