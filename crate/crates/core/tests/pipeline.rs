//! Simulator → ingestion → rules → notifier, through the public API.

use chrono::{DateTime, Duration, TimeZone, Utc};
use chrono_tz::Tz;

use gaia_core::engagement::{ClassDef, Engagement, QuestDef};
use gaia_core::ingest::{IngestError, Reading};
use gaia_core::model::{
    authorize, Action, BuildingMeta, EnergyType, NodeDef, NodeId, NodeKind, ResourceTree, SensorKind, User,
    UserDirectory,
};
use gaia_core::platform::{Platform, PlatformOptions};
use gaia_core::rules::{Category, Rule, RuleId};
use gaia_core::sim::{inject, simulate, RoomProfile, Scenario, ScenarioKind, SimConfig};

const LAB: &str = "site1/building-a/floor2/lab-x";

fn tree() -> ResourceTree {
    let meta = BuildingMeta {
        surface_m2: 900.0,
        energy_types: [EnergyType::Electricity].into(),
        building_type: "primary-school".into(),
        construction_year: 1990,
        occupant_count: 200,
        timezone: "Europe/Athens".into(),
    };
    ResourceTree::build(vec![
        NodeDef::new("site1", NodeKind::Site, "site1", None),
        NodeDef::new("bA", NodeKind::Building, "building-a", Some("site1")).with_meta(meta),
        NodeDef::new("f2", NodeKind::Floor, "floor2", Some("bA")),
        NodeDef::new("labx", NodeKind::Room, "lab-x", Some("f2")),
    ])
    .unwrap()
}

fn users() -> UserDirectory {
    let mut d = UserDirectory::default();
    d.insert(User::manager("mgr", &["bA"]), None);
    d.insert(User::teacher("tch", "c1", &["bA"]), None);
    d.insert(User::student("stu", "c1", &["bA"]), None);
    d
}

fn rule(id: &str, condition: &str, suggestion: &str) -> Rule {
    Rule {
        id: RuleId::new(id),
        name: id.into(),
        target: LAB.into(),
        condition: condition.into(),
        category: Category::Behavioral,
        suggestion_template: suggestion.into(),
        cooldown_s: 3600,
        enabled: true,
    }
}

fn table_rules() -> Vec<Rule> {
    vec![
        rule(
            "turn-off-light",
            "empty(lab-x) AND light(lab-x) is on",
            "Turn-off the light when leaving",
        ),
        rule(
            "standby",
            "empty(lab-x) AND metric(lab-x, power_w) > 150",
            "Do not keep electronic equipment (e.g., TVs, PCs) on standby when not in use",
        ),
    ]
}

fn local(h: u32, m: u32) -> DateTime<Utc> {
    let tz: Tz = "Europe/Athens".parse().unwrap();
    tz.with_ymd_and_hms(2017, 3, 7, h, m, 0).unwrap().with_timezone(&Utc)
}

/// Scenario kind, local start and end (hour, minute), magnitude.
type Window = (ScenarioKind, (u32, u32), (u32, u32), f64);

fn run_day(scenario: Option<Window>) -> Platform {
    let mut cfg = SimConfig::new(
        "site1/building-a",
        vec![RoomProfile::new(LAB)],
        300,
        42,
        "Europe/Athens",
    );
    if let Some((kind, from, to, magnitude)) = scenario {
        let s = Scenario {
            kind,
            room: LAB.into(),
            start: local(from.0, from.1),
            end: local(to.0, to.1),
            magnitude,
        };
        cfg = inject(&cfg, s).unwrap();
    }
    let opts = PlatformOptions {
        initial_rules: table_rules(),
        ..PlatformOptions::default()
    };
    let p = Platform::open(tree(), users(), opts).unwrap();
    let t0 = local(0, 0);
    for r in simulate(&cfg, t0, t0 + Duration::days(1)).unwrap() {
        p.ingest(&r, None, r.timestamp).unwrap();
    }
    p
}

#[test]
fn default_profile_triggers_nothing() {
    let p = run_day(None);
    assert_eq!(p.notifier.len(), 0);
    assert!(p.health().ok);
}

#[test]
fn light_left_on_for_an_hour_fires_once() {
    let p = run_day(Some((ScenarioKind::LightsLeftOn, (17, 0), (18, 0), 0.0)));
    let log = p.notifier.history("", None, 10).unwrap();
    let light: Vec<_> = log.iter().filter(|n| n.rule_id.as_str() == "turn-off-light").collect();
    assert_eq!(light.len(), 1);
    // The lamps also push the room above the standby threshold.
    assert_eq!(log.len(), 2);
    let n = light[0];
    assert_eq!(n.rule_id.as_str(), "turn-off-light");
    assert_eq!(n.suggestion, "Turn-off the light when leaving");
    assert!(n.event_description.contains("light_state@"), "{}", n.event_description);
    assert!(n.event_description.contains("=1"), "{}", n.event_description);
}

#[test]
fn standby_load_above_threshold_fires() {
    let p = run_day(Some((ScenarioKind::StandbyLoad, (20, 0), (21, 0), 200.0)));
    let log = p.notifier.history("", None, 10).unwrap();
    assert_eq!(log.len(), 1, "{log:?}");
    assert_eq!(log[0].rule_id.as_str(), "standby");
    assert!(log[0].suggestion.starts_with("Do not keep electronic equipment"));
}

#[test]
fn role_policy_examples() {
    let t = tree();
    let building = t.get(&NodeId::new("bA")).unwrap();
    let student = User::student("stu", "c1", &["bA"]);
    let teacher = User::teacher("tch", "c1", &["bA"]);
    let manager = User::manager("mgr", &["bA"]);
    assert!(!authorize(&student, Action::InsertBuildingData, &t, building).is_allowed());
    assert!(authorize(&manager, Action::ConfigureFacility, &t, building).is_allowed());
    assert!(authorize(&teacher, Action::InsertReading, &t, building).is_allowed());
}

#[test]
fn student_manual_temperature_is_acknowledged() {
    let p = Platform::open(tree(), users(), PlatformOptions::default()).unwrap();
    let at = local(10, 0);
    let r = Reading::manual(LAB, SensorKind::TemperatureC, at, 22.5);
    let ack = p.ingest(&r, Some("stu"), at).unwrap();
    assert_eq!(ack.seq, 1);
    assert!(matches!(p.ingest(&r, None, at), Err(IngestError::Unauthorized(_))));
    let humid = Reading::manual(LAB, SensorKind::HumidityPct, at, 140.0);
    assert!(matches!(
        p.ingest(&humid, Some("stu"), at),
        Err(IngestError::ValidationFailed(_))
    ));
}

#[test]
fn class_score_is_sum_of_student_points() {
    let quests = [("q1", 10), ("q2", 20), ("q3", 5)]
        .iter()
        .map(|(id, pts)| QuestDef {
            id: id.to_string(),
            points: *pts,
            title: String::new(),
        })
        .collect();
    let classes = vec![ClassDef {
        id: "c1".into(),
        school: NodeId::new("site1"),
        name: String::new(),
    }];
    let e = Engagement::new(quests, classes, Vec::new());
    let at = local(9, 0);
    e.award_points(&User::student("a", "c1", &["bA"]), "q1", at).unwrap();
    e.award_points(&User::student("b", "c1", &["bA"]), "q2", at).unwrap();
    e.award_points(&User::student("c", "c1", &["bA"]), "q3", at).unwrap();
    assert_eq!(e.class_score("c1").unwrap(), 35);
}
