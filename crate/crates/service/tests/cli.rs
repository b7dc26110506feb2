mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use chrono::Duration;
use serde_json::{json, Value};

use common::*;
use gaia_core::sim::{simulate, write_csv};

fn gaia(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gaia"));
    cmd.args(args)
        .env_remove("GAIA_CONFIG")
        .env_remove("GAIA_TOKEN")
        .env_remove("GAIA_URL");
    cmd
}

async fn output(mut cmd: Command) -> Output {
    tokio::task::spawn_blocking(move || cmd.output().unwrap())
        .await
        .unwrap()
}

fn write_sim_config(dir: &Path) -> String {
    let path = dir.join("sim.json");
    std::fs::write(&path, serde_json::to_string(&sim_config()).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn sim_to_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_sim_config(dir.path());
    let (from, to) = ("2017-03-06T00:00:00Z", "2017-03-07T00:00:00Z");
    let mut files = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.path().join(name);
        let o = gaia(&[
            "sim",
            "--config",
            &cfg,
            "--from",
            from,
            "--to",
            to,
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(std::fs::read(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let t0 = athens(2017, 3, 6, 2, 0);
    let mut expected = Vec::new();
    write_csv(
        &simulate(&sim_config(), t0, t0 + Duration::days(1)).unwrap(),
        &mut expected,
    )
    .unwrap();
    assert_eq!(files[0], expected);
    assert!(files[0].starts_with(b"series_id,timestamp,kind,value\n"));
}

#[test]
fn sim_needs_an_output() {
    let o = gaia(&[
        "sim",
        "--config",
        "x.json",
        "--from",
        "2017-03-06T00:00:00Z",
        "--to",
        "2017-03-07T00:00:00Z",
    ])
    .output()
    .unwrap();
    assert!(!o.status.success());
}

#[test]
fn serve_reports_every_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gaia.json");
    std::fs::write(
        &cfg,
        r#"{"listen":"nowhere","data_dir":"d","tree_file":"missing-tree.json","users_file":"missing-users.json"}"#,
    )
    .unwrap();
    let o = gaia(&["serve"]).env("GAIA_CONFIG", &cfg).output().unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("3 configuration error(s)"), "{err}");
    for needle in ["nowhere", "missing-tree.json", "missing-users.json"] {
        assert!(err.contains(needle), "{err}");
    }
    let o = gaia(&["serve"]).output().unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).contains("GAIA_CONFIG"));
}

#[test]
fn serve_starts_from_environment_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut child = gaia(&["serve"])
        .env("GAIA_CONFIG", &cfg)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let base = line.trim().strip_prefix("gaia listening on ").expect(&line).to_string();
    let health: Value = reqwest::blocking::get(format!("{base}/api/v1/health"))
        .unwrap()
        .json()
        .unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health["ok"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn rules_upload_and_post_against_running_service() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path()).await;
    let base = format!("http://{}", h.addr());
    let remote = |args: &[&str]| {
        let mut c = gaia(args);
        c.args(["--url", &base]).env("GAIA_TOKEN", MANAGER);
        c
    };

    let body = dir.path().join("rule.json");
    std::fs::write(
        &body,
        json!({"name": "Noisy", "condition": "metric(lab-x, noise_db) > 70", "category": "alert", "suggestion": "Quiet please"})
            .to_string(),
    )
    .unwrap();
    let o = output(remote(&[
        "rules",
        "put",
        "--path",
        LAB,
        "--id",
        "noisy",
        "--file",
        body.to_str().unwrap(),
    ]))
    .await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = output(remote(&["rules", "list", "--path", LAB])).await;
    let listed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(listed.as_array().unwrap().len(), 2);
    let o = output(remote(&["rules", "delete", "--path", LAB, "--id", "noisy"])).await;
    assert!(o.status.success());
    let o = output(remote(&["rules", "delete", "--path", LAB, "--id", "noisy"])).await;
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("404"));

    let csv = dir.path().join("day.csv");
    std::fs::write(
        &csv,
        "timestamp,value\n2017-01-15T01:00:00Z,3.5\n2017-01-15T02:00:00Z,4.5\n",
    )
    .unwrap();
    let o = output(remote(&[
        "upload",
        "--series",
        "bA.hourly",
        "--file",
        csv.to_str().unwrap(),
        "--path",
        BUILDING,
        "--interval",
        "3600",
    ]))
    .await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["report"]["accepted_count"], 2);

    let cfg = write_sim_config(dir.path());
    let o = output(gaia(&[
        "sim",
        "--config",
        &cfg,
        "--from",
        "2017-03-06T00:00:00Z",
        "--to",
        "2017-03-06T01:00:00Z",
        "--post",
        &base,
    ]))
    .await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // 12 instants, 7 room kinds plus building power.
    assert_eq!(h.platform().store.stats().points, 2 + 12 * 8);
    h.stop().await.unwrap();
}

#[test]
fn demo_configuration_loads() {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo");
    let cfg = gaia_service::load_config(&demo.join("gaia.json")).unwrap();
    assert_eq!(cfg.initial_rules.len(), 2);
    let sim: gaia_core::sim::SimConfig =
        serde_json::from_str(&std::fs::read_to_string(demo.join("sim.json")).unwrap()).unwrap();
    sim.validate().unwrap();
    sim.check_tree(&cfg.tree).unwrap();
}
