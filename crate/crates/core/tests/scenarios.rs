use std::path::PathBuf;

use twinloop::scenario::{parse_config_str, ApproverMode, ConfigError};
use twinloop::{parse_config, ScenarioConfig};

fn dir() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios"].iter().collect()
}

fn standard_text() -> String {
    std::fs::read_to_string(dir().join("standard.json")).unwrap()
}

fn edit(f: impl FnOnce(&mut serde_json::Value)) -> Result<ScenarioConfig, ConfigError> {
    let mut v: serde_json::Value = serde_json::from_str(&standard_text()).unwrap();
    f(&mut v);
    parse_config_str(&serde_json::to_string_pretty(&v).unwrap())
}

#[test]
fn shipped_scenarios_parse_and_round_trip() {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.to_json(), text, "{} is not in canonical form", path.display());
        assert_eq!(parse_config_str(&cfg.to_json()).unwrap(), cfg);
        names.push(cfg.name);
    }
    names.sort();
    assert_eq!(names, ["human", "lossy", "no-obstacle", "reject-three", "reject-twice", "standard"]);
}

#[test]
fn errors_name_the_field() {
    let cases: [(fn(&mut serde_json::Value), &str); 7] = [
        (|v| v["planner"]["safety_margin"] = (-0.1).into(), "planner.safety_margin"),
        (|v| v["home"][2] = 9.0.into(), "home[2]"),
        (|v| v["links"]["uplink"]["drop_rate"] = 1.5.into(), "links.uplink"),
        (|v| v["scene"]["obstacles"][0]["box"]["half_extents"][1] = 0.0.into(), "scene.obstacles[0].box"),
        (|v| v["sensor"]["frame_period_ms"] = 0.0.into(), "sensor.frame_period_ms"),
        (|v| v["approver"]["mode"] = "maybe".into(), "approver.mode"),
        (|v| v["twin"]["rejection"]["margin_growth"] = 0.5.into(), "twin.rejection.margin_growth"),
    ];
    for (f, path) in cases {
        let err = edit(f).unwrap_err();
        assert_eq!(err.path(), Some(path), "{err}");
        assert!(err.to_string().starts_with(path), "{err}");
    }
}

#[test]
fn misspelled_key_is_rejected() {
    let err = edit(|v| {
        let p = v["planner"].as_object_mut().unwrap();
        let m = p.remove("safety_margin").unwrap();
        p.insert("safty_margin".into(), m);
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("safty_margin"), "{msg}");
    assert!(err.path().unwrap().starts_with("planner"), "{msg}");
}

#[test]
fn syntax_errors_carry_a_line() {
    let text = standard_text().replacen("\"seed\": 7,", "\"seed\": 7", 1);
    match parse_config_str(&text).unwrap_err() {
        ConfigError::Invalid { line: Some(l), .. } => assert!(l >= 3),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config(&dir().join("missing.json")), Err(ConfigError::Io { .. })));
}

#[test]
fn defaults_apply_when_omitted() {
    let cfg = edit(|v| {
        v["links"]["uplink"].as_object_mut().unwrap().remove("drop_rate");
        v["approver"].as_object_mut().unwrap().remove("operator_id");
        v.as_object_mut().unwrap().remove("gripper");
    })
    .unwrap();
    assert_eq!(cfg.links.uplink.drop_rate, 0.0);
    assert_eq!(cfg.approver.operator_id, "auto-approver");
    assert_eq!(cfg.approver.mode, ApproverMode::AutoApprove);
    assert_eq!(cfg.gripper.open, 0.08);
}
