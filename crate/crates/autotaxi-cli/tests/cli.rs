use std::path::{Path, PathBuf};
use std::process::Command;

use autotaxi::sim::Policy;
use autotaxi_cli::artifacts::{
    COMPARISON_CSV, EVENTS_FILE, METRICS_FILE, SCENARIO_FILE, SLOTS_FILE, TRAJECTORY_FILE, TRAJECTORY_HEADER,
};
use autotaxi_cli::commands::{cmd_compare, cmd_plot_data, cmd_run, H_OVER_TIME_FILE, PLOT_DIR, SLOT_GANTT_FILE};
use autotaxi_cli::file::{load_scenario_file, parse_scenario_file, scenario_hash};
use autotaxi_cli::{load_scenario, scenario_to_toml, CliError, Overrides};
use proptest::prelude::*;
use tempfile::TempDir;

const HEAD_ON: &str = r#"
name = "head-on"
policy = "naive"

[simulation]
max_sim_time = 40.0

[[aircraft]]
id = 1
route = [[-3.0, 0.0], [3.0, 0.0]]

[[aircraft]]
id = 2
route = [[3.0, 0.0], [-3.0, 0.0]]
"#;

const PASSING: &str = r#"
name = "passing"

[[aircraft]]
id = 1
route = [[-3.0, 0.0], [3.0, 0.0]]

[[zones]]
id = 0
center = [0.0, 0.0]
radius = 0.8

[[obstacles]]
position = [0.5, -1.2]
radius = 0.25
velocity = [0.0, 0.12]
spawn_time = 1.0
"#;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn with_set(pairs: &[(&str, &str)]) -> Overrides {
    Overrides {
        set: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        ..Overrides::default()
    }
}

#[test]
fn shipped_scenarios_validate() {
    for name in ["four_way.toml", "single.toml"] {
        let s = load_scenario(&scenarios_dir().join(name), &Overrides::default()).unwrap();
        assert!(!s.aircraft.is_empty());
    }
    let four = load_scenario(&scenarios_dir().join("four_way.toml"), &Overrides::default()).unwrap();
    assert_eq!((four.aircraft.len(), four.obstacles.len(), four.zones.len()), (4, 2, 1));
}

#[test]
fn omitted_dt_defaults_to_a_tenth_of_a_second() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "s.toml", HEAD_ON);
    let s = load_scenario(&path, &Overrides::default()).unwrap();
    assert_eq!(s.dt, 0.1);
    assert_eq!(s.horizon, 15);
    assert_eq!(s.reference.poly_order, 8);
    assert_eq!(s.cbf.gamma, 0.1);
    assert_eq!(s.aircraft[0].params.bounds.phi_max, std::f64::consts::PI / 6.0);
    assert_eq!(s.aircraft[0].params.bounds.beta_max, 1.0);
}

#[test]
fn invalid_files_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "s.toml", PASSING);
    let err = load_scenario(&path, &with_set(&[("zones[0].radius", "-0.5")])).unwrap_err();
    assert!(matches!(&err, CliError::Config(m) if m.contains("zones[0].radius")), "{err}");

    let typo = write(tmp.path(), "typo.toml", &PASSING.replace("spawn_time", "spawn_tme"));
    let err = load_scenario(&typo, &Overrides::default()).unwrap_err().to_string();
    assert!(err.contains("obstacles[0].spawn_tme") && err.contains("line 17"), "{err}");

    let err = load_scenario(&tmp.path().join("absent.toml"), &Overrides::default()).unwrap_err();
    assert!(matches!(err, CliError::Io { .. }), "{err}");
}

#[test]
fn cli_beats_file_beats_default() {
    let tmp = TempDir::new().unwrap();
    let plain = write(tmp.path(), "plain.toml", PASSING);
    let tuned = write(
        tmp.path(),
        "tuned.toml",
        &format!("seed = 3\n{PASSING}\n[solver]\ngamma = 0.3\n"),
    );
    assert_eq!(load_scenario(&plain, &Overrides::default()).unwrap().cbf.gamma, 0.1);
    assert_eq!(load_scenario(&tuned, &Overrides::default()).unwrap().cbf.gamma, 0.3);
    let cli = with_set(&[("solver.gamma", "0.5")]);
    assert_eq!(load_scenario(&tuned, &cli).unwrap().cbf.gamma, 0.5);
    assert_eq!(load_scenario(&plain, &cli).unwrap().cbf.gamma, 0.5);

    let flags = Overrides {
        policy: Some(Policy::WaitAndGo),
        seed: Some(11),
        ..with_set(&[("seed", "5"), ("policy", "naive")])
    };
    let s = load_scenario(&tuned, &flags).unwrap();
    assert_eq!((s.policy, s.seed), (Policy::WaitAndGo, 11));
}

/// Paths to every scalar leaf of a TOML tree, with the value found there.
fn leaves(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&p, child, out);
            }
        }
        toml::Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                leaves(&format!("{prefix}.{i}"), child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn lookup<'a>(v: &'a toml::Value, path: &str) -> &'a toml::Value {
    path.split('.').fold(v, |node, key| match node {
        toml::Value::Table(t) => &t[key],
        toml::Value::Array(a) => &a[key.parse::<usize>().unwrap()],
        _ => panic!("{path}: scalar before the end"),
    })
}

#[test]
fn every_key_can_be_overridden() {
    let path = scenarios_dir().join("four_way.toml");
    let base = load_scenario(&path, &Overrides::default()).unwrap();
    let canonical: toml::Value = toml::from_str(&scenario_to_toml(&base).unwrap()).unwrap();
    let mut all = Vec::new();
    leaves("", &canonical, &mut all);
    assert!(all.len() > 60, "only {} keys", all.len());
    for (key, old) in all {
        let new = match (&old, key.as_str()) {
            (_, "policy") => "\"wait_and_go\"".to_string(),
            (_, "planning.slot_spacing") => "\"exit\"".to_string(),
            (toml::Value::String(s), _) => format!("\"{s}x\""),
            (toml::Value::Integer(i), _) => (i + 1).to_string(),
            (toml::Value::Float(x), _) => format!("{:?}", x + 0.5),
            (other, _) => panic!("{key}: unexpected {other:?}"),
        };
        // Overrides are applied to the file text, so start from the canonical one.
        let file = parse_scenario_file(
            &scenario_to_toml(&base).unwrap(),
            "canonical",
            &with_set(&[(key.as_str(), new.as_str())]),
        )
        .unwrap();
        let back: toml::Value = toml::Value::try_from(&file).unwrap();
        let expected: toml::Value = toml::from_str::<toml::Table>(&format!("v = {new}")).unwrap()["v"].clone();
        assert_eq!(lookup(&back, &key), &expected, "override of {key}");
        assert_ne!(lookup(&back, &key), &old, "{key}");
    }
}

prop_compose! {
    fn arb_file_text()(
        n in 1usize..4,
        xs in prop::collection::vec(-10.0f64..10.0, 12),
        radius in 0.1f64..3.0,
        gamma in 0.01f64..1.0,
        dt in 0.01f64..0.5,
        priorities in prop::collection::vec(0u32..4, 3),
        seed in any::<u32>(),
        obstacle in prop::option::of((-5.0f64..5.0, -5.0f64..5.0, 0.05f64..1.0, 0.0f64..10.0)),
        spacing in prop::bool::ANY,
    ) -> String {
        let mut text = format!(
            "name = \"random\"\nseed = {seed}\n[simulation]\ndt = {dt:?}\n[planning]\nslot_spacing = \"{}\"\n[solver]\ngamma = {gamma:?}\n",
            if spacing { "exit" } else { "entry" }
        );
        for k in 0..n {
            let (a, b) = ([xs[4 * k], xs[4 * k + 1]], [xs[4 * k + 2] + 20.0, xs[4 * k + 3]]);
            text += &format!(
                "[[aircraft]]\nid = {}\npriority = {}\nroute = [[{:?}, {:?}], [{:?}, {:?}]]\n",
                k + 1, priorities[k], a[0], a[1], b[0], b[1]
            );
        }
        text += &format!("[[zones]]\nid = 3\ncenter = [{:?}, 0.5]\nradius = {radius:?}\n", xs[0]);
        if let Some((x, y, r, t)) = obstacle {
            text += &format!("[[obstacles]]\nposition = [{x:?}, {y:?}]\nradius = {r:?}\nspawn_time = {t:?}\n");
        }
        text
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn written_scenarios_load_back_unchanged(text in arb_file_text()) {
        let tmp = TempDir::new().unwrap();
        let source = write(tmp.path(), "s.toml", &text);
        let scenario = load_scenario(&source, &Overrides::default()).unwrap();
        let copy = tmp.path().join("copy.toml");
        autotaxi_cli::write_scenario(&copy, &scenario).unwrap();
        prop_assert_eq!(&load_scenario(&copy, &Overrides::default()).unwrap(), &scenario);
        prop_assert_eq!(scenario_hash(&scenario).unwrap(), {
            let again = load_scenario(&copy, &Overrides::default()).unwrap();
            scenario_hash(&again).unwrap()
        });
    }
}

#[test]
fn run_writes_artifacts_into_a_fresh_directory() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "s.toml", PASSING);
    let out = tmp.path().join("runs");
    let first = cmd_run(&path, &out, &Overrides::default(), true).unwrap();
    assert_eq!(first.exit_code(), 0);
    for name in [SCENARIO_FILE, TRAJECTORY_FILE, SLOTS_FILE, METRICS_FILE, EVENTS_FILE, "splines.csv"] {
        assert!(first.dir.join(name).is_file(), "{name}");
    }
    let trajectory = read(&first.dir.join(TRAJECTORY_FILE));
    assert_eq!(trajectory.lines().next().unwrap(), TRAJECTORY_HEADER.join(","));

    let second = cmd_run(&path, &out, &Overrides::default(), false).unwrap();
    assert_ne!(first.dir, second.dir);
    assert!(second.dir.file_name().unwrap().to_str().unwrap().ends_with(".1"));
    assert_eq!(trajectory, read(&second.dir.join(TRAJECTORY_FILE)));

    let metrics: serde_json::Value = serde_json::from_str(&read(&first.dir.join(METRICS_FILE))).unwrap();
    assert_eq!(metrics["status"], "complete");
    assert_eq!(metrics["policy"], "safe_taxi");

    // The stored scenario reproduces the run.
    let again = cmd_run(&first.dir.join(SCENARIO_FILE), &tmp.path().join("again"), &Overrides::default(), false).unwrap();
    assert_eq!(trajectory, read(&again.dir.join(TRAJECTORY_FILE)));
}

#[test]
fn policy_override_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "s.toml", PASSING);
    let flags = Overrides {
        policy: Some(Policy::Naive),
        ..Overrides::default()
    };
    let report = cmd_run(&path, tmp.path(), &flags, false).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&read(&report.dir.join(METRICS_FILE))).unwrap();
    assert_eq!(metrics["policy"], "naive");
    assert_eq!(metrics["metrics"]["policy"], "naive");
    assert!(read(&report.dir.join(SCENARIO_FILE)).contains("policy = \"naive\""));
}

#[test]
fn binary_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let exe = env!("CARGO_BIN_EXE_autotaxi");
    let head_on = write(tmp.path(), "head_on.toml", HEAD_ON);
    let status = Command::new(exe)
        .args(["run", "--scenario"])
        .arg(&head_on)
        .env("AUTOTAXI_OUT", tmp.path().join("env-root"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    let run_dir = std::fs::read_dir(tmp.path().join("env-root")).unwrap().next().unwrap().unwrap().path();
    assert!(read(&run_dir.join(EVENTS_FILE)).contains("\"kind\":\"deadlock\""));

    let bad = write(tmp.path(), "bad.toml", &HEAD_ON.replace("max_sim_time", "max_time"));
    let status = Command::new(exe).args(["validate", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).contains("simulation.max_time"));

    let status = Command::new(exe)
        .args(["validate", "--scenario"])
        .arg(&head_on)
        .args(["--set", "simulation.dt=0.05"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&status.stdout).contains("dt = 0.05"));
}

#[test]
fn single_aircraft_comparison_has_matching_rows() {
    let tmp = TempDir::new().unwrap();
    let report = cmd_compare(&scenarios_dir().join("single.toml"), tmp.path(), &Overrides::default()).unwrap();
    assert_eq!(report.exit_code(), 0);
    assert_eq!(report.rows.len(), 3);
    let t0 = report.rows[0].comp_time.unwrap();
    for row in &report.rows {
        assert!((row.comp_time.unwrap() - t0).abs() <= 0.011 * t0, "{row:?}");
    }
    let csv = read(&report.dir.join(COMPARISON_CSV));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("policy,comp_time,avg_acc_var,"));
    for p in Policy::ALL {
        assert!(report.dir.join(p.as_str()).join(TRAJECTORY_FILE).is_file());
    }
    let written = cmd_plot_data(&report.dir).unwrap();
    assert_eq!(written.len(), 9);
}

#[test]
fn plot_data_is_consistent_with_the_run() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "s.toml", PASSING);
    let report = cmd_run(&path, tmp.path(), &Overrides::default(), false).unwrap();
    cmd_plot_data(&report.dir).unwrap();
    let plot = report.dir.join(PLOT_DIR);

    let gantt = read(&plot.join(SLOT_GANTT_FILE));
    let mut lines = gantt.lines();
    assert_eq!(lines.next().unwrap(), "aircraft,zone,est_in,est_out,t_in,t_out,actual_in,actual_out");
    assert_eq!(lines.count(), 1);

    let h = read(&plot.join(H_OVER_TIME_FILE));
    let min_h = h
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    let metrics: serde_json::Value = serde_json::from_str(&read(&report.dir.join(METRICS_FILE))).unwrap();
    assert_eq!(min_h, metrics["metrics"]["min_h"].as_f64().unwrap());
    // The per-obstacle column is empty until the obstacle spawns at 1 s.
    assert!(h.lines().nth(1).unwrap().ends_with(','));
    assert!(!h.lines().last().unwrap().ends_with(','));
}

#[test]
fn plot_data_needs_artifacts() {
    let tmp = TempDir::new().unwrap();
    let err = cmd_plot_data(tmp.path()).unwrap_err();
    assert!(matches!(&err, CliError::MissingArtifact(p) if p.ends_with(SCENARIO_FILE)), "{err}");
}

#[test]
fn loaded_file_keeps_unset_optionals_empty() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "s.toml", PASSING);
    let file = load_scenario_file(&path, &Overrides::default()).unwrap();
    assert_eq!(file.planning.start_speed, None);
    assert_eq!(file.aircraft[0].initial_speed, None);
    assert_eq!(file.obstacles[0].spawn_time, 1.0);
}
