use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use autotaxi::dynamics::AircraftState;
use autotaxi::mpc::cbf_h;
use autotaxi::sim::{compare_policies, run_outcome, Metrics, Outcome, Policy, Scenario};
use serde::Deserialize;

use crate::artifacts::{
    comparison_csv, comparison_json, comparison_text, fmt_num, fresh_dir, read_artifact, write_file, ComparisonRow,
    RunArtifacts, RunStatus, COMPARISON_CSV, COMPARISON_JSON, COMPARISON_TXT, EVENTS_FILE, SCENARIO_FILE,
    SLOTS_FILE, TRAJECTORY_FILE,
};
use crate::error::{CliError, Result};
use crate::file::{load_scenario, parse_scenario_file, scenario_hash, scenario_to_toml, Overrides};

pub const OUT_ENV: &str = "AUTOTAXI_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// `--out`, else `$AUTOTAXI_OUT`, else `runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "scenario".into()
    } else {
        s
    }
}

/// `<name>-<first 12 hex digits of the scenario hash>-seed<seed>`.
pub fn run_dir_name(scenario: &Scenario, hash: &str) -> String {
    format!("{}-{}-seed{}", slug(&scenario.name), &hash[..12], scenario.seed)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub metrics: Metrics,
    pub artifacts: RunArtifacts,
}

impl RunReport {
    pub fn exit_code(&self) -> u8 {
        self.status.exit_code()
    }
}

fn render(scenario: &Scenario, outcome: &Outcome, splines: bool) -> Result<RunArtifacts> {
    let text = scenario_to_toml(scenario)?;
    let hash = scenario_hash(scenario)?;
    Ok(RunArtifacts::render(&text, &hash, outcome, splines))
}

/// Simulates one scenario under its policy and writes a fresh run directory.
pub fn cmd_run(scenario_path: &Path, out_root: &Path, overrides: &Overrides, splines: bool) -> Result<RunReport> {
    let scenario = load_scenario(scenario_path, overrides)?;
    let outcome = run_outcome(&scenario)?;
    let artifacts = render(&scenario, &outcome, splines)?;
    let dir = fresh_dir(out_root, &run_dir_name(&scenario, &scenario_hash(&scenario)?))?;
    artifacts.write_to(&dir)?;
    log::info!("wrote {}", dir.display());
    Ok(RunReport {
        dir,
        status: RunStatus::of(&outcome.log),
        metrics: outcome.metrics,
        artifacts,
    })
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub dir: PathBuf,
    pub rows: Vec<ComparisonRow>,
    pub table: String,
    /// Per policy, in [`Policy::ALL`] order.
    pub runs: Vec<(Policy, RunStatus, RunArtifacts)>,
}

impl CompareReport {
    /// 0 if every policy completed, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        self.runs.iter().map(|(_, s, _)| s.exit_code()).max().unwrap_or(0)
    }
}

/// Artifacts and comparison table of all policies, without touching disk.
pub fn compare_in_memory(scenario: &Scenario) -> Result<(Vec<ComparisonRow>, Vec<(Policy, RunStatus, RunArtifacts)>)> {
    let outcomes = compare_policies(scenario)?;
    let rows = outcomes.iter().map(|o| ComparisonRow::from(&o.metrics)).collect();
    let runs = outcomes
        .iter()
        .map(|o| {
            let s = scenario.with_policy(o.log.policy);
            Ok((o.log.policy, RunStatus::of(&o.log), render(&s, o, false)?))
        })
        .collect::<Result<_>>()?;
    Ok((rows, runs))
}

/// Runs every policy on the same scenario and seed. Each policy gets a
/// subdirectory; the comparison table sits next to them.
pub fn cmd_compare(scenario_path: &Path, out_root: &Path, overrides: &Overrides) -> Result<CompareReport> {
    let scenario = load_scenario(scenario_path, overrides)?.with_policy(Policy::SafeTaxi);
    let (rows, runs) = compare_in_memory(&scenario)?;
    let dir = fresh_dir(
        out_root,
        &format!("{}-compare", run_dir_name(&scenario, &scenario_hash(&scenario)?)),
    )?;
    for (policy, _, artifacts) in &runs {
        artifacts.write_to(&dir.join(policy.as_str()))?;
    }
    let table = comparison_text(&rows);
    write_file(&dir.join(COMPARISON_CSV), &comparison_csv(&rows))?;
    write_file(&dir.join(COMPARISON_JSON), &comparison_json(&rows))?;
    write_file(&dir.join(COMPARISON_TXT), &table)?;
    Ok(CompareReport { dir, rows, table, runs })
}

pub fn cmd_validate(scenario_path: &Path, overrides: &Overrides) -> Result<Scenario> {
    load_scenario(scenario_path, overrides)
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    t: f64,
    id: u32,
    px: f64,
    py: f64,
    theta: f64,
    v: f64,
    min_h: f64,
}

#[derive(Debug, Deserialize)]
struct SlotRow {
    aircraft: u32,
    zone: u32,
    est_in: f64,
    est_out: f64,
    t_in: f64,
    t_out: f64,
}

fn read_table<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>> {
    let text = read_artifact(dir, name)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CliError::Artifact {
            path: dir.join(name),
            reason: e.to_string(),
        })
}

/// Observed zone entry and exit times per (aircraft, zone), first visit only.
fn observed_intervals(dir: &Path) -> Result<BTreeMap<(u32, u32), (Option<f64>, Option<f64>)>> {
    let text = read_artifact(dir, EVENTS_FILE)?;
    let mut out: BTreeMap<(u32, u32), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: serde_json::Value = serde_json::from_str(line).map_err(|err| CliError::Artifact {
            path: dir.join(EVENTS_FILE),
            reason: format!("line {}: {err}", k + 1),
        })?;
        let field = |name: &str| e.get(name).and_then(serde_json::Value::as_f64);
        let (Some(kind), Some(time), Some(aircraft), Some(zone)) =
            (e.get("kind").and_then(|k| k.as_str()), field("time"), field("aircraft"), field("zone"))
        else {
            continue;
        };
        let slot = out.entry((aircraft as u32, zone as u32)).or_default();
        match kind {
            "zone_entry" if slot.0.is_none() => slot.0 = Some(time),
            "zone_exit" if slot.1.is_none() => slot.1 = Some(time),
            _ => {}
        }
    }
    Ok(out)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii table")
}

pub const PLOT_DIR: &str = "plot";
pub const SLOT_GANTT_FILE: &str = "slot_gantt.csv";
pub const XY_TRACKS_FILE: &str = "xy_tracks.csv";
pub const H_OVER_TIME_FILE: &str = "h_over_time.csv";

fn plot_single(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let scenario_text = read_artifact(run_dir, SCENARIO_FILE)?;
    let scenario = parse_scenario_file(&scenario_text, &run_dir.join(SCENARIO_FILE).display().to_string(), &Overrides::default())?
        .to_scenario()?;
    let trajectory: Vec<TrajectoryRow> = read_table(run_dir, TRAJECTORY_FILE)?;
    let slots: Vec<SlotRow> = read_table(run_dir, SLOTS_FILE)?;
    let observed = observed_intervals(run_dir)?;

    let h = |s: &str| s.to_string();
    let gantt_header: Vec<String> = ["aircraft", "zone", "est_in", "est_out", "t_in", "t_out", "actual_in", "actual_out"]
        .map(h)
        .to_vec();
    let gantt: Vec<Vec<String>> = slots
        .iter()
        .map(|s| {
            let (a_in, a_out) = observed.get(&(s.aircraft, s.zone)).copied().unwrap_or_default();
            vec![
                s.aircraft.to_string(),
                s.zone.to_string(),
                fmt_num(s.est_in),
                fmt_num(s.est_out),
                fmt_num(s.t_in),
                fmt_num(s.t_out),
                opt(a_in),
                opt(a_out),
            ]
        })
        .collect();

    let mut by_aircraft: BTreeMap<u32, Vec<&TrajectoryRow>> = BTreeMap::new();
    for r in &trajectory {
        by_aircraft.entry(r.id).or_default().push(r);
    }
    let xy_header: Vec<String> = ["aircraft", "t", "px", "py", "theta", "v"].map(h).to_vec();
    let xy: Vec<Vec<String>> = by_aircraft
        .iter()
        .flat_map(|(id, rows)| {
            rows.iter().map(move |r| {
                vec![
                    id.to_string(),
                    fmt_num(r.t),
                    fmt_num(r.px),
                    fmt_num(r.py),
                    fmt_num(r.theta),
                    fmt_num(r.v),
                ]
            })
        })
        .collect();

    let mut h_header: Vec<String> = ["t", "aircraft", "min_h"].map(h).to_vec();
    h_header.extend((0..scenario.obstacles.len()).map(|j| format!("obstacle_{j}")));
    let h_rows: Vec<Vec<String>> = trajectory
        .iter()
        .map(|r| {
            let x = AircraftState::new(r.px, r.py, r.theta, r.v);
            let mut row = vec![fmt_num(r.t), r.id.to_string(), fmt_num(r.min_h)];
            row.extend(
                scenario
                    .obstacles
                    .iter()
                    .map(|o| opt(o.at(r.t).map(|o| cbf_h(&x, o.position, o.radius, scenario.cbf.d_safe)))),
            );
            row
        })
        .collect();

    let out = run_dir.join(PLOT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let files = [
        (SLOT_GANTT_FILE, table(&gantt_header, &gantt)),
        (XY_TRACKS_FILE, table(&xy_header, &xy)),
        (H_OVER_TIME_FILE, table(&h_header, &h_rows)),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes figure series under `<run>/plot/`. A comparison directory is
/// handled policy by policy.
pub fn cmd_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dir.join(COMPARISON_CSV).is_file() {
        let mut written = Vec::new();
        for p in Policy::ALL {
            written.extend(plot_single(&run_dir.join(p.as_str()))?);
        }
        return Ok(written);
    }
    plot_single(run_dir)
}
