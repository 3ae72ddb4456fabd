//! Run artifacts: delimited tables and JSON documents.
//!
//! Every number is written with 9 significant digits, see [`fmt_num`].

use std::path::{Path, PathBuf};

use autotaxi::sim::{Metrics, Outcome, Policy, SimEvent, SimLog};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCENARIO_FILE: &str = "scenario.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SLOTS_FILE: &str = "slots.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SPLINES_FILE: &str = "splines.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_TXT: &str = "comparison.txt";

pub const TRAJECTORY_HEADER: [&str; 10] = ["t", "id", "px", "py", "theta", "v", "phi", "beta", "min_h", "slack"];

/// C's `%.9g`: nine significant digits, fixed notation for decimal
/// exponents in `-4..9`, otherwise `<mantissa>e<sign><at least two digits>`,
/// trailing zeros removed. Non-finite values are `inf`, `-inf` and `nan`.
/// Zero of either sign is `0`.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        trim_zeros(format!("{:.*}", (8 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Rounds every float in a JSON tree to 9 significant digits.
fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap();
            if let Some(r) = fmt_num(x).parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(value).expect("artifact types serialize");
    round_json(&mut v);
    v
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii table")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Deadlock,
    Timeout,
}

impl RunStatus {
    pub fn of(log: &SimLog) -> Self {
        if log.deadlocked() {
            RunStatus::Deadlock
        } else if log.timed_out() {
            RunStatus::Timeout
        } else {
            RunStatus::Complete
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            RunStatus::Complete => 0,
            RunStatus::Deadlock | RunStatus::Timeout => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub scenario: &'a str,
    pub scenario_hash: &'a str,
    pub seed: u64,
    pub policy: Policy,
    pub status: RunStatus,
    pub steps: usize,
    pub metrics: &'a Metrics,
}

pub fn trajectory_table(log: &SimLog) -> String {
    let rows = log.steps.iter().flat_map(|step| {
        step.aircraft.iter().map(move |r| {
            vec![
                fmt_num(step.time),
                r.id.to_string(),
                fmt_num(r.state.px),
                fmt_num(r.state.py),
                fmt_num(r.state.theta),
                fmt_num(r.state.v),
                fmt_num(r.input.phi),
                fmt_num(r.input.beta),
                fmt_num(r.min_h),
                fmt_num(r.max_slack),
            ]
        })
    });
    csv_text(&TRAJECTORY_HEADER, rows)
}

pub const SLOTS_HEADER: [&str; 6] = ["aircraft", "zone", "est_in", "est_out", "t_in", "t_out"];

pub fn slots_table(outcome: &Outcome) -> String {
    let rows = outcome.plan.slots.iter().map(|s| {
        vec![
            s.aircraft.to_string(),
            s.zone.to_string(),
            fmt_num(s.estimated.t_in),
            fmt_num(s.estimated.t_out),
            fmt_num(s.scheduled.t_in),
            fmt_num(s.scheduled.t_out),
        ]
    });
    csv_text(&SLOTS_HEADER, rows)
}

/// One row per aircraft, segment and axis; `c<i>` multiplies `(t - t_start)^i`.
pub fn splines_table(outcome: &Outcome) -> String {
    let n = outcome.plan.aircraft.iter().map(|a| a.spline.poly_order).max().unwrap_or(0);
    let mut header: Vec<String> = ["aircraft", "segment", "t_start", "t_end", "axis"]
        .into_iter()
        .map(String::from)
        .collect();
    header.extend((0..n).map(|i| format!("c{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for a in &outcome.plan.aircraft {
        let s = &a.spline;
        for seg in 0..s.knots.len() - 1 {
            for (axis, name) in ["x", "y"].into_iter().enumerate() {
                let mut row = vec![
                    a.id.to_string(),
                    seg.to_string(),
                    fmt_num(s.knots[seg]),
                    fmt_num(s.knots[seg + 1]),
                    name.to_string(),
                ];
                let c = &s.coeffs[axis][seg];
                row.extend((0..n).map(|i| fmt_num(c.get(i).copied().unwrap_or(0.0))));
                rows.push(row);
            }
        }
    }
    csv_text(&header, rows)
}

pub fn events_stream(events: &[SimEvent]) -> String {
    events.iter().map(|e| format!("{}\n", to_json(e))).collect()
}

pub fn metrics_document(summary: &RunSummary<'_>) -> String {
    format!("{:#}\n", to_json(summary))
}

/// Everything a run writes, as file name and contents.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub files: Vec<(&'static str, String)>,
}

impl RunArtifacts {
    pub fn render(scenario_toml: &str, hash: &str, outcome: &Outcome, splines: bool) -> Self {
        let log = &outcome.log;
        let summary = RunSummary {
            scenario: &log.scenario,
            scenario_hash: hash,
            seed: log.seed,
            policy: log.policy,
            status: RunStatus::of(log),
            steps: log.steps.len(),
            metrics: &outcome.metrics,
        };
        let mut files = vec![
            (SCENARIO_FILE, scenario_toml.to_string()),
            (TRAJECTORY_FILE, trajectory_table(log)),
            (SLOTS_FILE, slots_table(outcome)),
            (METRICS_FILE, metrics_document(&summary)),
            (EVENTS_FILE, events_stream(&log.events)),
        ];
        if splines {
            files.push((SPLINES_FILE, splines_table(outcome)));
        }
        Self { files }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| *n == name).map(|(_, c)| c.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (name, contents) in &self.files {
            write_file(&dir.join(name), contents)?;
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_artifact(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(CliError::MissingArtifact(path));
    }
    std::fs::read_to_string(&path).map_err(|e| CliError::io(path, e))
}

/// Creates `root/base`, or `root/base.1`, `root/base.2`, ... if taken.
pub fn fresh_dir(root: &Path, base: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    for k in 0.. {
        let name = if k == 0 { base.to_string() } else { format!("{base}.{k}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(dir, e)),
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub comp_time: Option<f64>,
    pub avg_acc_var: f64,
    pub windowed_acc_var: f64,
    pub min_separation: Option<f64>,
    pub min_h: Option<f64>,
    pub max_slack: f64,
    pub safety_violations: usize,
    pub fallbacks: usize,
    pub deadlock: bool,
    pub timed_out: bool,
}

impl From<&Metrics> for ComparisonRow {
    fn from(m: &Metrics) -> Self {
        Self {
            policy: m.policy,
            comp_time: m.comp_time,
            avg_acc_var: m.avg_acc_var,
            windowed_acc_var: m.windowed_acc_var,
            min_separation: m.min_separation,
            min_h: m.min_h,
            max_slack: m.max_slack,
            safety_violations: m.safety_violations,
            fallbacks: m.fallbacks,
            deadlock: m.deadlock,
            timed_out: m.timed_out,
        }
    }
}

pub const COMPARISON_HEADER: [&str; 11] = [
    "policy",
    "comp_time",
    "avg_acc_var",
    "windowed_acc_var",
    "min_separation",
    "min_h",
    "max_slack",
    "safety_violations",
    "fallbacks",
    "deadlock",
    "timed_out",
];

fn opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

impl ComparisonRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.policy.to_string(),
            opt(self.comp_time),
            fmt_num(self.avg_acc_var),
            fmt_num(self.windowed_acc_var),
            opt(self.min_separation),
            opt(self.min_h),
            fmt_num(self.max_slack),
            self.safety_violations.to_string(),
            self.fallbacks.to_string(),
            self.deadlock.to_string(),
            self.timed_out.to_string(),
        ]
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    csv_text(&COMPARISON_HEADER, rows.iter().map(ComparisonRow::cells))
}

pub fn comparison_json(rows: &[ComparisonRow]) -> String {
    format!("{:#}\n", to_json(&rows))
}

/// Aligned plain-text table.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let shown = [
        "policy",
        "comp_time [s]",
        "avg_acc_var",
        "min_separation [m]",
        "max_slack",
        "violations",
        "outcome",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            let outcome = if r.deadlock {
                "deadlock"
            } else if r.timed_out {
                "timeout"
            } else {
                "complete"
            };
            [
                r.policy.to_string(),
                r.comp_time.map_or("-".into(), |t| format!("{t:.1}")),
                format!("{:.4}", r.avg_acc_var),
                r.min_separation.map_or("-".into(), |d| format!("{d:.3}")),
                format!("{:.1e}", r.max_slack),
                r.safety_violations.to_string(),
                outcome.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..shown.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([shown[c].len()]).max().unwrap())
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("{}\n", padded.join("  ").trim_end())
    };
    let mut out = line(&shown.map(String::from));
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for r in &body {
        out.push_str(&line(r));
    }
    out
}
