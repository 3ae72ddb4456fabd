//! TOML scenario files.
//!
//! Every key except `aircraft[].id` and `aircraft[].route` has a default, so a
//! minimal file lists routes only. Unknown keys are rejected with their path.

use std::fmt::Write as _;
use std::path::Path;

use autotaxi::conflict::{AircraftId, ConflictZone, SlotSpacing};
use autotaxi::dynamics::{AircraftParams, InputBounds, Obstacle, Point, SpeedLimits};
use autotaxi::mpc::{CbfParams, MpcWeights, SqpOptions};
use autotaxi::sim::{AircraftSpec, ObstacleSpec, Policy, Scenario};
use autotaxi::trajectory::ReferenceOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub planning: PlanningSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub aircraft: Vec<AircraftEntry>,
    #[serde(default)]
    pub zones: Vec<ConflictZone>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleEntry>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_policy() -> Policy {
    Policy::SafeTaxi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub dt: f64,
    pub max_sim_time: f64,
    pub deadlock_window: f64,
    pub sensing_range: f64,
    /// Wait-and-go queue distance before the stop line.
    pub queue_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningSection {
    pub dt_safe: f64,
    pub slot_spacing: SlotSpacing,
    pub poly_order: usize,
    pub derivative: usize,
    pub merge_distance: f64,
    /// `0` keeps stretches between waypoints whole.
    pub max_segment_length: f64,
    pub timing_acceleration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub horizon: usize,
    pub gamma: f64,
    pub d_safe: f64,
    /// Diagonal of the state weight.
    pub q: [f64; 4],
    /// Diagonal of the input-change weight.
    pub r: [f64; 2],
    pub p_term: [f64; 4],
    pub max_iters: usize,
    pub step_tol: f64,
    pub slack_penalty: f64,
    pub slack_linear_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AircraftEntry {
    pub id: u32,
    pub route: Vec<Point>,
    /// Defaults to the operating speed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_speed: Option<f64>,
    #[serde(default = "defaults::length")]
    pub length: f64,
    #[serde(default = "defaults::phi_max")]
    pub phi_max: f64,
    #[serde(default = "defaults::beta_max")]
    pub beta_max: f64,
    #[serde(default = "defaults::v_min")]
    pub v_min: f64,
    #[serde(default = "defaults::v_max")]
    pub v_max: f64,
    #[serde(default = "defaults::operating_speed")]
    pub operating_speed: f64,
    /// Smaller is more important.
    #[serde(default)]
    pub priority: u32,
    #[serde(default = "defaults::goal_tolerance")]
    pub goal_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleEntry {
    pub position: Point,
    pub radius: f64,
    #[serde(default)]
    pub velocity: Point,
    #[serde(default)]
    pub spawn_time: f64,
}

mod defaults {
    use super::AircraftParams;

    fn p() -> AircraftParams {
        AircraftParams::default()
    }
    pub fn length() -> f64 {
        p().length
    }
    pub fn phi_max() -> f64 {
        p().bounds.phi_max
    }
    pub fn beta_max() -> f64 {
        p().bounds.beta_max
    }
    pub fn v_min() -> f64 {
        p().speed_limits.min
    }
    pub fn v_max() -> f64 {
        p().speed_limits.max
    }
    pub fn operating_speed() -> f64 {
        p().operating_speed
    }
    pub fn goal_tolerance() -> f64 {
        p().goal_tolerance
    }
}

fn base() -> Scenario {
    Scenario::new("", Vec::new(), Vec::new())
}

impl Default for SimulationSection {
    fn default() -> Self {
        let s = base();
        Self {
            dt: s.dt,
            max_sim_time: s.max_sim_time,
            deadlock_window: s.deadlock_window,
            sensing_range: s.sensing_range,
            queue_distance: s.queue_distance,
        }
    }
}

impl Default for PlanningSection {
    fn default() -> Self {
        let s = base();
        Self {
            dt_safe: s.dt_safe,
            slot_spacing: s.slot_spacing,
            poly_order: s.reference.poly_order,
            derivative: s.reference.derivative,
            merge_distance: s.reference.merge_distance,
            max_segment_length: s.reference.max_segment_length.unwrap_or(0.0),
            timing_acceleration: s.reference.timing_acceleration,
            start_speed: s.reference.start_speed,
            end_speed: s.reference.end_speed,
        }
    }
}

fn diagonal<const N: usize>(m: impl Fn(usize, usize) -> f64) -> [f64; N] {
    std::array::from_fn(|i| m(i, i))
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = base();
        Self {
            horizon: s.horizon,
            gamma: s.cbf.gamma,
            d_safe: s.cbf.d_safe,
            q: diagonal(|i, j| s.weights.q[(i, j)]),
            r: diagonal(|i, j| s.weights.r[(i, j)]),
            p_term: diagonal(|i, j| s.weights.p_term[(i, j)]),
            max_iters: s.sqp.max_iters,
            step_tol: s.sqp.step_tol,
            slack_penalty: s.sqp.slack_penalty,
            slack_linear_penalty: s.sqp.slack_linear_penalty,
        }
    }
}

fn invalid(path: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {reason}"))
}

fn positive(path: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("{x} must be positive")))
    }
}

fn finite_point(path: &str, p: Point) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(invalid(path, format!("{p:?} is not finite")))
    }
}

impl ScenarioFile {
    /// Checks that need a key path in the diagnostic. Everything else is
    /// left to [`Scenario::validate`].
    pub fn check(&self) -> Result<()> {
        if self.aircraft.is_empty() {
            return Err(invalid("aircraft", "at least one aircraft is required"));
        }
        for (i, a) in self.aircraft.iter().enumerate() {
            if a.route.len() < 2 {
                return Err(invalid(
                    &format!("aircraft[{i}].route"),
                    format!("need at least 2 waypoints, got {}", a.route.len()),
                ));
            }
            for (k, p) in a.route.iter().enumerate() {
                finite_point(&format!("aircraft[{i}].route[{k}]"), *p)?;
            }
            positive(&format!("aircraft[{i}].length"), a.length)?;
            positive(&format!("aircraft[{i}].phi_max"), a.phi_max)?;
            positive(&format!("aircraft[{i}].beta_max"), a.beta_max)?;
            positive(&format!("aircraft[{i}].operating_speed"), a.operating_speed)?;
            positive(&format!("aircraft[{i}].goal_tolerance"), a.goal_tolerance)?;
        }
        for (i, z) in self.zones.iter().enumerate() {
            positive(&format!("zones[{i}].radius"), z.radius)?;
            finite_point(&format!("zones[{i}].center"), z.center)?;
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            positive(&format!("obstacles[{i}].radius"), o.radius)?;
            finite_point(&format!("obstacles[{i}].position"), o.position)?;
            finite_point(&format!("obstacles[{i}].velocity"), o.velocity)?;
            if !(o.spawn_time >= 0.0) {
                return Err(invalid(&format!("obstacles[{i}].spawn_time"), "must be nonnegative"));
            }
        }
        positive("simulation.dt", self.simulation.dt)?;
        positive("planning.dt_safe", self.planning.dt_safe)?;
        if self.planning.max_segment_length < 0.0 {
            return Err(invalid("planning.max_segment_length", "must be nonnegative"));
        }
        if self.solver.horizon == 0 {
            return Err(invalid("solver.horizon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        self.check()?;
        let aircraft = self
            .aircraft
            .iter()
            .map(|a| AircraftSpec {
                id: AircraftId(a.id),
                params: AircraftParams {
                    length: a.length,
                    bounds: InputBounds {
                        phi_max: a.phi_max,
                        beta_max: a.beta_max,
                    },
                    speed_limits: SpeedLimits {
                        min: a.v_min,
                        max: a.v_max,
                    },
                    operating_speed: a.operating_speed,
                    priority: a.priority,
                    goal_tolerance: a.goal_tolerance,
                },
                route: a.route.clone(),
                initial_speed: a.initial_speed.unwrap_or(a.operating_speed),
            })
            .collect();
        let mut s = Scenario::new(self.name.clone(), aircraft, self.zones.clone());
        s.obstacles = self
            .obstacles
            .iter()
            .map(|o| ObstacleSpec {
                obstacle: Obstacle {
                    position: o.position,
                    radius: o.radius,
                    velocity: o.velocity,
                },
                spawn_time: o.spawn_time,
            })
            .collect();
        let sim = &self.simulation;
        s.dt = sim.dt;
        s.max_sim_time = sim.max_sim_time;
        s.deadlock_window = sim.deadlock_window;
        s.sensing_range = sim.sensing_range;
        s.queue_distance = sim.queue_distance;
        let plan = &self.planning;
        s.dt_safe = plan.dt_safe;
        s.slot_spacing = plan.slot_spacing;
        s.reference = ReferenceOptions {
            poly_order: plan.poly_order,
            derivative: plan.derivative,
            start_speed: plan.start_speed,
            end_speed: plan.end_speed,
            merge_distance: plan.merge_distance,
            max_segment_length: (plan.max_segment_length > 0.0).then_some(plan.max_segment_length),
            timing_acceleration: plan.timing_acceleration,
        };
        let sol = &self.solver;
        s.horizon = sol.horizon;
        s.weights = MpcWeights::from_diagonals(sol.q, sol.r, sol.p_term);
        s.cbf = CbfParams {
            gamma: sol.gamma,
            d_safe: sol.d_safe,
        };
        s.sqp = SqpOptions {
            max_iters: sol.max_iters,
            step_tol: sol.step_tol,
            slack_penalty: sol.slack_penalty,
            slack_linear_penalty: sol.slack_linear_penalty,
        };
        s.seed = self.seed;
        s.policy = self.policy;
        s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(s)
    }

    /// Fails if the scenario uses weights the file cannot express
    /// (off-diagonal entries).
    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        let w = &s.weights;
        let off_diagonal = |m: &[f64], n: usize| (0..n * n).any(|k| k % (n + 1) != 0 && m[k] != 0.0);
        if off_diagonal(w.q.as_slice(), 4) || off_diagonal(w.r.as_slice(), 2) || off_diagonal(w.p_term.as_slice(), 4)
        {
            return Err(CliError::Config("scenario files only hold diagonal weights".into()));
        }
        Ok(Self {
            name: s.name.clone(),
            policy: s.policy,
            seed: s.seed,
            simulation: SimulationSection {
                dt: s.dt,
                max_sim_time: s.max_sim_time,
                deadlock_window: s.deadlock_window,
                sensing_range: s.sensing_range,
                queue_distance: s.queue_distance,
            },
            planning: PlanningSection {
                dt_safe: s.dt_safe,
                slot_spacing: s.slot_spacing,
                poly_order: s.reference.poly_order,
                derivative: s.reference.derivative,
                merge_distance: s.reference.merge_distance,
                max_segment_length: s.reference.max_segment_length.unwrap_or(0.0),
                timing_acceleration: s.reference.timing_acceleration,
                start_speed: s.reference.start_speed,
                end_speed: s.reference.end_speed,
            },
            solver: SolverSection {
                horizon: s.horizon,
                gamma: s.cbf.gamma,
                d_safe: s.cbf.d_safe,
                q: diagonal(|i, j| w.q[(i, j)]),
                r: diagonal(|i, j| w.r[(i, j)]),
                p_term: diagonal(|i, j| w.p_term[(i, j)]),
                max_iters: s.sqp.max_iters,
                step_tol: s.sqp.step_tol,
                slack_penalty: s.sqp.slack_penalty,
                slack_linear_penalty: s.sqp.slack_linear_penalty,
            },
            aircraft: s
                .aircraft
                .iter()
                .map(|a| AircraftEntry {
                    id: a.id.0,
                    route: a.route.clone(),
                    initial_speed: Some(a.initial_speed),
                    length: a.params.length,
                    phi_max: a.params.bounds.phi_max,
                    beta_max: a.params.bounds.beta_max,
                    v_min: a.params.speed_limits.min,
                    v_max: a.params.speed_limits.max,
                    operating_speed: a.params.operating_speed,
                    priority: a.params.priority,
                    goal_tolerance: a.params.goal_tolerance,
                })
                .collect(),
            zones: s.zones.clone(),
            obstacles: s
                .obstacles
                .iter()
                .map(|o| ObstacleEntry {
                    position: o.obstacle.position,
                    radius: o.obstacle.radius,
                    velocity: o.obstacle.velocity,
                    spawn_time: o.spawn_time,
                })
                .collect(),
        })
    }
}

/// Command-line changes applied on top of a scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// `(dotted.path, value)` pairs, applied in order.
    pub set: Vec<(String, String)>,
    pub policy: Option<Policy>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.set.is_empty() && self.policy.is_none() && self.seed.is_none()
    }

    /// Parses `key=value`.
    pub fn push_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {assignment:?}: expected key=value")))?;
        self.set.push((key.trim().to_string(), value.trim().to_string()));
        Ok(())
    }
}

/// `aircraft[2].route` and `aircraft.2.route` both split to
/// `["aircraft", "2", "route"]`.
fn split_path(path: &str) -> Vec<String> {
    path.replace('[', ".")
        .replace(']', "")
        .split('.')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_in(node: &mut toml::Value, keys: &[String], value: toml::Value, path: &str) -> Result<()> {
    let bad = |reason: String| CliError::Config(format!("--set {path}: {reason}"));
    let Some((key, rest)) = keys.split_first() else {
        *node = value;
        return Ok(());
    };
    let child = match node {
        toml::Value::Table(t) => t
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new())),
        toml::Value::Array(items) => {
            let len = items.len();
            let index: usize = key.parse().map_err(|_| bad(format!("{key:?} is not an array index")))?;
            items
                .get_mut(index)
                .ok_or_else(|| bad(format!("index {index} out of range (length {len})")))?
        }
        _ => return Err(bad(format!("cannot descend into a scalar at {key:?}"))),
    };
    set_in(child, rest, value, path)
}

fn set_path(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys = split_path(path);
    if keys.is_empty() {
        return Err(CliError::Config(format!("--set: empty key in {path:?}")));
    }
    let mut root = toml::Value::Table(std::mem::take(doc));
    let result = set_in(&mut root, &keys, value, path);
    if let toml::Value::Table(t) = root {
        *doc = t;
    }
    result
}

fn apply_overrides(doc: &mut toml::Table, overrides: &Overrides) -> Result<()> {
    for (key, value) in &overrides.set {
        set_path(doc, key, parse_value(value))?;
    }
    if let Some(p) = overrides.policy {
        doc.insert("policy".into(), toml::Value::String(p.as_str().into()));
    }
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("--seed {seed} is too large")))?;
        doc.insert("seed".into(), toml::Value::Integer(seed));
    }
    Ok(())
}

fn deserialize(text: &str, origin: &str) -> Result<ScenarioFile> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(format!("{origin}: {inner}"))
        } else {
            CliError::Config(format!("{origin}: at `{path}`: {inner}"))
        }
    })
}

/// Parses scenario text and applies overrides, without semantic checks.
pub fn parse_scenario_file(text: &str, origin: &str, overrides: &Overrides) -> Result<ScenarioFile> {
    if overrides.is_empty() {
        return deserialize(text, origin);
    }
    let mut doc: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    apply_overrides(&mut doc, overrides)?;
    let merged = toml::to_string(&doc).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    deserialize(&merged, &format!("{origin} (with overrides)"))
}

pub fn load_scenario_file(path: &Path, overrides: &Overrides) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scenario_file(&text, &path.display().to_string(), overrides)
}

/// Reads, overrides, fills defaults and validates.
pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario> {
    load_scenario_file(path, overrides)?.to_scenario()
}

/// Fully explicit TOML text for `scenario`; reading it back gives the same scenario.
pub fn scenario_to_toml(scenario: &Scenario) -> Result<String> {
    let file = ScenarioFile::from_scenario(scenario)?;
    toml::to_string(&file).map_err(|e| CliError::Config(e.to_string()))
}

pub fn write_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    std::fs::write(path, scenario_to_toml(scenario)?).map_err(|e| CliError::io(path, e))
}

/// Hex SHA-256 of the canonical text of `scenario`.
pub fn scenario_hash(scenario: &Scenario) -> Result<String> {
    let digest = Sha256::digest(scenario_to_toml(scenario)?.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[aircraft]]
id = 1
route = [[0.0, 0.0], [4.0, 0.0]]
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse_scenario_file(MINIMAL, "minimal", &Overrides::default())
            .unwrap()
            .to_scenario()
            .unwrap();
        assert_eq!(s.dt, 0.1);
        assert_eq!(s.horizon, 15);
        assert_eq!(s.cbf.gamma, 0.1);
        assert_eq!(s.reference.poly_order, 8);
        assert_eq!(s.weights, MpcWeights::default());
        assert_eq!(s.aircraft[0].params, AircraftParams::default());
        assert_eq!(s.aircraft[0].initial_speed, 0.5);
        assert_eq!(s.policy, Policy::SafeTaxi);
    }

    #[test]
    fn path_splitting() {
        assert_eq!(split_path("aircraft[2].route"), ["aircraft", "2", "route"]);
        assert_eq!(split_path("solver.q.1"), ["solver", "q", "1"]);
        assert_eq!(parse_value("0.3"), toml::Value::Float(0.3));
        assert_eq!(parse_value("naive"), toml::Value::String("naive".into()));
    }
}
