use std::collections::BTreeMap;

use serde::Serialize;

use crate::conflict::AircraftId;
use crate::dynamics::{AircraftState, ControlInput, Point};
use crate::mpc::MpcStatus;

use super::scenario::Policy;

/// Displacement below which an aircraft counts as not moving.
pub const DEADLOCK_DISPLACEMENT: f64 = 0.05;

/// Allowance on safety distances before a violation is reported.
pub const SAFETY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AircraftInfo {
    pub id: AircraftId,
    pub goal: Point,
    pub goal_tolerance: f64,
    pub body_radius: f64,
    pub priority: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AircraftRecord {
    pub id: AircraftId,
    pub state: AircraftState,
    /// Input applied over the following step.
    pub input: ControlInput,
    pub status: MpcStatus,
    pub max_slack: f64,
    /// Smallest true barrier value against obstacles and other aircraft.
    pub min_h: f64,
    /// True barrier value per scenario obstacle; `None` before it spawns.
    pub obstacle_h: Vec<Option<f64>>,
    /// Near a zone or close to an active barrier.
    pub in_window: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairSeparation {
    pub a: AircraftId,
    pub b: AircraftId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub time: f64,
    /// Aircraft that have not reached their goal, in scenario order.
    pub aircraft: Vec<AircraftRecord>,
    pub separations: Vec<PairSeparation>,
}

impl StepRecord {
    pub fn get(&self, id: AircraftId) -> Option<&AircraftRecord> {
        self.aircraft.iter().find(|a| a.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    ZoneEntry { time: f64, aircraft: AircraftId, zone: u32 },
    ZoneExit { time: f64, aircraft: AircraftId, zone: u32 },
    GoalReached { time: f64, aircraft: AircraftId },
    /// Controller failed; braking was applied.
    Fallback { time: f64, aircraft: AircraftId },
    SafetyViolation {
        time: f64,
        aircraft: AircraftId,
        /// `aircraft:<id>` or `obstacle:<index>`.
        other: String,
        distance: f64,
        required: f64,
    },
    Deadlock { time: f64 },
    Timeout { time: f64 },
}

impl SimEvent {
    pub fn time(&self) -> f64 {
        match self {
            SimEvent::ZoneEntry { time, .. }
            | SimEvent::ZoneExit { time, .. }
            | SimEvent::GoalReached { time, .. }
            | SimEvent::Fallback { time, .. }
            | SimEvent::SafetyViolation { time, .. }
            | SimEvent::Deadlock { time }
            | SimEvent::Timeout { time } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimLog {
    pub scenario: String,
    pub policy: Policy,
    pub seed: u64,
    pub dt: f64,
    pub gamma: f64,
    pub d_safe: f64,
    pub aircraft: Vec<AircraftInfo>,
    pub obstacle_radii: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<SimEvent>,
}

impl SimLog {
    pub fn info(&self, id: AircraftId) -> Option<&AircraftInfo> {
        self.aircraft.iter().find(|a| a.id == id)
    }

    pub fn goal_times(&self) -> BTreeMap<AircraftId, f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                SimEvent::GoalReached { time, aircraft } => Some((*aircraft, *time)),
                _ => None,
            })
            .collect()
    }

    pub fn deadlocked(&self) -> bool {
        self.events.iter().any(|e| matches!(e, SimEvent::Deadlock { .. }))
    }

    pub fn timed_out(&self) -> bool {
        self.events.iter().any(|e| matches!(e, SimEvent::Timeout { .. }))
    }

    pub fn safety_violations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, SimEvent::SafetyViolation { .. }))
            .count()
    }

    /// Closed-loop positions of one aircraft with their record times.
    pub fn track(&self, id: AircraftId) -> Vec<(f64, AircraftState)> {
        self.steps
            .iter()
            .filter_map(|s| s.get(id).map(|r| (s.time, r.state)))
            .collect()
    }
}

/// Deadlock iff, over the trailing `window` seconds, every aircraft still
/// taxiing moved less than [`DEADLOCK_DISPLACEMENT`] and none of them is
/// within its goal tolerance.
pub fn detect_deadlock(log: &SimLog, window: f64) -> bool {
    let Some(last) = log.steps.last() else {
        return false;
    };
    if last.aircraft.is_empty() {
        return false;
    }
    let span = (window / log.dt).round() as usize;
    if span == 0 || log.steps.len() <= span {
        return false;
    }
    let earlier = &log.steps[log.steps.len() - 1 - span];
    last.aircraft.iter().all(|now| {
        let Some(then) = earlier.get(now.id) else {
            return false;
        };
        let moved = (now.state.px - then.state.px).hypot(now.state.py - then.state.py);
        let at_goal = log.info(now.id).is_some_and(|info| {
            (now.state.px - info.goal[0]).hypot(now.state.py - info.goal[1]) <= info.goal_tolerance
        });
        moved < DEADLOCK_DISPLACEMENT && !at_goal
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZoneInterval {
    pub aircraft: AircraftId,
    pub zone: u32,
    pub entry: f64,
    /// `None` if the run ended with the aircraft inside.
    pub exit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub policy: Policy,
    /// Time until every aircraft reached its goal; `None` on deadlock or timeout.
    pub comp_time: Option<f64>,
    /// Mean over aircraft of the population variance of applied `β`.
    pub avg_acc_var: f64,
    /// Same, restricted to steps near zones or active barriers.
    pub windowed_acc_var: f64,
    pub min_separation: Option<f64>,
    pub min_h: Option<f64>,
    pub max_slack: f64,
    pub deadlock: bool,
    pub timed_out: bool,
    pub safety_violations: usize,
    pub fallbacks: usize,
    pub goal_times: BTreeMap<AircraftId, f64>,
    pub zone_intervals: Vec<ZoneInterval>,
}

fn population_variance(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compute_metrics(log: &SimLog) -> Metrics {
    let goal_times = log.goal_times();
    let deadlock = log.deadlocked();
    let timed_out = log.timed_out();
    let t0 = log.steps.first().map_or(0.0, |s| s.time);
    let comp_time = (goal_times.len() == log.aircraft.len() && !deadlock && !timed_out)
        .then(|| goal_times.values().copied().fold(t0, f64::max) - t0);

    let mut betas: BTreeMap<AircraftId, Vec<f64>> = BTreeMap::new();
    let mut windowed: BTreeMap<AircraftId, Vec<f64>> = BTreeMap::new();
    let mut min_separation: Option<f64> = None;
    let mut min_h: Option<f64> = None;
    let mut max_slack: f64 = 0.0;
    for step in &log.steps {
        for r in &step.aircraft {
            betas.entry(r.id).or_default().push(r.input.beta);
            if r.in_window {
                windowed.entry(r.id).or_default().push(r.input.beta);
            }
            if r.min_h.is_finite() {
                min_h = Some(min_h.map_or(r.min_h, |m| m.min(r.min_h)));
            }
            max_slack = max_slack.max(r.max_slack);
        }
        for s in &step.separations {
            min_separation = Some(min_separation.map_or(s.distance, |m| m.min(s.distance)));
        }
    }
    let avg_acc_var = mean(betas.values().filter_map(|b| population_variance(b)));
    let windowed_acc_var = mean(windowed.values().filter_map(|b| population_variance(b)));

    let mut zone_intervals: Vec<ZoneInterval> = Vec::new();
    for e in &log.events {
        match *e {
            SimEvent::ZoneEntry { time, aircraft, zone } => zone_intervals.push(ZoneInterval {
                aircraft,
                zone,
                entry: time,
                exit: None,
            }),
            SimEvent::ZoneExit { time, aircraft, zone } => {
                if let Some(open) = zone_intervals
                    .iter_mut()
                    .rev()
                    .find(|z| z.aircraft == aircraft && z.zone == zone && z.exit.is_none())
                {
                    open.exit = Some(time);
                }
            }
            _ => {}
        }
    }

    Metrics {
        policy: log.policy,
        comp_time,
        avg_acc_var,
        windowed_acc_var,
        min_separation,
        min_h,
        max_slack,
        deadlock,
        timed_out,
        safety_violations: log.safety_violations(),
        fallbacks: log
            .events
            .iter()
            .filter(|e| matches!(e, SimEvent::Fallback { .. }))
            .count(),
        goal_times,
        zone_intervals,
    }
}
