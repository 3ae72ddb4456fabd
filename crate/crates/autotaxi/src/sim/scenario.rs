use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conflict::{AircraftId, ConflictZone, SlotSpacing};
use crate::dynamics::{AircraftParams, AircraftState, Obstacle, Point};
use crate::error::{ensure, Error, Result};
use crate::mpc::{CbfParams, MpcConfig, MpcWeights, SqpOptions};
use crate::trajectory::ReferenceOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Resolved slots, conflict-aware references, MPC-CBF tracking.
    SafeTaxi,
    /// MPC-CBF tracking of unresolved references.
    Naive,
    /// Stop at the zone when it is busy, enter by priority.
    WaitAndGo,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::SafeTaxi, Policy::Naive, Policy::WaitAndGo];

    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::SafeTaxi => "safe_taxi",
            Policy::Naive => "naive",
            Policy::WaitAndGo => "wait_and_go",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s || p.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidParameter {
                name: "policy",
                reason: format!("unknown policy {s:?}; expected safe_taxi, naive or wait_and_go"),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AircraftSpec {
    pub id: AircraftId,
    pub params: AircraftParams,
    /// Waypoints from start to goal.
    pub route: Vec<Point>,
    pub initial_speed: f64,
}

impl AircraftSpec {
    pub fn start_state(&self) -> AircraftState {
        let [a, b] = [self.route[0], self.route[1]];
        AircraftState::new(a[0], a[1], (b[1] - a[1]).atan2(b[0] - a[0]), self.initial_speed)
    }

    pub fn goal(&self) -> Point {
        *self.route.last().unwrap()
    }
}

/// Obstacle that appears at `spawn_time` at `obstacle.position`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub obstacle: Obstacle,
    pub spawn_time: f64,
}

impl ObstacleSpec {
    pub fn position_at(&self, t: f64) -> Option<Point> {
        (t >= self.spawn_time - 1e-9).then(|| self.obstacle.position_after(t - self.spawn_time))
    }

    /// Snapshot at time `t`, if spawned.
    pub fn at(&self, t: f64) -> Option<Obstacle> {
        self.position_at(t).map(|position| Obstacle { position, ..self.obstacle })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub aircraft: Vec<AircraftSpec>,
    pub zones: Vec<ConflictZone>,
    pub obstacles: Vec<ObstacleSpec>,
    pub dt: f64,
    pub dt_safe: f64,
    pub slot_spacing: SlotSpacing,
    pub horizon: usize,
    pub weights: MpcWeights,
    pub cbf: CbfParams,
    pub sqp: SqpOptions,
    pub reference: ReferenceOptions,
    /// Obstacles and aircraft farther than this are left out of a controller's program.
    pub sensing_range: f64,
    /// Wait-and-go aircraft join the zone queue this far before the stop line.
    pub queue_distance: f64,
    pub seed: u64,
    pub policy: Policy,
    pub max_sim_time: f64,
    pub deadlock_window: f64,
}

impl Scenario {
    /// Scenario with the default controller and timing parameters.
    pub fn new(name: impl Into<String>, aircraft: Vec<AircraftSpec>, zones: Vec<ConflictZone>) -> Self {
        Self {
            name: name.into(),
            aircraft,
            zones,
            obstacles: Vec::new(),
            dt: 0.1,
            dt_safe: 4.0,
            slot_spacing: SlotSpacing::Entry,
            horizon: 15,
            weights: MpcWeights::default(),
            cbf: CbfParams::default(),
            sqp: SqpOptions::default(),
            reference: ReferenceOptions::default(),
            sensing_range: 4.0,
            queue_distance: 1.5,
            seed: 0,
            policy: Policy::SafeTaxi,
            max_sim_time: 60.0,
            deadlock_window: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.aircraft.is_empty(), "aircraft", || "scenario has no aircraft".into())?;
        let mut ids = BTreeSet::new();
        for a in &self.aircraft {
            if !ids.insert(a.id) {
                return Err(Error::DuplicateAircraft(a.id));
            }
            a.params.validate()?;
            ensure(a.route.len() >= 2, "route", || {
                format!("aircraft {}: need at least 2 waypoints, got {}", a.id, a.route.len())
            })?;
            ensure(
                a.route.iter().all(|p| p[0].is_finite() && p[1].is_finite()),
                "route",
                || format!("aircraft {}: non-finite waypoint", a.id),
            )?;
            ensure(
                a.route.windows(2).all(|w| w[0] != w[1]),
                "route",
                || format!("aircraft {}: repeated consecutive waypoint", a.id),
            )?;
            let limits = a.params.speed_limits;
            ensure(
                a.initial_speed >= limits.min && a.initial_speed <= limits.max,
                "initial_speed",
                || format!("aircraft {}: {} outside speed limits", a.id, a.initial_speed),
            )?;
        }
        let mut zone_ids = BTreeSet::new();
        for z in &self.zones {
            ensure(z.radius > 0.0 && z.radius.is_finite(), "zones.radius", || {
                format!("zone {}: radius {} must be positive", z.id, z.radius)
            })?;
            ensure(zone_ids.insert(z.id), "zones.id", || format!("duplicate zone id {}", z.id))?;
        }
        for o in &self.obstacles {
            o.obstacle.validate()?;
            ensure(o.spawn_time >= 0.0, "spawn_time", || {
                format!("{} is negative", o.spawn_time)
            })?;
        }
        ensure(self.dt > 0.0, "dt", || format!("{} must be positive", self.dt))?;
        ensure(self.dt_safe > 0.0, "dt_safe", || format!("{} must be positive", self.dt_safe))?;
        ensure(self.sensing_range > 0.0, "sensing_range", || {
            format!("{} must be positive", self.sensing_range)
        })?;
        ensure(self.queue_distance >= 0.0, "queue_distance", || {
            format!("{} is negative", self.queue_distance)
        })?;
        ensure(self.max_sim_time > 0.0, "max_sim_time", || {
            format!("{} must be positive", self.max_sim_time)
        })?;
        ensure(self.deadlock_window > 0.0, "deadlock_window", || {
            format!("{} must be positive", self.deadlock_window)
        })?;
        for a in &self.aircraft {
            self.mpc_config(a).validate()?;
        }
        Ok(())
    }

    pub fn mpc_config(&self, aircraft: &AircraftSpec) -> MpcConfig {
        MpcConfig {
            horizon: self.horizon,
            dt: self.dt,
            length: aircraft.params.length,
            weights: self.weights,
            cbf: self.cbf,
            bounds: aircraft.params.bounds,
            speed_limits: aircraft.params.speed_limits,
            sqp: self.sqp,
        }
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        Self {
            policy,
            ..self.clone()
        }
    }

    pub fn aircraft(&self, id: AircraftId) -> Option<&AircraftSpec> {
        self.aircraft.iter().find(|a| a.id == id)
    }
}
