//! Synchronous multi-aircraft closed-loop simulation.
//!
//! Every step all controllers solve against the same snapshot of the world,
//! then all commands are applied together. Other aircraft appear in each
//! controller as disks moving at their current velocity.

mod gate;
mod log;
mod plan;
mod scenario;

use std::collections::BTreeSet;

use rayon::prelude::*;

pub use gate::{route_progress, Participant, WaitAndGo};
pub use log::{
    compute_metrics, detect_deadlock, AircraftInfo, AircraftRecord, Metrics, PairSeparation, SimEvent, SimLog,
    StepRecord, ZoneInterval, DEADLOCK_DISPLACEMENT, SAFETY_TOLERANCE,
};
pub use plan::{plan_phase, AircraftPlan, Plan, SlotRecord};
pub use scenario::{AircraftSpec, ObstacleSpec, Policy, Scenario};

use crate::dynamics::{step_dynamics, AircraftState, Obstacle};
use crate::error::Result;
use crate::mpc::{cbf_h, reference_window, wait_and_go_reference, MpcController, MpcStatus};

/// Result of one policy on one scenario.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub plan: Plan,
    pub log: SimLog,
    pub metrics: Metrics,
}

/// Plans and simulates `scenario` under its configured policy.
pub fn run(scenario: &Scenario) -> Result<(SimLog, Metrics)> {
    let outcome = run_outcome(scenario)?;
    Ok((outcome.log, outcome.metrics))
}

pub fn run_outcome(scenario: &Scenario) -> Result<Outcome> {
    let plan = plan_phase(scenario)?;
    let log = simulate(scenario, &plan)?;
    let metrics = compute_metrics(&log);
    Ok(Outcome { plan, log, metrics })
}

/// Runs all three policies on the same scenario and seed.
pub fn compare_policies(scenario: &Scenario) -> Result<Vec<Outcome>> {
    Policy::ALL
        .par_iter()
        .map(|&p| run_outcome(&scenario.with_policy(p)))
        .collect()
}

struct Job {
    index: usize,
    state: AircraftState,
    reference: Vec<AircraftState>,
    obstacles: Vec<Obstacle>,
}

fn velocity_obstacle(x: &AircraftState, radius: f64) -> Obstacle {
    Obstacle {
        position: x.position(),
        radius,
        velocity: x.velocity(),
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Closed-loop execution of a plan.
pub fn simulate(scenario: &Scenario, plan: &Plan) -> Result<SimLog> {
    scenario.validate()?;
    let n = scenario.aircraft.len();
    let d_safe = scenario.cbf.d_safe;
    let radii: Vec<f64> = scenario.aircraft.iter().map(|a| a.params.body_radius()).collect();
    let splines: Vec<_> = scenario
        .aircraft
        .iter()
        .map(|a| &plan.aircraft(a.id).expect("plan covers every aircraft").spline)
        .collect();

    let mut controllers: Vec<MpcController> = scenario
        .aircraft
        .iter()
        .map(|a| MpcController::new(scenario.mpc_config(a)))
        .collect();
    let mut states: Vec<AircraftState> = scenario.aircraft.iter().map(AircraftSpec::start_state).collect();
    let mut active = vec![true; n];
    let mut inside: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut violating: BTreeSet<(usize, String)> = BTreeSet::new();
    let mut wait_and_go = (scenario.policy == Policy::WaitAndGo).then(|| {
        let participants: Vec<Participant<'_>> = scenario
            .aircraft
            .iter()
            .zip(&splines)
            .map(|(a, spline)| Participant {
                id: a.id,
                priority: a.params.priority,
                route: &a.route,
                spline,
                crossings: &plan.aircraft(a.id).unwrap().crossings,
            })
            .collect();
        WaitAndGo::new(&participants, d_safe, scenario.queue_distance)
    });

    let mut log = SimLog {
        scenario: scenario.name.clone(),
        policy: scenario.policy,
        seed: scenario.seed,
        dt: scenario.dt,
        gamma: scenario.cbf.gamma,
        d_safe,
        aircraft: scenario
            .aircraft
            .iter()
            .map(|a| AircraftInfo {
                id: a.id,
                goal: a.goal(),
                goal_tolerance: a.params.goal_tolerance,
                body_radius: a.params.body_radius(),
                priority: a.params.priority,
            })
            .collect(),
        obstacle_radii: scenario.obstacles.iter().map(|o| o.obstacle.radius).collect(),
        steps: Vec::new(),
        events: Vec::new(),
    };

    let mut k: usize = 0;
    loop {
        let t = k as f64 * scenario.dt;
        if t > scenario.max_sim_time + 1e-9 {
            log.events.push(SimEvent::Timeout { time: t });
            break;
        }
        let obstacles: Vec<Option<Obstacle>> = scenario.obstacles.iter().map(|o| o.at(t)).collect();

        // Zone bookkeeping on the current snapshot.
        for (i, a) in scenario.aircraft.iter().enumerate() {
            if !active[i] {
                continue;
            }
            for z in &scenario.zones {
                let now_inside = z.contains(states[i].position());
                if now_inside && inside[i].insert(z.id) {
                    log.events.push(SimEvent::ZoneEntry { time: t, aircraft: a.id, zone: z.id });
                } else if !now_inside && inside[i].remove(&z.id) {
                    log.events.push(SimEvent::ZoneExit { time: t, aircraft: a.id, zone: z.id });
                }
            }
        }
        if let Some(wg) = wait_and_go.as_mut() {
            let progress: Vec<Option<f64>> = scenario
                .aircraft
                .iter()
                .enumerate()
                .map(|(i, a)| active[i].then(|| route_progress(&a.route, states[i].position())))
                .collect();
            wg.update(t, &progress);
        }

        let jobs: Vec<Job> = (0..n)
            .filter(|&i| active[i])
            .map(|i| {
                let horizon = scenario.horizon;
                let reference = match &wait_and_go {
                    Some(wg) => wait_and_go_reference(splines[i], t, &wg.gate(i), horizon, scenario.dt),
                    None => reference_window(splines[i], t, horizon, scenario.dt),
                };
                let me = states[i].position();
                let mut seen: Vec<Obstacle> = (0..n)
                    .filter(|&j| j != i && active[j])
                    .map(|j| velocity_obstacle(&states[j], radii[i] + radii[j]))
                    .collect();
                seen.extend(obstacles.iter().flatten().copied());
                seen.retain(|o| distance(me, o.position) - o.radius <= scenario.sensing_range);
                Job {
                    index: i,
                    state: states[i],
                    reference,
                    obstacles: seen,
                }
            })
            .collect();

        let mut results = Vec::with_capacity(jobs.len());
        {
            let mut slots: Vec<Option<&mut MpcController>> = controllers.iter_mut().map(Some).collect();
            let work: Vec<(&Job, &mut MpcController)> =
                jobs.iter().map(|j| (j, slots[j.index].take().unwrap())).collect();
            work.into_par_iter()
                .map(|(job, ctl)| ctl.control(&job.state, job.reference.clone(), &job.obstacles))
                .collect_into_vec(&mut results);
        }

        let mut record = StepRecord {
            time: t,
            aircraft: Vec::with_capacity(jobs.len()),
            separations: Vec::new(),
        };
        let mut inputs = vec![None; n];
        for (job, result) in jobs.iter().zip(results) {
            let i = job.index;
            let id = scenario.aircraft[i].id;
            let (input, sol) = result?;
            if sol.status == MpcStatus::Failed {
                log.events.push(SimEvent::Fallback { time: t, aircraft: id });
            }
            inputs[i] = Some(input);

            let x = states[i];
            let obstacle_h: Vec<Option<f64>> = obstacles
                .iter()
                .map(|o| o.map(|o| cbf_h(&x, o.position, o.radius, d_safe)))
                .collect();
            let mut min_h = obstacle_h.iter().flatten().copied().fold(f64::INFINITY, f64::min);
            let mut near_active = obstacles
                .iter()
                .zip(&obstacle_h)
                .any(|(o, h)| matches!((o, h), (Some(o), Some(h)) if *h <= 0.1 * (o.radius + d_safe).powi(2)));
            for j in (0..n).filter(|&j| j != i && active[j]) {
                let r = radii[i] + radii[j];
                let h = cbf_h(&x, states[j].position(), r, d_safe);
                min_h = min_h.min(h);
                near_active |= h <= 0.1 * (r + d_safe).powi(2);
            }
            let near_zone = scenario
                .zones
                .iter()
                .any(|z| distance(x.position(), z.center) <= z.radius + 5.0);

            for (j, o) in obstacles.iter().enumerate() {
                let Some(o) = o else { continue };
                let required = o.radius + d_safe;
                let gap = distance(x.position(), o.position);
                let key = (i, format!("obstacle:{j}"));
                if gap < required - SAFETY_TOLERANCE {
                    if violating.insert(key.clone()) {
                        log.events.push(SimEvent::SafetyViolation {
                            time: t,
                            aircraft: id,
                            other: key.1,
                            distance: gap,
                            required,
                        });
                    }
                } else {
                    violating.remove(&key);
                }
            }

            record.aircraft.push(AircraftRecord {
                id,
                state: x,
                input,
                status: sol.status,
                max_slack: sol.max_slack(),
                min_h,
                obstacle_h,
                in_window: near_zone || near_active,
            });
        }
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let gap = distance(states[i].position(), states[j].position());
                let (a, b) = (scenario.aircraft[i].id, scenario.aircraft[j].id);
                record.separations.push(PairSeparation { a, b, distance: gap });
                let required = radii[i] + radii[j] + d_safe;
                let key = (i, format!("aircraft:{b}"));
                if gap < required - SAFETY_TOLERANCE {
                    if violating.insert(key.clone()) {
                        log.events.push(SimEvent::SafetyViolation {
                            time: t,
                            aircraft: a,
                            other: key.1,
                            distance: gap,
                            required,
                        });
                    }
                } else {
                    violating.remove(&key);
                }
            }
        }
        log.steps.push(record);

        if detect_deadlock(&log, scenario.deadlock_window) {
            log.events.push(SimEvent::Deadlock { time: t });
            break;
        }

        let t_next = (k + 1) as f64 * scenario.dt;
        for (i, a) in scenario.aircraft.iter().enumerate() {
            let Some(u) = inputs[i] else { continue };
            let mut next = step_dynamics(&states[i], &u, scenario.dt, a.params.length)?;
            next.v = a.params.speed_limits.clamp(next.v);
            states[i] = next;
            if distance(next.position(), a.goal()) <= a.params.goal_tolerance {
                active[i] = false;
                for zone in std::mem::take(&mut inside[i]) {
                    log.events.push(SimEvent::ZoneExit { time: t_next, aircraft: a.id, zone });
                }
                log.events.push(SimEvent::GoalReached { time: t_next, aircraft: a.id });
            }
        }
        if !active.iter().any(|&x| x) {
            break;
        }
        k += 1;
    }
    Ok(log)
}
