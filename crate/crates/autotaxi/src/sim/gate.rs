//! Zone access for the wait-and-go baseline: an aircraft near a busy zone
//! holds at a stop line, and a free zone admits one queued aircraft at a
//! time, best priority first, then earliest queued, then lowest id.

use crate::conflict::{arc_lengths, dist, point_at_arc, AircraftId, ZoneCrossing};
use crate::dynamics::Point;
use crate::mpc::ZoneGate;
use crate::trajectory::{sample_reference, PolySpline, ReferenceState};

/// Arc length of the route point closest to `p`.
pub fn route_progress(route: &[Point], p: Point) -> f64 {
    let s = arc_lengths(route);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..route.len() - 1 {
        let (a, b) = (route[k], route[k + 1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let u = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
        let q = [a[0] + u * d[0], a[1] + u * d[1]];
        let gap = dist(p, q);
        if gap < best.0 {
            best = (gap, s[k] + u * len2.sqrt());
        }
    }
    best.1
}

/// Time at which `spline` passes closest to `target`.
fn closest_time(spline: &PolySpline, target: Point) -> f64 {
    const STEP: f64 = 0.01;
    let n = ((spline.t_end() - spline.t_start()) / STEP).ceil() as usize;
    (0..=n)
        .map(|k| (spline.t_start() + k as f64 * STEP).min(spline.t_end()))
        .min_by(|a, b| dist(spline.position(*a), target).total_cmp(&dist(spline.position(*b), target)))
        .unwrap_or(spline.t_start())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Approaching,
    Queued { since: f64 },
    Committed,
    Done,
}

#[derive(Debug, Clone)]
struct Gate {
    zone: u32,
    s_queue: f64,
    s_out: f64,
    /// When the unshifted reference reaches the stop line.
    stop_time: f64,
    stop: ReferenceState,
    phase: Phase,
}

#[derive(Debug, Clone)]
struct Member {
    id: AircraftId,
    priority: u32,
    gates: Vec<Gate>,
    time_shift: f64,
}

impl Member {
    fn current(&self) -> Option<&Gate> {
        self.gates.iter().find(|g| g.phase != Phase::Done)
    }
}

#[derive(Debug, Clone)]
pub struct WaitAndGo {
    members: Vec<Member>,
}

/// One aircraft as seen by the coordinator.
pub struct Participant<'a> {
    pub id: AircraftId,
    pub priority: u32,
    pub route: &'a [Point],
    pub spline: &'a PolySpline,
    pub crossings: &'a [ZoneCrossing],
}

impl WaitAndGo {
    /// Stop lines sit `stop_margin` before each zone entry.
    pub fn new(participants: &[Participant<'_>], stop_margin: f64, queue_distance: f64) -> Self {
        let members = participants
            .iter()
            .map(|p| {
                let gates = p
                    .crossings
                    .iter()
                    .map(|c| {
                        let s_stop = (c.s_in - stop_margin).max(0.0);
                        let stop_point = point_at_arc(p.route, s_stop);
                        let stop_time = closest_time(p.spline, stop_point);
                        Gate {
                            zone: c.zone,
                            s_queue: s_stop - queue_distance,
                            s_out: c.s_out,
                            stop_time,
                            stop: sample_reference(p.spline, stop_time),
                            phase: Phase::Approaching,
                        }
                    })
                    .collect();
                Member {
                    id: p.id,
                    priority: p.priority,
                    gates,
                    time_shift: 0.0,
                }
            })
            .collect();
        Self { members }
    }

    /// Advances every gate given route progress of active aircraft
    /// (`None` once an aircraft has finished).
    pub fn update(&mut self, t: f64, progress: &[Option<f64>]) {
        for (m, s) in self.members.iter_mut().zip(progress) {
            let Some(s) = *s else {
                m.gates.iter_mut().for_each(|g| g.phase = Phase::Done);
                continue;
            };
            for g in m.gates.iter_mut() {
                match g.phase {
                    Phase::Committed if s > g.s_out => g.phase = Phase::Done,
                    Phase::Approaching if s >= g.s_queue => g.phase = Phase::Queued { since: t },
                    _ => {}
                }
                if g.phase != Phase::Done {
                    break;
                }
            }
        }

        let mut zones: Vec<u32> = self.members.iter().flat_map(|m| m.gates.iter().map(|g| g.zone)).collect();
        zones.sort_unstable();
        zones.dedup();
        for zone in zones {
            let occupied = self
                .members
                .iter()
                .any(|m| m.current().is_some_and(|g| g.zone == zone && g.phase == Phase::Committed));
            if occupied {
                continue;
            }
            let next = self
                .members
                .iter()
                .enumerate()
                .filter_map(|(i, m)| match m.current() {
                    Some(g) if g.zone == zone => match g.phase {
                        Phase::Queued { since } => Some((m.priority, since, m.id, i)),
                        _ => None,
                    },
                    _ => None,
                })
                .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
            if let Some((_, _, _, i)) = next {
                let m = &mut self.members[i];
                let shift = m.time_shift;
                let g = m.gates.iter_mut().find(|g| g.phase != Phase::Done).unwrap();
                g.phase = Phase::Committed;
                // Resume from the stop line if the reference already passed it.
                if t - shift > g.stop_time {
                    m.time_shift = t - g.stop_time;
                }
            }
        }
    }

    pub fn gate(&self, index: usize) -> ZoneGate {
        let m = &self.members[index];
        match m.current() {
            Some(g) if matches!(g.phase, Phase::Queued { .. }) => ZoneGate::Hold { stop: g.stop },
            _ => ZoneGate::Go {
                time_shift: m.time_shift,
            },
        }
    }

    /// Aircraft currently holding for a zone, with the zone id.
    pub fn holding(&self) -> Vec<(AircraftId, u32)> {
        self.members
            .iter()
            .filter_map(|m| match m.current() {
                Some(g) if matches!(g.phase, Phase::Queued { .. }) => Some((m.id, g.zone)),
                _ => None,
            })
            .collect()
    }
}
