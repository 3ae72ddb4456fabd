//! Intersection conflict resolution.
//!
//! Aircraft whose estimated occupancy windows of a conflict zone overlap are
//! linked in a conflict graph. The graph is oriented by regulatory priority,
//! equal-priority pairs and non-conflicting pairs are oriented by arrival
//! time, and the resulting acyclic tournament is walked from its source to
//! obtain the passing order. Entry times are then spaced along that order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Point;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AircraftId(pub u32);

impl fmt::Display for AircraftId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Disk-shaped shared taxiway region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictZone {
    pub id: u32,
    pub center: Point,
    pub radius: f64,
}

impl ConflictZone {
    pub fn contains(&self, p: Point) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Occupancy window of one aircraft in one zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSlot {
    pub aircraft: AircraftId,
    pub t_in: f64,
    pub t_out: f64,
}

impl IntersectionSlot {
    pub fn duration(&self) -> f64 {
        self.t_out - self.t_in
    }

    fn validate(&self) -> Result<()> {
        ensure(
            self.t_in.is_finite() && self.t_out.is_finite() && self.t_in >= 0.0 && self.t_in < self.t_out,
            "slot",
            || format!("aircraft {}: [{}, {}] is not a valid window", self.aircraft, self.t_in, self.t_out),
        )
    }
}

/// Where a route polyline passes through a zone, in arc length from the route start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneCrossing {
    pub zone: u32,
    pub s_in: f64,
    pub s_out: f64,
    pub entry: Point,
    pub exit: Point,
}

/// Cumulative arc length at each route vertex.
pub fn arc_lengths(route: &[Point]) -> Vec<f64> {
    let mut s = Vec::with_capacity(route.len());
    let mut acc = 0.0;
    for (k, p) in route.iter().enumerate() {
        if k > 0 {
            acc += dist(route[k - 1], *p);
        }
        s.push(acc);
    }
    s
}

/// Point at arc length `s` along the polyline, clamped to its ends.
pub fn point_at_arc(route: &[Point], s: f64) -> Point {
    let cum = arc_lengths(route);
    for k in 0..route.len().saturating_sub(1) {
        if s <= cum[k + 1] || k + 2 == route.len() {
            let len = cum[k + 1] - cum[k];
            let u = if len > 0.0 { ((s - cum[k]) / len).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (route[k], route[k + 1]);
            return [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        }
    }
    route[0]
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// First entry into and last exit from the zone disk along the polyline.
///
/// Returns `None` when the route misses the disk or only grazes it.
pub fn zone_crossing(route: &[Point], zone: &ConflictZone) -> Option<ZoneCrossing> {
    let cumulative = arc_lengths(route);
    let mut first: Option<(f64, Point)> = None;
    let mut last: Option<(f64, Point)> = None;
    for k in 0..route.len().saturating_sub(1) {
        let (p0, p1) = (route[k], route[k + 1]);
        let d = [p1[0] - p0[0], p1[1] - p0[1]];
        let len = d[0].hypot(d[1]);
        if len == 0.0 {
            continue;
        }
        // |p0 + s d - c|^2 = r^2 for s in [0, 1]
        let f = [p0[0] - zone.center[0], p0[1] - zone.center[1]];
        let a = d[0] * d[0] + d[1] * d[1];
        let b = 2.0 * (f[0] * d[0] + f[1] * d[1]);
        let c = f[0] * f[0] + f[1] * f[1] - zone.radius * zone.radius;
        let disc = b * b - 4.0 * a * c;
        if disc <= 0.0 {
            continue;
        }
        let root = disc.sqrt();
        let lo = ((-b - root) / (2.0 * a)).max(0.0);
        let hi = ((-b + root) / (2.0 * a)).min(1.0);
        if hi <= lo {
            continue;
        }
        let at = |s: f64| [p0[0] + s * d[0], p0[1] + s * d[1]];
        if first.is_none() {
            first = Some((cumulative[k] + lo * len, at(lo)));
        }
        last = Some((cumulative[k] + hi * len, at(hi)));
    }
    match (first, last) {
        (Some((s_in, entry)), Some((s_out, exit))) if s_out - s_in > 1e-9 => Some(ZoneCrossing {
            zone: zone.id,
            s_in,
            s_out,
            entry,
            exit,
        }),
        _ => None,
    }
}

/// Estimated occupancy window from arc length and operating speed.
pub fn estimate_initial_slots(
    aircraft: AircraftId,
    route: &[Point],
    operating_speed: f64,
    zone: &ConflictZone,
    t_start: f64,
) -> Result<Option<IntersectionSlot>> {
    ensure(route.len() >= 2, "route", || {
        format!("aircraft {aircraft}: need at least 2 waypoints, got {}", route.len())
    })?;
    ensure(operating_speed > 0.0, "operating_speed", || {
        format!("{operating_speed} must be positive")
    })?;
    Ok(zone_crossing(route, zone).map(|c| IntersectionSlot {
        aircraft,
        t_in: t_start + c.s_in / operating_speed,
        t_out: t_start + c.s_out / operating_speed,
    }))
}

fn ordered(a: AircraftId, b: AircraftId) -> (AircraftId, AircraftId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictGraph {
    pub vertices: BTreeSet<AircraftId>,
    /// Unordered pairs, stored smaller id first.
    pub edges: BTreeSet<(AircraftId, AircraftId)>,
}

impl ConflictGraph {
    pub fn has_edge(&self, a: AircraftId, b: AircraftId) -> bool {
        self.edges.contains(&ordered(a, b))
    }
}

/// `j` enters while `i` is still inside: `t_in(i) < t_in(j) <= t_out(i)`.
pub fn in_spatial_conflict(i: &IntersectionSlot, j: &IntersectionSlot) -> bool {
    i.t_in < j.t_in && j.t_in <= i.t_out
}

fn index_slots(slots: &[IntersectionSlot]) -> Result<BTreeMap<AircraftId, IntersectionSlot>> {
    let mut map = BTreeMap::new();
    for s in slots {
        s.validate()?;
        if map.insert(s.aircraft, *s).is_some() {
            return Err(Error::DuplicateAircraft(s.aircraft));
        }
    }
    Ok(map)
}

pub fn build_conflict_graph(slots: &[IntersectionSlot]) -> Result<ConflictGraph> {
    let by_id = index_slots(slots)?;
    let mut graph = ConflictGraph {
        vertices: by_id.keys().copied().collect(),
        edges: BTreeSet::new(),
    };
    let all: Vec<_> = by_id.values().collect();
    for (k, a) in all.iter().enumerate() {
        for b in &all[k + 1..] {
            if in_spatial_conflict(a, b) || in_spatial_conflict(b, a) {
                graph.edges.insert(ordered(a.aircraft, b.aircraft));
            }
        }
    }
    Ok(graph)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PriorityGraph {
    pub vertices: BTreeSet<AircraftId>,
    /// `(winner, loser)` pairs.
    pub directed: BTreeSet<(AircraftId, AircraftId)>,
    /// Conflicting pairs of equal priority.
    pub double_edges: BTreeSet<(AircraftId, AircraftId)>,
}

pub fn build_priority_graph(
    g: &ConflictGraph,
    priorities: &BTreeMap<AircraftId, u32>,
) -> Result<PriorityGraph> {
    let rank = |id: AircraftId| priorities.get(&id).copied().ok_or(Error::MissingPriority(id));
    for &v in &g.vertices {
        rank(v)?;
    }
    let mut out = PriorityGraph {
        vertices: g.vertices.clone(),
        ..Default::default()
    };
    for &(a, b) in &g.edges {
        let (ra, rb) = (rank(a)?, rank(b)?);
        match ra.cmp(&rb) {
            std::cmp::Ordering::Less => out.directed.insert((a, b)),
            std::cmp::Ordering::Greater => out.directed.insert((b, a)),
            std::cmp::Ordering::Equal => out.double_edges.insert((a, b)),
        };
    }
    Ok(out)
}

/// Total arrival order: earlier `t_in` first, exact ties broken by a seeded coin.
///
/// Returns the rank (0 = first to arrive) of every aircraft.
pub fn arrival_ranks(slots: &[IntersectionSlot], seed: u64) -> BTreeMap<AircraftId, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, u64, AircraftId)> = {
        let mut sorted: Vec<_> = slots.to_vec();
        sorted.sort_by_key(|s| s.aircraft);
        sorted.iter().map(|s| (s.t_in, rng.random::<u64>(), s.aircraft)).collect()
    };
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    keyed.iter().enumerate().map(|(rank, k)| (k.2, rank)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeOrigin {
    Priority,
    Temporal,
    TieBreak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdvantageEdge {
    pub from: AircraftId,
    pub to: AircraftId,
    pub origin: EdgeOrigin,
    /// Whether the pair is linked in the conflict graph.
    pub conflicting: bool,
}

/// Tournament over the aircraft of one zone: exactly one directed edge per pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemporalAdvantageGraph {
    pub vertices: Vec<AircraftId>,
    pub edges: Vec<AdvantageEdge>,
    /// Number of non-conflicting edges reversed to break cycles.
    pub repaired: usize,
}

impl TemporalAdvantageGraph {
    fn successors(&self, v: AircraftId) -> impl Iterator<Item = AircraftId> + '_ {
        self.edges.iter().filter(move |e| e.from == v).map(|e| e.to)
    }

    pub fn in_degree(&self, v: AircraftId) -> usize {
        self.edges.iter().filter(|e| e.to == v).count()
    }

    /// Kahn's algorithm; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<AircraftId>> {
        topo_sort(&self.vertices, self.edges.iter().map(|e| (e.from, e.to)), |_| 0)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// The vertex with no incoming edges, if unique.
    pub fn source(&self) -> Option<AircraftId> {
        let mut sources = self.vertices.iter().copied().filter(|&v| self.in_degree(v) == 0);
        match (sources.next(), sources.next()) {
            (Some(v), None) => Some(v),
            _ => None,
        }
    }
}

/// Kahn's algorithm choosing, among ready vertices, the smallest `key` (then id).
fn topo_sort(
    vertices: &[AircraftId],
    edges: impl Iterator<Item = (AircraftId, AircraftId)>,
    key: impl Fn(AircraftId) -> usize,
) -> Option<Vec<AircraftId>> {
    let mut indeg: BTreeMap<AircraftId, usize> = vertices.iter().map(|&v| (v, 0)).collect();
    let mut succ: BTreeMap<AircraftId, Vec<AircraftId>> = BTreeMap::new();
    for (a, b) in edges {
        *indeg.get_mut(&b)? += 1;
        succ.entry(a).or_default().push(b);
    }
    let mut ready: BTreeSet<(usize, AircraftId)> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&v, _)| (key(v), v))
        .collect();
    let mut order = Vec::with_capacity(vertices.len());
    while let Some(first) = ready.pop_first() {
        let v = first.1;
        order.push(v);
        for &w in succ.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&w)?;
            *d -= 1;
            if *d == 0 {
                ready.insert((key(w), w));
            }
        }
    }
    (order.len() == vertices.len()).then_some(order)
}

pub fn build_temporal_advantage_graph(
    p: &PriorityGraph,
    slots: &[IntersectionSlot],
    seed: u64,
) -> Result<TemporalAdvantageGraph> {
    let by_id = index_slots(slots)?;
    for &v in &p.vertices {
        if !by_id.contains_key(&v) {
            return Err(Error::MissingSlot(v));
        }
    }
    let relevant: Vec<_> = p.vertices.iter().map(|v| by_id[v]).collect();
    let rank = arrival_ranks(&relevant, seed);
    let vertices: Vec<AircraftId> = p.vertices.iter().copied().collect();

    let by_arrival = |a: AircraftId, b: AircraftId, conflicting: bool| {
        let (first, second) = if rank[&a] < rank[&b] { (a, b) } else { (b, a) };
        let origin = if by_id[&a].t_in == by_id[&b].t_in {
            EdgeOrigin::TieBreak
        } else {
            EdgeOrigin::Temporal
        };
        AdvantageEdge {
            from: first,
            to: second,
            origin,
            conflicting,
        }
    };

    let mut edges = Vec::new();
    for (k, &a) in vertices.iter().enumerate() {
        for &b in &vertices[k + 1..] {
            let edge = if p.directed.contains(&(a, b)) || p.directed.contains(&(b, a)) {
                let (from, to) = if p.directed.contains(&(a, b)) { (a, b) } else { (b, a) };
                AdvantageEdge {
                    from,
                    to,
                    origin: EdgeOrigin::Priority,
                    conflicting: true,
                }
            } else {
                by_arrival(a, b, p.double_edges.contains(&ordered(a, b)))
            };
            edges.push(edge);
        }
    }

    let mut graph = TemporalAdvantageGraph {
        vertices,
        edges,
        repaired: 0,
    };
    if !graph.is_acyclic() {
        // Conflict edges alone are acyclic: priorities strictly decrease or
        // stay equal with strictly increasing arrival rank. Order the
        // vertices by those edges, preferring earlier arrivals, and re-orient
        // only non-conflicting pairs to match.
        let order = topo_sort(
            &graph.vertices,
            graph.edges.iter().filter(|e| e.conflicting).map(|e| (e.from, e.to)),
            |v| rank[&v],
        )
        .ok_or(Error::CyclicGraph)?;
        let position: BTreeMap<_, _> = order.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        for e in graph.edges.iter_mut().filter(|e| !e.conflicting) {
            if position[&e.from] > position[&e.to] {
                std::mem::swap(&mut e.from, &mut e.to);
                graph.repaired += 1;
            }
        }
        log::warn!(
            "reversed {} non-conflicting edge(s) to break a passing-order cycle",
            graph.repaired
        );
    }
    Ok(graph)
}

/// Ordered list of aircraft crossing one zone.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PassingOrder(pub Vec<AircraftId>);

impl PassingOrder {
    pub fn position(&self, id: AircraftId) -> Option<usize> {
        self.0.iter().position(|&v| v == id)
    }
}

/// Longest path from `start` by dynamic programming over a topological order.
pub fn longest_walk(t: &TemporalAdvantageGraph, start: AircraftId) -> Result<PassingOrder> {
    let order = t.topological_order().ok_or(Error::CyclicGraph)?;
    if !t.vertices.contains(&start) {
        return Err(Error::MissingSlot(start));
    }
    let mut length: BTreeMap<AircraftId, usize> = BTreeMap::new();
    let mut pred: BTreeMap<AircraftId, AircraftId> = BTreeMap::new();
    length.insert(start, 0);
    for &v in &order {
        let Some(&lv) = length.get(&v) else { continue };
        for w in t.successors(v) {
            if length.get(&w).is_none_or(|&lw| lv + 1 > lw) {
                length.insert(w, lv + 1);
                pred.insert(w, v);
            }
        }
    }
    let (&end, _) = length
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .expect("start is reachable from itself");
    let mut walk = vec![end];
    while let Some(&p) = pred.get(walk.last().unwrap()) {
        walk.push(p);
    }
    walk.reverse();
    if walk.len() != t.vertices.len() {
        return Err(Error::IncompleteWalk {
            start,
            covered: walk.len(),
            total: t.vertices.len(),
        });
    }
    Ok(PassingOrder(walk))
}

/// How consecutive aircraft in the passing order are separated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSpacing {
    /// Next entry no earlier than previous entry + `dt_safe`.
    #[default]
    Entry,
    /// Next entry no earlier than previous exit + `dt_safe`.
    Exit,
}

/// Resolved slots along `order`. Each aircraft keeps its crossing duration
/// and never enters before its own estimate.
pub fn assign_timeslots(
    order: &PassingOrder,
    initial: &[IntersectionSlot],
    dt_safe: f64,
    spacing: SlotSpacing,
) -> Result<Vec<IntersectionSlot>> {
    ensure(dt_safe > 0.0, "dt_safe", || format!("{dt_safe} must be positive"))?;
    let by_id = index_slots(initial)?;
    let mut resolved: Vec<IntersectionSlot> = Vec::with_capacity(order.0.len());
    for &id in &order.0 {
        let est = by_id.get(&id).ok_or(Error::MissingSlot(id))?;
        let t_in = match resolved.last() {
            None => est.t_in,
            Some(prev) => {
                let anchor = match spacing {
                    SlotSpacing::Entry => prev.t_in,
                    SlotSpacing::Exit => prev.t_out,
                };
                est.t_in.max(anchor + dt_safe)
            }
        };
        resolved.push(IntersectionSlot {
            aircraft: id,
            t_in,
            t_out: t_in + est.duration(),
        });
    }
    Ok(resolved)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub order: PassingOrder,
    /// In passing order.
    pub resolved: Vec<IntersectionSlot>,
    pub conflict_graph: ConflictGraph,
    pub advantage_graph: TemporalAdvantageGraph,
}

impl Resolution {
    pub fn slot(&self, id: AircraftId) -> Option<&IntersectionSlot> {
        self.resolved.iter().find(|s| s.aircraft == id)
    }
}

pub fn resolve_intersection(
    slots: &[IntersectionSlot],
    priorities: &BTreeMap<AircraftId, u32>,
    dt_safe: f64,
    seed: u64,
    spacing: SlotSpacing,
) -> Result<Resolution> {
    let conflict_graph = build_conflict_graph(slots)?;
    if conflict_graph.vertices.is_empty() {
        return Ok(Resolution {
            order: PassingOrder::default(),
            resolved: Vec::new(),
            conflict_graph,
            advantage_graph: TemporalAdvantageGraph::default(),
        });
    }
    let priority_graph = build_priority_graph(&conflict_graph, priorities)?;
    let advantage_graph = build_temporal_advantage_graph(&priority_graph, slots, seed)?;
    let start = advantage_graph.source().ok_or(Error::CyclicGraph)?;
    let order = longest_walk(&advantage_graph, start)?;
    let resolved = assign_timeslots(&order, slots, dt_safe, spacing)?;
    Ok(Resolution {
        order,
        resolved,
        conflict_graph,
        advantage_graph,
    })
}
