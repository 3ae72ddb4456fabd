//! Minimum-snap reference trajectories.
//!
//! Each axis is an independent piecewise polynomial in local segment time
//! `t - t_k` with `poly_order` coefficients per segment. Coefficients are
//! chosen to minimize the summed integral of the squared `derivative`-th
//! derivative subject to waypoint interpolation, boundary derivatives and
//! continuity of derivatives `1..derivative-1` at interior knots.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conflict::{arc_lengths, dist, point_at_arc, AircraftId, ZoneCrossing};
use crate::dynamics::{wrap_angle, AircraftState, Point};
use crate::error::{ensure, Error, Result};
use crate::qp::{solve_eq_qp, QpStatus};

/// Reference trajectories share the aircraft state layout.
pub type ReferenceState = AircraftState;

/// Below this speed the reference heading is carried over from a neighbouring time.
pub const SPEED_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedWaypoint {
    pub position: Point,
    pub time: f64,
}

/// Derivative values (orders `1..derivative`) imposed at the first and last knot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundaryConditions {
    /// `start[d - 1]` is the `d`-th derivative at the first knot.
    pub start: Vec<Point>,
    pub end: Vec<Point>,
}

impl BoundaryConditions {
    pub fn rest_to_rest(derivative: usize) -> Self {
        let zeros = vec![[0.0, 0.0]; derivative.saturating_sub(1)];
        Self {
            start: zeros.clone(),
            end: zeros,
        }
    }

    /// Given end velocities, all higher derivatives zero.
    pub fn with_velocities(derivative: usize, start: Point, end: Point) -> Self {
        let mut bc = Self::rest_to_rest(derivative);
        if derivative >= 2 {
            bc.start[0] = start;
            bc.end[0] = end;
        }
        bc
    }
}

/// Piecewise polynomial curve in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySpline {
    /// Coefficients per segment (`N_p`).
    pub poly_order: usize,
    /// Minimized derivative order `r`.
    pub derivative: usize,
    /// Segment boundary times, one more than the segment count.
    pub knots: Vec<f64>,
    /// `coeffs[axis][segment][i]` multiplies `(t - knots[segment])^i`.
    pub coeffs: [Vec<Vec<f64>>; 2],
    /// Optimal objective, summed over both axes.
    pub cost: f64,
    pub kkt_residual: f64,
}

/// `i! / (i - d)!`, the factor in the `d`-th derivative of `t^i`.
fn falling(i: usize, d: usize) -> f64 {
    if d > i {
        return 0.0;
    }
    ((i - d + 1)..=i).map(|k| k as f64).product()
}

fn eval_poly(c: &[f64], tau: f64, d: usize) -> f64 {
    let mut acc = 0.0;
    for i in (d..c.len()).rev() {
        acc = acc * tau + falling(i, d) * c[i];
    }
    acc
}

impl PolySpline {
    pub fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().expect("at least two knots")
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let t = t.clamp(self.t_start(), self.t_end());
        let k = match self.knots.partition_point(|&kt| kt <= t) {
            0 => 0,
            p => (p - 1).min(self.segments() - 1),
        };
        (k, t - self.knots[k])
    }

    /// `d`-th derivative of both axes at `t`, clamped to the spline's span.
    pub fn eval(&self, t: f64, d: usize) -> Point {
        let (k, tau) = self.locate(t);
        [eval_poly(&self.coeffs[0][k], tau, d), eval_poly(&self.coeffs[1][k], tau, d)]
    }

    /// `d`-th derivative of segment `k` at local time `tau` (no clamping).
    pub fn eval_segment(&self, k: usize, tau: f64, d: usize) -> Point {
        [eval_poly(&self.coeffs[0][k], tau, d), eval_poly(&self.coeffs[1][k], tau, d)]
    }

    pub fn position(&self, t: f64) -> Point {
        self.eval(t, 0)
    }

    /// Copy with every knot shifted by `dt`.
    pub fn shifted(&self, dt: f64) -> Self {
        let mut out = self.clone();
        out.knots.iter_mut().for_each(|k| *k += dt);
        out
    }
}

/// Gram matrix `H` with `aᵀHa = ∫₀^T (P⁽ʳ⁾(t))² dt` for monomial coefficients `a`.
pub fn snap_cost_matrix(duration: f64, poly_order: usize, derivative: usize) -> Result<DMatrix<f64>> {
    if poly_order < 2 * derivative {
        return Err(Error::UnderParameterized {
            poly_order,
            derivative,
        });
    }
    ensure(duration > 0.0 && duration.is_finite(), "duration", || {
        format!("{duration} must be positive")
    })?;
    let r = derivative;
    let mut h = DMatrix::zeros(poly_order, poly_order);
    for i in r..poly_order {
        for j in r..poly_order {
            let p = (i + j + 1 - 2 * r) as f64;
            h[(i, j)] = falling(i, r) * falling(j, r) * duration.powf(p) / p;
        }
    }
    Ok(h)
}

/// Minimum-snap spline through timed waypoints.
pub fn min_snap(
    waypoints: &[TimedWaypoint],
    poly_order: usize,
    derivative: usize,
    boundary: &BoundaryConditions,
) -> Result<PolySpline> {
    if poly_order < 2 * derivative {
        return Err(Error::UnderParameterized {
            poly_order,
            derivative,
        });
    }
    ensure(derivative >= 1, "derivative", || "must be at least 1".into())?;
    ensure(waypoints.len() >= 2, "waypoints", || {
        format!("need at least 2, got {}", waypoints.len())
    })?;
    for (k, w) in waypoints.windows(2).enumerate() {
        if !(w[1].time > w[0].time) {
            return Err(Error::NonIncreasingTimes {
                index: k + 1,
                prev: w[0].time,
                next: w[1].time,
            });
        }
    }
    for side in [&boundary.start, &boundary.end] {
        ensure(side.len() == derivative - 1, "boundary", || {
            format!("expected {} derivative values per end, got {}", derivative - 1, side.len())
        })?;
    }

    let knots: Vec<f64> = waypoints.iter().map(|w| w.time).collect();
    let durations: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let segs = durations.len();
    let np = poly_order;
    let r = derivative;
    let nvar = segs * np;

    // Work in normalized time tau = (t - t_k) / T_k on [0, 1]: with
    // coefficients b_i = a_i T^i, the d-th derivative is T^-d Q^(d)(tau)
    // and the segment cost is T^(1 - 2r) bᵀ H₁ b.
    let h_unit = snap_cost_matrix(1.0, np, r)?;
    let mut h = DMatrix::zeros(nvar, nvar);
    let weights: Vec<f64> = durations.iter().map(|&t| t.powi(1 - 2 * r as i32)).collect();
    let scale = weights.iter().cloned().fold(0.0, f64::max);
    for (k, w) in weights.iter().enumerate() {
        h.view_mut((k * np, k * np), (np, np)).copy_from(&(&h_unit * (w / scale)));
    }

    let row_at = |tau: f64, d: usize| -> Vec<f64> {
        (0..np)
            .map(|i| if i < d { 0.0 } else { falling(i, d) * tau.powi((i - d) as i32) })
            .collect()
    };

    let mut coeffs: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut cost = 0.0;
    let mut kkt_residual: f64 = 0.0;
    for axis in 0..2 {
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        for k in 0..segs {
            let at0 = row_at(0.0, 0);
            let at1 = row_at(1.0, 0);
            rows.push((at0.iter().enumerate().map(|(i, &c)| (k * np + i, c)).collect(), waypoints[k].position[axis]));
            rows.push((at1.iter().enumerate().map(|(i, &c)| (k * np + i, c)).collect(), waypoints[k + 1].position[axis]));
        }
        for d in 1..r {
            let first = row_at(0.0, d);
            rows.push((
                first.iter().enumerate().map(|(i, &c)| (i, c)).collect(),
                boundary.start[d - 1][axis] * durations[0].powi(d as i32),
            ));
            let last = row_at(1.0, d);
            let k = segs - 1;
            rows.push((
                last.iter().enumerate().map(|(i, &c)| (k * np + i, c)).collect(),
                boundary.end[d - 1][axis] * durations[k].powi(d as i32),
            ));
        }
        for k in 0..segs.saturating_sub(1) {
            let (ta, tb) = (durations[k], durations[k + 1]);
            let mid = 0.5 * (ta + tb);
            for d in 1..r {
                let left = row_at(1.0, d);
                let right = row_at(0.0, d);
                let fa = (mid / ta).powi(d as i32);
                let fb = (mid / tb).powi(d as i32);
                let mut row: Vec<(usize, f64)> = left.iter().enumerate().map(|(i, &c)| (k * np + i, c * fa)).collect();
                row.extend(right.iter().enumerate().map(|(i, &c)| ((k + 1) * np + i, -c * fb)));
                rows.push((row, 0.0));
            }
        }

        let mut a = DMatrix::zeros(rows.len(), nvar);
        let mut b = DVector::zeros(rows.len());
        for (ri, (row, rhs)) in rows.iter().enumerate() {
            for &(ci, c) in row {
                a[(ri, ci)] += c;
            }
            b[ri] = *rhs;
        }
        let sol = solve_eq_qp(&h, &DVector::zeros(nvar), &a, &b);
        if sol.status != QpStatus::Optimal {
            return Err(Error::SingularKkt(
                sol.diagnostic.unwrap_or_else(|| "trajectory QP failed".into()),
            ));
        }
        kkt_residual = kkt_residual.max(sol.kkt_residual);

        let mut axis_coeffs = Vec::with_capacity(segs);
        for k in 0..segs {
            let bk = sol.z.rows(k * np, np);
            let ak: Vec<f64> = (0..np).map(|i| bk[i] / durations[k].powi(i as i32)).collect();
            let hk = snap_cost_matrix(durations[k], np, r)?;
            let av = DVector::from_column_slice(&ak);
            cost += av.dot(&(&hk * &av));
            axis_coeffs.push(ak);
        }
        coeffs[axis] = axis_coeffs;
    }

    Ok(PolySpline {
        poly_order: np,
        derivative: r,
        knots,
        coeffs,
        cost,
        kkt_residual,
    })
}

fn heading_at(spline: &PolySpline, t: f64) -> Option<f64> {
    let d = spline.eval(t, 1);
    (d[0].hypot(d[1]) >= SPEED_EPS).then(|| d[1].atan2(d[0]))
}

/// Reference state at `t`, clamped to the spline's time span.
///
/// Heading follows the velocity direction. Where the curve is (nearly) at
/// rest the heading of the closest earlier moving instant is kept, or the
/// first later one if the curve has not yet moved.
pub fn sample_reference(spline: &PolySpline, t: f64) -> ReferenceState {
    let t = t.clamp(spline.t_start(), spline.t_end());
    let p = spline.eval(t, 0);
    let d = spline.eval(t, 1);
    let v = d[0].hypot(d[1]);
    let theta = if v >= SPEED_EPS {
        d[1].atan2(d[0])
    } else {
        const PROBE: f64 = 0.02;
        let span = spline.t_end() - spline.t_start();
        let steps = (span / PROBE).ceil() as usize;
        (1..=steps)
            .map(|k| t - k as f64 * PROBE)
            .take_while(|&s| s >= spline.t_start())
            .find_map(|s| heading_at(spline, s))
            .or_else(|| {
                (1..=steps)
                    .map(|k| t + k as f64 * PROBE)
                    .take_while(|&s| s <= spline.t_end())
                    .find_map(|s| heading_at(spline, s))
            })
            .unwrap_or(0.0)
    };
    AircraftState {
        px: p[0],
        py: p[1],
        theta: wrap_angle(theta),
        v,
    }
}

/// Resolved crossing of one zone, pinned into the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZonePin {
    pub crossing: ZoneCrossing,
    pub t_in: f64,
    pub t_out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    pub poly_order: usize,
    pub derivative: usize,
    /// Speed at the first knot along the first route leg; `None` = operating speed.
    pub start_speed: Option<f64>,
    /// Speed at the last knot along the last route leg; `None` = operating speed.
    pub end_speed: Option<f64>,
    /// Route vertices closer than this to a pinned zone point are dropped.
    pub merge_distance: f64,
    /// Longer stretches between waypoints are split; `None` keeps them whole.
    pub max_segment_length: Option<f64>,
    /// Speed changes used to time waypoints ahead of a delayed zone (m/s²).
    pub timing_acceleration: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            poly_order: 8,
            derivative: 4,
            start_speed: None,
            end_speed: None,
            merge_distance: 0.25,
            max_segment_length: Some(0.25),
            timing_acceleration: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RoutePoint {
    s: f64,
    position: Point,
    pin: Option<f64>,
}

/// Timed waypoints for a route: unpinned points at arc-length ETA, zone
/// entry/exit points at their resolved times. Delay ahead of a pinned point
/// is spread uniformly (in arc length) back to the previous pinned point or
/// the start. Stretches longer than `options.max_segment_length` get
/// evenly spaced intermediate points on the route.
pub fn timed_route(
    aircraft: AircraftId,
    route: &[Point],
    pins: &[ZonePin],
    operating_speed: f64,
    t_start: f64,
    options: &ReferenceOptions,
) -> Result<Vec<TimedWaypoint>> {
    let merge_distance = options.merge_distance;
    ensure(options.timing_acceleration > 0.0, "timing_acceleration", || {
        format!("{} must be positive", options.timing_acceleration)
    })?;
    if let Some(max_len) = options.max_segment_length {
        ensure(max_len > 0.0, "max_segment_length", || format!("{max_len} must be positive"))?;
    }
    ensure(route.len() >= 2, "route", || {
        format!("aircraft {aircraft}: need at least 2 waypoints, got {}", route.len())
    })?;
    ensure(operating_speed > 0.0, "operating_speed", || {
        format!("{operating_speed} must be positive")
    })?;
    let s = arc_lengths(route);
    let total = *s.last().unwrap();
    let mut points: Vec<RoutePoint> = route
        .iter()
        .zip(&s)
        .map(|(&position, &s)| RoutePoint { s, position, pin: None })
        .collect();
    for pin in pins {
        for (si, p, t) in [
            (pin.crossing.s_in, pin.crossing.entry, pin.t_in),
            (pin.crossing.s_out, pin.crossing.exit, pin.t_out),
        ] {
            // Endpoints that already lie on the zone boundary keep their ETA role.
            if si <= 1e-9 || si >= total - 1e-9 {
                continue;
            }
            points.push(RoutePoint {
                s: si,
                position: p,
                pin: Some(t),
            });
        }
    }
    points.sort_by(|a, b| a.s.total_cmp(&b.s));
    let last = points.len() - 1;
    let pinned: Vec<RoutePoint> = points.iter().copied().filter(|p| p.pin.is_some()).collect();
    let points: Vec<RoutePoint> = points
        .into_iter()
        .enumerate()
        .filter(|(k, p)| {
            p.pin.is_some()
                || *k == 0
                || *k == last
                || pinned.iter().all(|q| (q.s - p.s).abs() >= merge_distance)
        })
        .map(|(_, p)| p)
        .collect();
    let points = match options.max_segment_length {
        Some(max_len) => subdivide(route, &points, max_len),
        None => points,
    };

    let mut times = vec![0.0; points.len()];
    times[0] = t_start;
    let mut anchor = 0;
    for k in 1..points.len() {
        let eta = times[anchor] + (points[k].s - points[anchor].s) / operating_speed;
        match points[k].pin {
            None => times[k] = eta,
            Some(t_pin) => {
                // Unpinned points since the anchor were placed at ETA; the
                // earliest arrival here is therefore `eta`.
                if t_pin < eta - 1e-6 {
                    return Err(Error::InfeasibleSlot {
                        aircraft,
                        zone: pins
                            .iter()
                            .find(|p| p.t_in == t_pin || p.t_out == t_pin)
                            .map_or(0, |p| p.crossing.zone),
                        requested: t_pin,
                        earliest: eta,
                    });
                }
                let span = points[k].s - points[anchor].s;
                let duration = t_pin - times[anchor];
                let v_from = if anchor == 0 {
                    options.start_speed.unwrap_or(operating_speed)
                } else {
                    operating_speed
                };
                let profile = SpeedProfile::fit(v_from, operating_speed, options.timing_acceleration, span, duration);
                for j in anchor + 1..k {
                    let ds = points[j].s - points[anchor].s;
                    times[j] = times[anchor]
                        + match &profile {
                            Some(p) => p.time_at(ds),
                            None => ds / span * duration,
                        };
                }
                times[k] = t_pin.max(eta);
                anchor = k;
            }
        }
    }
    Ok(points
        .iter()
        .zip(times)
        .map(|(p, time)| TimedWaypoint {
            position: p.position,
            time,
        })
        .collect())
}

/// Speed ramps from `v0` to a cruise speed, cruises, then ramps to `v1`,
/// covering `length` in exactly `duration`.
#[derive(Debug, Clone, Copy)]
struct SpeedProfile {
    v0: f64,
    v1: f64,
    cruise: f64,
    accel: f64,
    t1: f64,
    t2: f64,
    duration: f64,
}

impl SpeedProfile {
    fn with_cruise(v0: f64, v1: f64, cruise: f64, accel: f64, duration: f64) -> Option<Self> {
        let t1 = (cruise - v0).abs() / accel;
        let t2 = duration - (v1 - cruise).abs() / accel;
        (t1 <= t2).then_some(Self {
            v0,
            v1,
            cruise,
            accel,
            t1,
            t2,
            duration,
        })
    }

    fn fit(v0: f64, v1: f64, accel: f64, length: f64, duration: f64) -> Option<Self> {
        if length <= 0.0 || duration <= 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (0.0, v0.max(v1) + 2.0 * length / duration);
        let mut best = None;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            match Self::with_cruise(v0, v1, mid, accel, duration) {
                Some(p) if p.distance(duration) <= length => {
                    best = Some(p);
                    lo = mid;
                }
                Some(_) => hi = mid,
                None if mid < v0.min(v1) => lo = mid,
                None => hi = mid,
            }
        }
        // Nearly stopped profiles leave the waypoint times ill-defined.
        best.filter(|p| p.cruise > 1e-3 && (p.distance(duration) - length).abs() <= 1e-9 * (1.0 + length))
    }

    fn speed(&self, t: f64) -> f64 {
        if t <= self.t1 {
            self.v0 + (self.cruise - self.v0).signum() * self.accel * t
        } else if t <= self.t2 {
            self.cruise
        } else {
            self.cruise + (self.v1 - self.cruise).signum() * self.accel * (t - self.t2)
        }
    }

    fn distance(&self, t: f64) -> f64 {
        let a = t.min(self.t1);
        let mut d = 0.5 * (self.v0 + self.speed(a)) * a;
        if t > self.t1 {
            d += self.cruise * (t.min(self.t2) - self.t1);
        }
        if t > self.t2 {
            d += 0.5 * (self.cruise + self.speed(t)) * (t - self.t2);
        }
        d
    }

    fn time_at(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, self.duration);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.distance(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn subdivide(route: &[Point], points: &[RoutePoint], max_len: f64) -> Vec<RoutePoint> {
    let mut out = vec![points[0]];
    for w in points.windows(2) {
        let span = w[1].s - w[0].s;
        let pieces = (span / max_len).ceil().max(1.0) as usize;
        for j in 1..pieces {
            let s = w[0].s + span * j as f64 / pieces as f64;
            out.push(RoutePoint {
                s,
                position: point_at_arc(route, s),
                pin: None,
            });
        }
        out.push(w[1]);
    }
    out
}

fn unit(from: Point, to: Point) -> Point {
    let d = dist(from, to);
    if d == 0.0 {
        [0.0, 0.0]
    } else {
        [(to[0] - from[0]) / d, (to[1] - from[1]) / d]
    }
}

/// Reference spline for a route with zone crossings pinned to their slots.
pub fn build_reference(
    aircraft: AircraftId,
    route: &[Point],
    pins: &[ZonePin],
    operating_speed: f64,
    t_start: f64,
    options: &ReferenceOptions,
) -> Result<PolySpline> {
    let waypoints = timed_route(aircraft, route, pins, operating_speed, t_start, options)?;
    let n = route.len();
    let v0 = options.start_speed.unwrap_or(operating_speed);
    let v1 = options.end_speed.unwrap_or(operating_speed);
    let d0 = unit(route[0], route[1]);
    let d1 = unit(route[n - 2], route[n - 1]);
    let boundary = BoundaryConditions::with_velocities(
        options.derivative,
        [v0 * d0[0], v0 * d0[1]],
        [v1 * d1[0], v1 * d1[1]],
    );
    min_snap(&waypoints, options.poly_order, options.derivative, &boundary)
}
