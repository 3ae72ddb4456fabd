//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if a hard criterion fails. Criterion 8 is soft: a miss prints
//! SOFT-FAIL without failing the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use autotaxi::conflict::{
    arrival_ranks, in_spatial_conflict, resolve_intersection, AircraftId, ConflictZone, IntersectionSlot,
    SlotSpacing,
};
use autotaxi::dynamics::{dynamics_jacobians, step_dynamics, AircraftParams, AircraftState, ControlInput, Obstacle};
use autotaxi::mpc::{cbf_h, cbf_residual, MpcConfig, MpcController};
use autotaxi::qp::{solve_qp, QuadProgram};
use autotaxi::sim::{run_outcome, AircraftSpec, ObstacleSpec, Outcome, Policy, Scenario, SimLog};
use autotaxi::trajectory::{min_snap, sample_reference, BoundaryConditions, PolySpline, TimedWaypoint};
use autotaxi_cli::artifacts::{trajectory_table, TRAJECTORY_FILE};
use autotaxi_cli::commands::compare_in_memory;
use autotaxi_cli::{load_scenario, Overrides};
use nalgebra::{DMatrix, DVector, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const ACC_VAR_RATIO: f64 = 0.8;
const CBF_SLACK_TOL: f64 = 1e-6;
const CBF_H_TOL: f64 = -1e-6;
const DECAY_TOL: f64 = 1e-9;
const CONFLICT_INSTANCES: usize = 1000;
const SNAP_COEFF_TOL: f64 = 1e-6;
const SNAP_COST_REL: f64 = 1e-6;
const KNOT_TOL: f64 = 1e-6;
const JACOBIAN_REL: f64 = 1e-5;
const KKT_STATIONARITY: f64 = 1e-7;
const KKT_PRIMAL: f64 = 1e-8;
const KKT_DUAL: f64 = 1e-8;
const KKT_COMPLEMENTARITY: f64 = 1e-7;
const ORACLE_AGREEMENT: f64 = 1e-6;
const TRACKING_RMS: f64 = 0.1;
const SOLVE_MEDIAN: Duration = Duration::from_millis(50);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn shipped(name: &str) -> Scenario {
    load_scenario(&scenarios_dir().join(name), &Overrides::default()).expect("shipped scenario loads")
}

// 1 ------------------------------------------------------------------------

struct Comparison {
    rows: Vec<autotaxi_cli::artifacts::ComparisonRow>,
    safe_taxi_trajectory: String,
}

fn compare_shipped() -> Comparison {
    let (rows, runs) = compare_in_memory(&shipped("four_way.toml")).expect("comparison runs");
    let safe_taxi_trajectory = runs
        .iter()
        .find(|(p, _, _)| *p == Policy::SafeTaxi)
        .and_then(|(_, _, a)| a.get(TRAJECTORY_FILE))
        .expect("safe_taxi trajectory")
        .to_string();
    Comparison {
        rows,
        safe_taxi_trajectory,
    }
}

fn table_ordering(c: &Comparison) -> Verdict {
    let row = |p: Policy| c.rows.iter().find(|r| r.policy == p).expect("row per policy");
    let (safe, wait, naive) = (row(Policy::SafeTaxi), row(Policy::WaitAndGo), row(Policy::Naive));
    let (Some(t_safe), Some(t_wait)) = (safe.comp_time, wait.comp_time) else {
        return Verdict::new(
            false,
            format!("safe_taxi {:?} / wait_and_go {:?} did not complete", safe.comp_time, wait.comp_time),
        );
    };
    let ratio = safe.avg_acc_var / wait.avg_acc_var;
    let naive_fails = naive.deadlock || naive.safety_violations > 0;
    let pass = t_safe < t_wait && ratio <= ACC_VAR_RATIO && naive_fails && safe.safety_violations == 0;
    Verdict::new(
        pass,
        format!(
            "comp_time {t_safe:.1} s vs {t_wait:.1} s; avg_acc_var {:.4} vs {:.4} (ratio {ratio:.3} <= {ACC_VAR_RATIO}); naive deadlock={} violations={}",
            safe.avg_acc_var, wait.avg_acc_var, naive.deadlock, naive.safety_violations
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn random_crossing(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aircraft = vec![
        AircraftSpec {
            id: AircraftId(1),
            params: AircraftParams::default(),
            route: vec![[-4.0, 0.0], [3.5, 0.0]],
            initial_speed: 0.5,
        },
        AircraftSpec {
            id: AircraftId(2),
            params: AircraftParams {
                priority: rng.random_range(0..2),
                ..AircraftParams::default()
            },
            route: vec![[0.0, -4.0 - rng.random_range(0.0..1.0)], [0.0, 3.5]],
            initial_speed: 0.5,
        },
    ];
    let zone = ConflictZone {
        id: 0,
        center: [0.0, 0.0],
        radius: 1.0,
    };
    let mut s = Scenario::new(format!("cbf-{seed}"), aircraft, vec![zone]);
    s.seed = seed;
    s.max_sim_time = 45.0;
    // One obstacle drifting across each route, away from the start points.
    for (along, across) in [(0usize, 1usize), (1, 0)] {
        let mut position = [0.0; 2];
        position[along] = rng.random_range(-2.5..2.0);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        position[across] = side * rng.random_range(0.8..1.6);
        let mut velocity = [0.0; 2];
        velocity[across] = -side * rng.random_range(0.03..0.12);
        velocity[along] = rng.random_range(-0.03..0.03);
        s.obstacles.push(ObstacleSpec {
            obstacle: Obstacle {
                position,
                radius: rng.random_range(0.15..0.3),
                velocity,
            },
            spawn_time: rng.random_range(0.0..4.0),
        });
    }
    s
}

/// Barrier series of every (aircraft, other) pair, `None` where undefined.
fn barrier_series(log: &SimLog) -> Vec<Vec<Option<f64>>> {
    let mut out = Vec::new();
    for info in &log.aircraft {
        for j in 0..log.obstacle_radii.len() {
            out.push(
                log.steps
                    .iter()
                    .map(|s| s.get(info.id).and_then(|r| r.obstacle_h[j]))
                    .collect(),
            );
        }
        for other in log.aircraft.iter().filter(|o| o.id != info.id) {
            let radius = info.body_radius + other.body_radius;
            out.push(
                log.steps
                    .iter()
                    .map(|s| match (s.get(info.id), s.get(other.id)) {
                        (Some(a), Some(b)) => Some(cbf_h(&a.state, b.state.position(), radius, log.d_safe)),
                        _ => None,
                    })
                    .collect(),
            );
        }
    }
    out
}

fn cbf_invariance() -> Verdict {
    let mut clean_runs = 0;
    let mut slack_runs = 0;
    let mut worst_h = f64::INFINITY;
    let mut segments = 0;
    let mut decay_failures = 0;
    for seed in 0..20 {
        let outcome = run_outcome(&random_crossing(seed)).expect("run completes");
        let log = &outcome.log;
        if outcome.metrics.max_slack > CBF_SLACK_TOL {
            slack_runs += 1;
            continue;
        }
        clean_runs += 1;
        worst_h = worst_h.min(outcome.metrics.min_h.unwrap_or(f64::INFINITY));
        let gamma = log.gamma;
        for series in barrier_series(log) {
            let mut k = 0;
            while k < series.len() {
                let Some(h0) = series[k].filter(|h| *h >= 0.0) else {
                    k += 1;
                    continue;
                };
                let mut end = k;
                while end + 1 < series.len() {
                    match (series[end], series[end + 1]) {
                        (Some(a), Some(b)) if cbf_residual(b, a, gamma) >= 0.0 => end += 1,
                        _ => break,
                    }
                }
                if end > k {
                    segments += 1;
                    for (l, h) in series[k..=end].iter().enumerate() {
                        let bound = (1.0 - gamma).powi(l as i32) * h0;
                        if h.unwrap() < bound - DECAY_TOL * h0.max(1.0) {
                            decay_failures += 1;
                        }
                    }
                }
                k = end + 1;
            }
        }
    }
    let pass = clean_runs > 0 && worst_h >= CBF_H_TOL && decay_failures == 0 && segments > 0;
    Verdict::new(
        pass,
        format!(
            "{clean_runs} slack-free runs ({slack_runs} with slack), min h {worst_h:.4}; {segments} residual-nonnegative segments, {decay_failures} decay violations"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Passing order by exhaustive search: the permutation that agrees with
/// every pairwise advantage, or, if the advantages are cyclic, the
/// arrival-lexicographically smallest one that agrees on conflicting pairs.
fn oracle_order(slots: &[IntersectionSlot], prio: &BTreeMap<AircraftId, u32>, seed: u64) -> Vec<AircraftId> {
    let n = slots.len();
    let ranks = arrival_ranks(slots, seed);
    let rank = |i: usize| ranks[&slots[i].aircraft];
    let conflicting = |i: usize, j: usize| in_spatial_conflict(&slots[i], &slots[j]) || in_spatial_conflict(&slots[j], &slots[i]);
    // Whether i must precede j, and whether that is a conflict constraint.
    let before = |i: usize, j: usize| -> (bool, bool) {
        let c = conflicting(i, j);
        let (pi, pj) = (prio[&slots[i].aircraft], prio[&slots[j].aircraft]);
        if c && pi != pj {
            (pi < pj, true)
        } else {
            (rank(i) < rank(j), c)
        }
    };
    let perms = permutations(n);
    let agrees = |p: &[usize], conflicts_only: bool| {
        (0..n).all(|a| {
            (a + 1..n).all(|b| {
                let (first, hard) = before(p[a], p[b]);
                first || (conflicts_only && !hard)
            })
        })
    };
    let full: Vec<&Vec<usize>> = perms.iter().filter(|p| agrees(p, false)).collect();
    let chosen = if let Some(p) = full.first() {
        assert_eq!(full.len(), 1, "a tournament has at most one Hamiltonian order");
        (*p).clone()
    } else {
        perms
            .iter()
            .filter(|p| agrees(p, true))
            .min_by_key(|p| p.iter().map(|&i| rank(i)).collect::<Vec<_>>())
            .expect("conflict constraints are acyclic")
            .clone()
    };
    chosen.iter().map(|&i| slots[i].aircraft).collect()
}

fn oracle_slots(order: &[AircraftId], slots: &[IntersectionSlot], dt_safe: f64, spacing: SlotSpacing) -> Vec<IntersectionSlot> {
    let mut out: Vec<IntersectionSlot> = Vec::new();
    for id in order {
        let est = slots.iter().find(|s| s.aircraft == *id).unwrap();
        let earliest = out.last().map_or(est.t_in, |p| {
            est.t_in.max(
                match spacing {
                    SlotSpacing::Entry => p.t_in,
                    SlotSpacing::Exit => p.t_out,
                } + dt_safe,
            )
        });
        out.push(IntersectionSlot {
            aircraft: *id,
            t_in: earliest,
            t_out: earliest + (est.t_out - est.t_in),
        });
    }
    out
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<IntersectionSlot>, BTreeMap<AircraftId, u32>) {
    let slots: Vec<IntersectionSlot> = (0..n)
        .map(|k| {
            // Half-second grid so that exact ties occur.
            let t_in = rng.random_range(0..20) as f64 * 0.5;
            IntersectionSlot {
                aircraft: AircraftId(k as u32 + 1),
                t_in,
                t_out: t_in + rng.random_range(1..8) as f64 * 0.5,
            }
        })
        .collect();
    let prio = slots.iter().map(|s| (s.aircraft, rng.random_range(0..3))).collect();
    (slots, prio)
}

fn conflict_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for k in 0..CONFLICT_INSTANCES {
        let n = rng.random_range(1..=4);
        let (slots, prio) = random_instance(&mut rng, n);
        let dt_safe = rng.random_range(1..6) as f64 * 0.5;
        let spacing = if k % 2 == 0 { SlotSpacing::Entry } else { SlotSpacing::Exit };
        let seed = rng.random();
        let got = resolve_intersection(&slots, &prio, dt_safe, seed, spacing).expect("resolution succeeds");
        let order = oracle_order(&slots, &prio, seed);
        if got.order.0 != order || got.resolved != oracle_slots(&order, &slots, dt_safe, spacing) {
            mismatches += 1;
        }
    }

    let mut invariant_failures = 0;
    let mut checked = 0;
    for k in 0..1000 {
        let n = rng.random_range(1..=8);
        let (slots, prio) = random_instance(&mut rng, n);
        let dt_safe = rng.random_range(1..6) as f64 * 0.5;
        let spacing = if k % 2 == 0 { SlotSpacing::Entry } else { SlotSpacing::Exit };
        let got = resolve_intersection(&slots, &prio, dt_safe, rng.random(), spacing).expect("resolution succeeds");
        checked += 1;
        let r = &got.resolved;
        let gaps_ok = r.windows(2).all(|w| {
            let anchor = match spacing {
                SlotSpacing::Entry => w[0].t_in,
                SlotSpacing::Exit => w[0].t_out,
            };
            w[1].t_in - anchor >= dt_safe - 1e-12
        });
        let not_early = r
            .iter()
            .all(|s| s.t_in >= slots.iter().find(|e| e.aircraft == s.aircraft).unwrap().t_in);
        let precedence_ok = got.conflict_graph.edges.iter().all(|&(a, b)| {
            let (pa, pb) = (prio[&a], prio[&b]);
            let (ia, ib) = (got.order.position(a).unwrap(), got.order.position(b).unwrap());
            pa == pb || (pa < pb) == (ia < ib)
        });
        if !(gaps_ok && not_early && precedence_ok && r.len() == n) {
            invariant_failures += 1;
        }
    }
    Verdict::new(
        mismatches == 0 && invariant_failures == 0,
        format!(
            "{mismatches}/{CONFLICT_INSTANCES} mismatches against brute force (n <= 4); {invariant_failures}/{checked} invariant failures (n <= 8)"
        ),
    )
}

// 4 ------------------------------------------------------------------------

/// Rest-to-rest degree-7 segment from the 8 boundary conditions.
fn rest_to_rest_oracle(p0: f64, p1: f64, t: f64) -> Vec<f64> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SMatrix::<f64, 8, 1>::zeros();
    let falling = |i: usize, d: usize| (0..d).map(|k| (i - k) as f64).product::<f64>();
    for d in 0..4 {
        // Derivative d at tau = 0 only involves c_d.
        a[(d, d)] = falling(d, d);
        for i in d..8 {
            a[(4 + d, i)] = falling(i, d) * t.powi((i - d) as i32);
        }
    }
    b[0] = p0;
    b[4] = p1;
    a.lu().solve(&b).expect("boundary system is regular").iter().copied().collect()
}

fn snap_squared(s: &PolySpline, k: usize, tau: f64) -> f64 {
    let d = s.eval_segment(k, tau, s.derivative);
    d[0] * d[0] + d[1] * d[1]
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 40)
}

fn min_snap_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut coeff_err: f64 = 0.0;
    for _ in 0..20 {
        let p0 = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let p1 = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let t0 = rng.random_range(-2.0..2.0);
        let t1 = t0 + rng.random_range(0.5..6.0);
        let wps = [TimedWaypoint { position: p0, time: t0 }, TimedWaypoint { position: p1, time: t1 }];
        let s = min_snap(&wps, 8, 4, &BoundaryConditions::rest_to_rest(4)).expect("min snap solves");
        for axis in 0..2 {
            let oracle = rest_to_rest_oracle(p0[axis], p1[axis], t1 - t0);
            for (c, o) in s.coeffs[axis][0].iter().zip(&oracle) {
                coeff_err = coeff_err.max((c - o).abs() / o.abs().max(1.0));
            }
        }
    }

    let mut cost_err: f64 = 0.0;
    let mut knot_err: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(2..=6);
        let mut t = rng.random_range(0.0..3.0);
        let wps: Vec<TimedWaypoint> = (0..m)
            .map(|_| {
                let w = TimedWaypoint {
                    position: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                    time: t,
                };
                t += rng.random_range(0.5..3.0);
                w
            })
            .collect();
        let s = min_snap(&wps, 8, 4, &BoundaryConditions::rest_to_rest(4)).expect("min snap solves");
        let mut quad = 0.0;
        for k in 0..s.segments() {
            let len = s.knots[k + 1] - s.knots[k];
            let f = |tau: f64| snap_squared(&s, k, tau);
            let scale = f(0.0).abs() + f(len).abs() + f(0.5 * len).abs() + 1e-30;
            quad += adaptive_simpson(&f, 0.0, len, 1e-13 * scale * len);
        }
        cost_err = cost_err.max((s.cost - quad).abs() / quad.abs().max(1e-12));
        for (k, w) in wps.iter().enumerate() {
            let at = s.position(w.time);
            knot_err = knot_err.max((at[0] - w.position[0]).hypot(at[1] - w.position[1]));
            if k > 0 {
                let len = s.knots[k] - s.knots[k - 1];
                let left = s.eval_segment(k - 1, len, 0);
                knot_err = knot_err.max((left[0] - w.position[0]).hypot(left[1] - w.position[1]));
            }
        }
    }
    Verdict::new(
        coeff_err <= SNAP_COEFF_TOL && cost_err <= SNAP_COST_REL && knot_err <= KNOT_TOL,
        format!("coefficient error {coeff_err:.2e}; cost rel. error {cost_err:.2e}; knot error {knot_err:.2e} m"),
    )
}

// 5 ------------------------------------------------------------------------

fn jacobian_check(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = AircraftState::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(0.0..1.0),
        );
        let u = ControlInput::new(rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0));
        let (dt, length) = (rng.random_range(0.05..0.2), rng.random_range(0.3..1.5));
        let (a, b) = dynamics_jacobians(&x, &u, dt, length).unwrap();
        let f = |x: &AircraftState, u: &ControlInput| step_dynamics(x, u, dt, length).unwrap().to_vector();
        let h = 1e-6;
        let mut fd_a = nalgebra::Matrix4::zeros();
        for j in 0..4 {
            let mut xp = x.to_vector();
            let mut xm = x.to_vector();
            xp[j] += h;
            xm[j] -= h;
            let col = (f(&AircraftState::from_vector(&xp), &u) - f(&AircraftState::from_vector(&xm), &u)) / (2.0 * h);
            fd_a.set_column(j, &col);
        }
        let mut fd_b = nalgebra::Matrix4x2::zeros();
        for j in 0..2 {
            let mut up = u.to_vector();
            let mut um = u.to_vector();
            up[j] += h;
            um[j] -= h;
            let col = (f(&x, &ControlInput::new(up[0], up[1])) - f(&x, &ControlInput::new(um[0], um[1]))) / (2.0 * h);
            fd_b.set_column(j, &col);
        }
        worst = worst.max((a - fd_a).amax() / a.amax().max(1.0));
        worst = worst.max((b - fd_b).amax() / b.amax().max(1.0));
    }
    worst
}

/// Inequalities as rows `a z >= b`, bounds included.
fn inequality_rows(qp: &QuadProgram) -> (DMatrix<f64>, DVector<f64>) {
    let n = qp.dim();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..qp.a_in.nrows())
        .map(|i| (qp.a_in.row(i).iter().copied().collect(), qp.b_in[i]))
        .collect();
    for j in 0..n {
        if let Some(l) = qp.lower.as_ref().filter(|l| l[j].is_finite()) {
            let mut r = vec![0.0; n];
            r[j] = 1.0;
            rows.push((r, l[j]));
        }
        if let Some(u) = qp.upper.as_ref().filter(|u| u[j].is_finite()) {
            let mut r = vec![0.0; n];
            r[j] = -1.0;
            rows.push((r, -u[j]));
        }
    }
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    (a, b)
}

/// Minimizer by trying every active set.
fn exhaustive_qp(qp: &QuadProgram) -> Option<DVector<f64>> {
    let n = qp.dim();
    let (a_in, b_in) = inequality_rows(qp);
    let (m_eq, m_in) = (qp.a_eq.nrows(), a_in.nrows());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        let k = m_eq + active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        rhs.rows_mut(0, n).copy_from(&(-&qp.g));
        for r in 0..k {
            let (row, b) = if r < m_eq {
                (qp.a_eq.row(r).clone_owned(), qp.b_eq[r])
            } else {
                let i = active[r - m_eq];
                (a_in.row(i).clone_owned(), b_in[i])
            };
            for j in 0..n {
                kkt[(j, n + r)] = -row[j];
                kkt[(n + r, j)] = row[j];
            }
            rhs[n + r] = b;
        }
        let lu = kkt.clone().lu();
        let Some(sol) = lu.solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let z = sol.rows(0, n).clone_owned();
        let feasible = (0..m_in).all(|i| (a_in.row(i) * &z)[0] >= b_in[i] - 1e-9);
        let dual_ok = (0..active.len()).all(|r| sol[n + m_eq + r] >= -1e-9);
        if feasible && dual_ok {
            let obj = qp.objective(&z);
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, z));
            }
        }
    }
    best.map(|(_, z)| z)
}

fn random_qp(rng: &mut ChaCha8Rng) -> QuadProgram {
    let n = rng.random_range(2..=6);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    // A strictly feasible point keeps the problem feasible.
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let m_eq = rng.random_range(0..n.min(3));
    let a_eq = DMatrix::from_fn(m_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = &a_eq * &z0;
    let with_bounds = rng.random_bool(0.3);
    let max_rows = if with_bounds { 2 } else { 6 };
    let m_in = rng.random_range(0..=max_rows);
    let a_in = DMatrix::from_fn(m_in, n, |_, _| rng.random_range(-1.0..1.0));
    let b_in = &a_in * &z0 - DVector::from_fn(m_in, |_, _| rng.random_range(0.0..1.0));
    let mut qp = QuadProgram::new(h, g).with_equalities(a_eq, b_eq).with_inequalities(a_in, b_in);
    if with_bounds {
        // At most two finite bounds each side, so at most 6 inequalities in all.
        let pick = |rng: &mut ChaCha8Rng, sign: f64| {
            let mut v = DVector::from_element(n, sign * f64::INFINITY);
            for _ in 0..2 {
                let j = rng.random_range(0..n);
                v[j] = z0[j] + sign * rng.random_range(0.1..1.0);
            }
            v
        };
        let lower = pick(rng, -1.0);
        let upper = pick(rng, 1.0);
        qp = qp.with_bounds(Some(lower), Some(upper));
    }
    qp
}

fn solver_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let jac = jacobian_check(&mut rng);
    let mut kkt_failures = 0;
    let mut oracle_err: f64 = 0.0;
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let qp = random_qp(&mut rng);
        let sol = solve_qp(&qp, None);
        if !sol.is_optimal() {
            kkt_failures += 1;
            continue;
        }
        let z = &sol.z;
        let (a_in, b_in) = inequality_rows(&qp);
        // Multipliers of the bound rows, in the order `inequality_rows` lists them.
        let mut y: Vec<f64> = sol.y_in.iter().copied().collect();
        for j in 0..qp.dim() {
            if qp.lower.as_ref().is_some_and(|l| l[j].is_finite()) {
                y.push(sol.y_lower[j]);
            }
            if qp.upper.as_ref().is_some_and(|u| u[j].is_finite()) {
                y.push(sol.y_upper[j]);
            }
        }
        let y = DVector::from_vec(y);
        let stationarity = (&qp.h * z + &qp.g - qp.a_eq.transpose() * &sol.y_eq - a_in.transpose() * &y).amax();
        let slack = &a_in * z - &b_in;
        let mut primal = if qp.a_eq.nrows() > 0 { (&qp.a_eq * z - &qp.b_eq).amax() } else { 0.0 };
        primal = slack.iter().fold(primal, |p, s| p.max(-s));
        let dual = y.iter().fold(0.0f64, |d, v| d.max(-v));
        let comp = slack.iter().zip(y.iter()).fold(0.0f64, |c, (s, v)| c.max((s * v).abs()));
        for (w, v) in worst.iter_mut().zip([stationarity, primal, dual, comp]) {
            *w = w.max(v);
        }
        if stationarity > KKT_STATIONARITY || primal > KKT_PRIMAL || dual > KKT_DUAL || comp > KKT_COMPLEMENTARITY {
            kkt_failures += 1;
        }
        match exhaustive_qp(&qp) {
            Some(best) => oracle_err = oracle_err.max((z - best).amax()),
            None => oracle_err = f64::INFINITY,
        }
    }
    Verdict::new(
        jac <= JACOBIAN_REL && kkt_failures == 0 && oracle_err <= ORACLE_AGREEMENT,
        format!(
            "Jacobian rel. error {jac:.2e}; {kkt_failures}/100 KKT failures (worst stat {:.1e}, primal {:.1e}, dual {:.1e}, comp {:.1e}); active-set oracle gap {oracle_err:.2e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn tracking(outcome: &Outcome) -> Verdict {
    let id = outcome.log.aircraft[0].id;
    let spline = &outcome.plan.aircraft(id).unwrap().spline;
    let track = outcome.log.track(id);
    let mse = track
        .iter()
        .map(|(t, x)| {
            let r = sample_reference(spline, *t);
            (x.px - r.px).powi(2) + (x.py - r.py).powi(2)
        })
        .sum::<f64>()
        / track.len() as f64;
    let rms = mse.sqrt();
    let reached = outcome.log.goal_times().contains_key(&id);
    Verdict::new(
        rms <= TRACKING_RMS && reached,
        format!("position RMS {rms:.4} m; goal reached: {reached}"),
    )
}

// 7 ------------------------------------------------------------------------

fn determinism(c: &Comparison, single: &Outcome) -> Verdict {
    let again = run_outcome(&shipped("four_way.toml")).expect("rerun");
    let four_way_same = trajectory_table(&again.log) == c.safe_taxi_trajectory;
    let single_again = run_outcome(&shipped("single.toml")).expect("rerun");
    let single_same = trajectory_table(&single_again.log) == trajectory_table(&single.log);
    Verdict::new(
        four_way_same && single_same,
        format!("four_way byte-identical: {four_way_same}; single byte-identical: {single_same}"),
    )
}

// 8 ------------------------------------------------------------------------

fn solve_time() -> (Verdict, Duration) {
    let cfg = MpcConfig::default();
    let obstacles = [
        Obstacle::stationary([3.0, 0.6], 0.3),
        Obstacle::stationary([5.0, -0.7], 0.3),
        Obstacle {
            position: [2.0, -1.5],
            radius: 0.25,
            velocity: [0.0, 0.1],
        },
        Obstacle {
            position: [4.0, 1.5],
            radius: 0.25,
            velocity: [0.05, -0.1],
        },
    ];
    let mut ctl = MpcController::new(cfg);
    let mut x = AircraftState::new(0.0, 0.0, 0.0, 0.5);
    let mut times = Vec::new();
    for k in 0..100 {
        let t = k as f64 * cfg.dt;
        let reference: Vec<AircraftState> = (0..=cfg.horizon)
            .map(|l| AircraftState::new(0.5 * (t + l as f64 * cfg.dt), 0.0, 0.0, 0.5))
            .collect();
        let seen: Vec<Obstacle> = obstacles
            .iter()
            .map(|o| Obstacle {
                position: o.position_after(t),
                ..*o
            })
            .collect();
        let start = Instant::now();
        let (u, _) = ctl.control(&x, reference, &seen).expect("controller runs");
        times.push(start.elapsed());
        x = step_dynamics(&x, &u, cfg.dt, cfg.length).unwrap();
    }
    times.sort();
    let median = times[times.len() / 2];
    (
        Verdict::new(median <= SOLVE_MEDIAN, format!("median {:.2} ms over 100 steps (N = {})", median.as_secs_f64() * 1e3, cfg.horizon)),
        median,
    )
}

fn report(k: usize, name: &str, v: &Verdict, elapsed: Duration, soft: bool) {
    let status = match (v.pass, soft) {
        (true, _) => "PASS",
        (false, true) => "SOFT-FAIL",
        (false, false) => "FAIL",
    };
    println!("criterion {k} [{status}] {name}: {} ({:.1} s)", v.detail, elapsed.as_secs_f64());
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    // `cargo test -- <filter>` and `--list` are accepted and ignored, except
    // that listing prints nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut hard_failures = 0;
    let mut check = |k: usize, name: &str, v: Verdict, elapsed: Duration, soft: bool| {
        report(k, name, &v, elapsed, soft);
        if !v.pass && !soft {
            hard_failures += 1;
        }
    };

    let (comparison, t1) = timed(compare_shipped);
    check(1, "policy comparison ordering", table_ordering(&comparison), t1, false);
    let (v, t) = timed(cbf_invariance);
    check(2, "barrier invariance", v, t, false);
    let (v, t) = timed(conflict_oracle);
    check(3, "conflict resolution oracle", v, t, false);
    let (v, t) = timed(min_snap_oracle);
    check(4, "minimum-snap oracle", v, t, false);
    let (v, t) = timed(solver_checks);
    check(5, "derivatives and QP solver", v, t, false);
    let ((single, v), t) = timed(|| {
        let single = run_outcome(&shipped("single.toml")).expect("single run");
        let v = tracking(&single);
        (single, v)
    });
    check(6, "tracking sanity", v, t, false);
    let (v, t) = timed(|| determinism(&comparison, &single));
    check(7, "determinism", v, t, false);
    let ((v, _), t) = timed(solve_time);
    check(8, "per-step solve time (soft)", v, t, true);

    if hard_failures > 0 {
        println!("{hard_failures} criterion/criteria failed");
        std::process::exit(1);
    }
}
