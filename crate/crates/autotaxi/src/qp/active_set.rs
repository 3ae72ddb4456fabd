//! Primal active-set method for strictly convex QPs.
//!
//! Each iteration solves the equality-constrained subproblem on the working
//! set through the range space of `H = LLᵀ`: with `K = L⁻¹A_Wᵀ` the
//! multipliers solve `KᵀK λ = b_W + Kᵀ L⁻¹ g`. Degenerate stalls switch the
//! dropping rule to the lowest index (Bland).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};


use super::{kkt, QpSolution, QpStatus, QuadProgram, REGULARIZATION};

const FEASIBILITY_TOL: f64 = 1e-9;
const MULTIPLIER_TOL: f64 = 1e-10;
const PHASE_ONE_WEIGHT: f64 = 1e-6;
const DEGENERATE_SWITCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Eq(usize),
    In(usize),
    Lower(usize),
    Upper(usize),
}

/// All constraints as rows `a_i z (= or >=) rhs_i`, equalities first.
struct Rows {
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    kinds: Vec<Kind>,
    n_eq: usize,
}

impl Rows {
    fn build(qp: &QuadProgram, eq_keep: &[usize]) -> Self {
        let n = qp.dim();
        let mut rows: Vec<(DVector<f64>, f64, Kind)> = Vec::new();
        for &i in eq_keep {
            rows.push((qp.a_eq.row(i).transpose(), qp.b_eq[i], Kind::Eq(i)));
        }
        for i in 0..qp.a_in.nrows() {
            rows.push((qp.a_in.row(i).transpose(), qp.b_in[i], Kind::In(i)));
        }
        let unit = |j: usize, s: f64| {
            let mut e = DVector::zeros(n);
            e[j] = s;
            e
        };
        if let Some(l) = &qp.lower {
            for j in (0..n).filter(|&j| l[j].is_finite()) {
                rows.push((unit(j, 1.0), l[j], Kind::Lower(j)));
            }
        }
        if let Some(u) = &qp.upper {
            for j in (0..n).filter(|&j| u[j].is_finite()) {
                rows.push((unit(j, -1.0), -u[j], Kind::Upper(j)));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut rhs = DVector::zeros(rows.len());
        let mut kinds = Vec::with_capacity(rows.len());
        for (i, (row, b, kind)) in rows.into_iter().enumerate() {
            a.set_row(i, &row.transpose());
            rhs[i] = b;
            kinds.push(kind);
        }
        Self {
            a,
            rhs,
            kinds,
            n_eq: eq_keep.len(),
        }
    }

    fn len(&self) -> usize {
        self.kinds.len()
    }

    /// Largest violation at `z`.
    fn violation(&self, z: &DVector<f64>) -> f64 {
        let r = &self.a * z - &self.rhs;
        r.iter()
            .enumerate()
            .map(|(i, &ri)| if i < self.n_eq { ri.abs() } else { (-ri).max(0.0) })
            .fold(0.0, f64::max)
    }
}

struct CoreResult {
    z: DVector<f64>,
    working: Vec<usize>,
    lambda: Vec<f64>,
    iterations: usize,
    status: QpStatus,
}

/// Active-set iterations from the feasible point `z`. Inequalities active
/// at `z` seed the working set as far as they are linearly independent.
fn run_core(
    l: &DMatrix<f64>,
    g: &DVector<f64>,
    rows: &Rows,
    mut z: DVector<f64>,
    max_iter: usize,
) -> CoreResult {
    let n = g.len();
    let m = rows.len();
    // K_all = L⁻¹ Aᵀ, one column per constraint.
    let k_all = l
        .solve_lower_triangular(&rows.a.transpose())
        .expect("Cholesky factor has a nonzero diagonal");
    let lg = l.solve_lower_triangular(g).expect("nonzero diagonal");
    let row_norm: Vec<f64> = (0..m).map(|i| rows.a.row(i).amax()).collect();

    let mut working: Vec<usize> = (0..rows.n_eq).collect();
    let mut in_working = vec![false; m];
    for &i in &working {
        in_working[i] = true;
    }
    {
        // Orthonormal basis of the working-set columns of K.
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let residual = &rows.a * &z - &rows.rhs;
        for i in 0..m {
            let active = i < rows.n_eq || residual[i].abs() <= FEASIBILITY_TOL * (1.0 + rows.rhs[i].abs());
            if !active || basis.len() >= n {
                continue;
            }
            let mut k = k_all.column(i).into_owned();
            let scale = k.norm();
            for q in &basis {
                let c = q.dot(&k);
                k -= c * q;
            }
            let kn = k.norm();
            if kn > 1e-6 * scale.max(1e-300) {
                basis.push(k / kn);
                if i >= rows.n_eq {
                    working.push(i);
                    in_working[i] = true;
                }
            }
        }
    }
    let mut degenerate = 0usize;
    let mut lambda = Vec::new();
    let mut redundant = vec![false; m];

    for iteration in 1..=max_iter {
        // Minimizer on the working set.
        let w = working.len();
        let mut kw = DMatrix::zeros(n, w);
        for (c, &i) in working.iter().enumerate() {
            kw.set_column(c, &k_all.column(i));
        }
        let lam: DVector<f64> = if w == 0 {
            DVector::zeros(0)
        } else {
            let mut t = kw.transpose() * &lg;
            for (c, &i) in working.iter().enumerate() {
                t[c] += rows.rhs[i];
            }
            // KᵀK λ = t through K = QR, without forming KᵀK.
            let solved = if w > n {
                None
            } else {
                let r = kw.clone().qr().r();
                let diag_max = r.diagonal().amax();
                if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * diag_max.max(1e-300)) {
                    None
                } else {
                    r.tr_solve_upper_triangular(&t).and_then(|y| r.solve_upper_triangular(&y))
                }
            };
            match solved {
                Some(lam) => lam,
                None if working.len() > rows.n_eq => {
                    // The newest row lies in the span of the others, so it
                    // cannot block any direction the others allow.
                    let i = working.pop().unwrap();
                    in_working[i] = false;
                    redundant[i] = true;
                    degenerate += 1;
                    continue;
                }
                None => {
                    return CoreResult {
                        z,
                        working,
                        lambda,
                        iterations: iteration,
                        status: QpStatus::Singular,
                    }
                }
            }
        };
        let z_w = l
            .transpose()
            .solve_upper_triangular(&(&kw * &lam - &lg))
            .expect("nonzero diagonal");
        lambda = lam.iter().copied().collect();

        let p = &z_w - &z;
        if p.amax() <= 1e-11 * (1.0 + z.amax()) {
            z = z_w;
            // Drop an inequality with a negative multiplier, if any.
            let negatives = working
                .iter()
                .enumerate()
                .filter(|(c, &i)| i >= rows.n_eq && lambda[*c] < -MULTIPLIER_TOL);
            let leaving = if degenerate >= DEGENERATE_SWITCH {
                negatives.min_by_key(|(_, &i)| i).map(|(c, _)| c)
            } else {
                negatives
                    .min_by(|a, b| lambda[a.0].total_cmp(&lambda[b.0]).then(a.1.cmp(b.1)))
                    .map(|(c, _)| c)
            };
            match leaving {
                None => {
                    return CoreResult {
                        z,
                        working,
                        lambda,
                        iterations: iteration,
                        status: QpStatus::Optimal,
                    }
                }
                Some(c) => {
                    in_working[working[c]] = false;
                    working.remove(c);
                    redundant.iter_mut().for_each(|r| *r = false);
                }
            }
            continue;
        }

        // Ratio test; ties go to the lowest index.
        let ap = &rows.a * &p;
        let az = &rows.a * &z;
        let p_norm = p.amax();
        let mut step = 1.0;
        let mut blocking = None;
        for i in rows.n_eq..m {
            if in_working[i] || redundant[i] || ap[i] >= -1e-9 * row_norm[i] * p_norm {
                continue;
            }
            let ratio = ((az[i] - rows.rhs[i]).max(0.0)) / (-ap[i]);
            if ratio < step {
                step = ratio;
                blocking = Some(i);
            }
        }
        z += step * &p;
        match blocking {
            Some(i) => {
                degenerate = if step == 0.0 { degenerate + 1 } else { 0 };
                in_working[i] = true;
                working.push(i);
            }
            None => degenerate = 0,
        }
    }
    CoreResult {
        z,
        working,
        lambda,
        iterations: max_iter,
        status: QpStatus::MaxIterations,
    }
}

/// Linearly independent subset of the equality rows, or `None` if they are inconsistent.
fn independent_equalities(qp: &QuadProgram) -> Option<(Vec<usize>, DVector<f64>)> {
    let n = qp.dim();
    let m = qp.a_eq.nrows();
    if m == 0 {
        return Some((Vec::new(), DVector::zeros(n)));
    }
    let svd = qp.a_eq.clone().svd(true, true);
    let z0 = svd.solve(&qp.b_eq, 1e-12 * svd.singular_values.max().max(1.0)).ok()?;
    let residual = (&qp.a_eq * &z0 - &qp.b_eq).amax();
    if residual > FEASIBILITY_TOL * (1.0 + qp.b_eq.amax()) {
        return None;
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for i in 0..m {
        let mut r = qp.a_eq.row(i).transpose();
        let scale = r.norm();
        for q in &basis {
            let c = q.dot(&r);
            r -= c * q;
        }
        let rn = r.norm();
        if rn > 1e-10 * scale.max(1e-300) {
            basis.push(r / rn);
            keep.push(i);
        }
    }
    Some((keep, z0))
}

/// Feasible point by minimizing an elastic variable `t >= max violation`.
fn phase_one(qp: &QuadProgram, rows: &Rows, z0: &DVector<f64>, max_iter: usize) -> Option<DVector<f64>> {
    let n = qp.dim();
    let m = rows.len();
    let t0 = (rows.n_eq..m)
        .map(|i| rows.rhs[i] - rows.a.row(i).dot(&z0.transpose()))
        .fold(0.0, f64::max);
    if t0 <= 0.0 {
        return Some(z0.clone());
    }

    let mut aug_rows = Rows {
        a: DMatrix::zeros(m + 1, n + 1),
        rhs: DVector::zeros(m + 1),
        kinds: rows.kinds.clone(),
        n_eq: rows.n_eq,
    };
    aug_rows.a.view_mut((0, 0), (m, n)).copy_from(&rows.a);
    for i in rows.n_eq..m {
        aug_rows.a[(i, n)] = 1.0;
    }
    aug_rows.a[(m, n)] = 1.0;
    aug_rows.rhs.rows_mut(0, m).copy_from(&rows.rhs);
    aug_rows.kinds.push(Kind::Lower(n));

    let l = DMatrix::identity(n + 1, n + 1) * PHASE_ONE_WEIGHT.sqrt();
    let mut g = DVector::zeros(n + 1);
    g.rows_mut(0, n).copy_from(&(-PHASE_ONE_WEIGHT * z0));
    g[n] = 1.0;
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(z0);
    start[n] = t0;

    let res = run_core(&l, &g, &aug_rows, start, max_iter);
    let z = res.z.rows(0, n).into_owned();
    (res.status == QpStatus::Optimal && rows.violation(&z) <= 1e-7 * (1.0 + rows.rhs.amax())).then_some(z)
}

/// Solves a strictly convex QP, optionally starting from `warm_start`.
///
/// A warm start is used as the initial iterate when it is feasible; the
/// optimum does not depend on it.
pub fn solve_qp(qp: &QuadProgram, warm_start: Option<&DVector<f64>>) -> QpSolution {
    if let Err(e) = qp.validate() {
        return QpSolution::failed(qp, QpStatus::Singular, e.to_string());
    }
    let n = qp.dim();

    let mut regularized = false;
    let chol = match Cholesky::new(qp.h.clone()) {
        Some(c) => c,
        None => {
            regularized = true;
            match Cholesky::new(&qp.h + DMatrix::identity(n, n) * REGULARIZATION) {
                Some(c) => c,
                None => {
                    return QpSolution::failed(qp, QpStatus::Singular, "H is not positive definite".into())
                }
            }
        }
    };
    let l: DMatrix<f64> = Cholesky::<f64, Dyn>::l(&chol);

    let Some((eq_keep, z_eq)) = independent_equalities(qp) else {
        return QpSolution::failed(qp, QpStatus::Infeasible, "equality constraints are inconsistent".into());
    };
    let rows = Rows::build(qp, &eq_keep);
    let max_iter = 10 * (n + rows.len()) + 100;

    let start = match warm_start {
        Some(w) if w.len() == n && rows.violation(w) <= FEASIBILITY_TOL => w.clone(),
        _ => match phase_one(qp, &rows, &z_eq, max_iter) {
            Some(z) => z,
            None => {
                return QpSolution::failed(qp, QpStatus::Infeasible, "no point satisfies the constraints".into())
            }
        },
    };

    let core = run_core(&l, &qp.g, &rows, start, max_iter);
    let mut sol = QpSolution {
        z: core.z,
        y_eq: DVector::zeros(qp.a_eq.nrows()),
        y_in: DVector::zeros(qp.a_in.nrows()),
        y_lower: DVector::zeros(n),
        y_upper: DVector::zeros(n),
        status: core.status,
        kkt_residual: 0.0,
        iterations: core.iterations,
        regularized,
        diagnostic: regularized.then(|| "H shifted by 1e-9 I".to_string()),
    };
    for (c, &i) in core.working.iter().enumerate() {
        let y = core.lambda.get(c).copied().unwrap_or(0.0);
        match rows.kinds[i] {
            Kind::Eq(k) => sol.y_eq[k] = y,
            Kind::In(k) => sol.y_in[k] = y,
            Kind::Lower(k) => sol.y_lower[k] = y,
            Kind::Upper(k) => sol.y_upper[k] = y,
        }
    }
    sol.kkt_residual = kkt::check(qp, &sol).max();
    sol
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn active_upper_bound() {
        // (z - 3)^2 = z^2 - 6z + 9 -> H = 2, g = -6
        let qp = QuadProgram::new(DMatrix::from_element(1, 1, 2.0), v(&[-6.0]))
            .with_inequalities(DMatrix::from_element(1, 1, -1.0), v(&[-2.0]));
        let sol = solve_qp(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.y_in[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn inactive_constraint() {
        let qp = QuadProgram::new(DMatrix::identity(2, 2) * 2.0, v(&[-4.0, -4.0]))
            .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), v(&[1.0]));
        let sol = solve_qp(&qp, None);
        assert_abs_diff_eq!(sol.z, v(&[2.0, 2.0]), epsilon = 1e-12);
        assert_eq!(sol.y_in[0], 0.0);
    }

    #[test]
    fn box_bounds_and_equality() {
        // min ½‖z‖² - z₀ - 3z₁  s.t. z₀ + z₁ + z₂ = 1, 0 <= z <= 0.8
        let qp = QuadProgram::new(DMatrix::identity(3, 3), v(&[-1.0, -3.0, 0.0]))
            .with_equalities(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]), v(&[1.0]))
            .with_bounds(Some(v(&[0.0, 0.0, 0.0])), Some(v(&[0.8, 0.8, 0.8])));
        let sol = solve_qp(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.kkt_residual < 1e-9, "{}", sol.kkt_residual);
        assert_abs_diff_eq!(sol.z, v(&[0.2, 0.8, 0.0]), epsilon = 1e-10);
    }

    #[test]
    fn infeasible_constraints() {
        let qp = QuadProgram::new(DMatrix::identity(1, 1), v(&[0.0]))
            .with_inequalities(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), v(&[2.0, -1.0]));
        assert_eq!(solve_qp(&qp, None).status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let qp = QuadProgram::new(DMatrix::identity(2, 2), v(&[0.0, 0.0])).with_equalities(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            v(&[2.0, 4.0]),
        );
        let sol = solve_qp(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z, v(&[1.0, 1.0]), epsilon = 1e-12);
    }

    #[test]
    fn warm_start_does_not_change_optimum() {
        let qp = QuadProgram::new(DMatrix::identity(2, 2), v(&[-1.0, -1.0]))
            .with_bounds(None, Some(v(&[0.5, 2.0])));
        let cold = solve_qp(&qp, None);
        let warm = solve_qp(&qp, Some(&v(&[0.5, 0.0])));
        assert_abs_diff_eq!(cold.z, warm.z, epsilon = 1e-12);
        assert_abs_diff_eq!(cold.z, v(&[0.5, 1.0]), epsilon = 1e-12);
        // An infeasible warm start is ignored.
        let ignored = solve_qp(&qp, Some(&v(&[9.0, 9.0])));
        assert_abs_diff_eq!(ignored.z, cold.z, epsilon = 1e-12);
    }
}
