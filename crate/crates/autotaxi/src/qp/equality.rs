use nalgebra::{DMatrix, DVector};

use super::{kkt, QpSolution, QpStatus, QuadProgram, REGULARIZATION};

/// Pivot ratio below which the KKT matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-13;

fn kkt_matrix(h: &DMatrix<f64>, a: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let n = h.nrows();
    let m = a.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for i in 0..n {
        k[(i, i)] += shift;
    }
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(a);
    k
}

fn factor(k: DMatrix<f64>) -> Option<nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = k.full_piv_lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.amax();
    let min = diag.iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
    (max > 0.0 && min > PIVOT_TOL * max).then_some(lu)
}

/// Exact solve of `min ½zᵀHz + gᵀz s.t. A z = b` through the KKT system.
///
/// The KKT matrix is factored with full pivoting; two rounds of iterative
/// refinement bring the residual to working precision.
pub fn solve_eq_qp(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> QpSolution {
    let n = g.len();
    let m = b.len();
    let qp = QuadProgram::new(h.clone(), g.clone()).with_equalities(a.clone(), b.clone());
    if let Err(e) = qp.validate() {
        return QpSolution::failed(&qp, QpStatus::Singular, e.to_string());
    }

    let mut regularized = false;
    let lu = match factor(kkt_matrix(h, a, 0.0)) {
        Some(lu) => lu,
        None => match factor(kkt_matrix(h, a, REGULARIZATION)) {
            Some(lu) => {
                regularized = true;
                lu
            }
            None => {
                return QpSolution::failed(
                    &qp,
                    QpStatus::Singular,
                    format!("KKT matrix of size {} is rank deficient (dependent or contradictory constraints?)", n + m),
                )
            }
        },
    };

    let k = kkt_matrix(h, a, 0.0);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    rhs.rows_mut(n, m).copy_from(b);
    let mut sol = lu.solve(&rhs).expect("factor checked");
    for _ in 0..2 {
        let r = &rhs - &k * &sol;
        if let Some(d) = lu.solve(&r) {
            sol += d;
        }
    }

    let z = sol.rows(0, n).into_owned();
    // K [z; w] = [-g; b] means Hz + g + Aᵀw = 0, so y = -w.
    let y_eq = -sol.rows(n, m).into_owned();
    let mut out = QpSolution {
        z,
        y_eq,
        y_in: DVector::zeros(0),
        y_lower: DVector::zeros(n),
        y_upper: DVector::zeros(n),
        status: QpStatus::Optimal,
        kkt_residual: 0.0,
        iterations: 1,
        regularized,
        diagnostic: regularized.then(|| "H shifted by 1e-9 I".to_string()),
    };
    out.kkt_residual = kkt::check(&qp, &out).max();
    out
}
