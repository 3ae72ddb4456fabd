//! KKT residuals of a candidate QP solution, computed from the problem data
//! alone.

use nalgebra::DVector;

use super::{QpSolution, QuadProgram};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `‖Hz + g − A_eqᵀy_eq − A_inᵀy_in − y_lower + y_upper‖∞`
    pub stationarity: f64,
    /// Largest equality or inequality violation.
    pub primal: f64,
    /// Most negative inequality multiplier, as a nonnegative number.
    pub dual: f64,
    /// Largest `|multiplier × slack|`.
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }

    pub fn satisfies(&self, stationarity: f64, primal: f64, dual: f64, complementarity: f64) -> bool {
        self.stationarity <= stationarity
            && self.primal <= primal
            && self.dual <= dual
            && self.complementarity <= complementarity
    }
}

pub fn check(qp: &QuadProgram, sol: &QpSolution) -> KktReport {
    let z = &sol.z;
    let n = qp.dim();

    let mut residual: DVector<f64> = &qp.h * z + &qp.g;
    residual -= qp.a_eq.transpose() * &sol.y_eq;
    residual -= qp.a_in.transpose() * &sol.y_in;
    if qp.lower.is_some() {
        residual -= &sol.y_lower;
    }
    if qp.upper.is_some() {
        residual += &sol.y_upper;
    }
    let stationarity = residual.amax();

    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut complementarity: f64 = 0.0;

    if qp.a_eq.nrows() > 0 {
        primal = primal.max((&qp.a_eq * z - &qp.b_eq).amax());
    }
    if qp.a_in.nrows() > 0 {
        let slack = &qp.a_in * z - &qp.b_in;
        for (s, y) in slack.iter().zip(sol.y_in.iter()) {
            primal = primal.max(-s);
            dual = dual.max(-y);
            complementarity = complementarity.max((s * y).abs());
        }
    }
    for j in 0..n {
        if let Some(l) = &qp.lower {
            if l[j].is_finite() {
                let s = z[j] - l[j];
                primal = primal.max(-s);
                dual = dual.max(-sol.y_lower[j]);
                complementarity = complementarity.max((s * sol.y_lower[j]).abs());
            }
        }
        if let Some(u) = &qp.upper {
            if u[j].is_finite() {
                let s = u[j] - z[j];
                primal = primal.max(-s);
                dual = dual.max(-sol.y_upper[j]);
                complementarity = complementarity.max((s * sol.y_upper[j]).abs());
            }
        }
    }
    KktReport {
        stationarity,
        primal,
        dual,
        complementarity,
    }
}
