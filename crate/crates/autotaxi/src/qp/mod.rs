//! Dense quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ zᵀHz + gᵀz
//! subject to  A_eq z  = b_eq
//!             A_in z >= b_in
//!             lower <= z <= upper
//! ```
//!
//! Multipliers follow one sign convention throughout:
//! `Hz + g = A_eqᵀ y_eq + A_inᵀ y_in + y_lower - y_upper`, with every
//! inequality multiplier nonnegative.

mod active_set;
mod equality;
pub mod kkt;

use nalgebra::{DMatrix, DVector};

pub use active_set::solve_qp;
pub use equality::solve_eq_qp;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QuadProgram {
    /// Unconstrained problem.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: None,
            upper: None,
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: Option<DVector<f64>>, upper: Option<DVector<f64>>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad = |reason: String| Err(Error::InvalidParameter { name: "qp", reason });
        if self.h.shape() != (n, n) {
            return bad(format!("H is {:?}, expected {n}x{n}", self.h.shape()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block has inconsistent dimensions".into());
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality block has inconsistent dimensions".into());
        }
        for b in [&self.lower, &self.upper].into_iter().flatten() {
            if b.len() != n {
                return bad(format!("bound vector has length {}, expected {n}", b.len()));
            }
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-12 * self.h.amax().max(1.0) {
            return bad(format!("H is not symmetric (max deviation {asym:e})"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// The KKT system could not be factored.
    Singular,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_in: DVector<f64>,
    pub y_lower: DVector<f64>,
    pub y_upper: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Whether `H` needed a `1e-9 I` shift to factor.
    pub regularized: bool,
    pub diagnostic: Option<String>,
}

impl QpSolution {
    pub(crate) fn failed(qp: &QuadProgram, status: QpStatus, diagnostic: String) -> Self {
        Self {
            z: DVector::zeros(qp.dim()),
            y_eq: DVector::zeros(qp.a_eq.nrows()),
            y_in: DVector::zeros(qp.a_in.nrows()),
            y_lower: DVector::zeros(qp.dim()),
            y_upper: DVector::zeros(qp.dim()),
            status,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            regularized: false,
            diagnostic: Some(diagnostic),
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Shift added to `H` when it does not factor.
pub const REGULARIZATION: f64 = 1e-9;
