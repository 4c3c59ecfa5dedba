//! Conic and NLP solver layer.
//!
//! One conic entry point, [`solve_conic`], accepts problems of the form
//!
//! ```text
//!   minimize   ½ xᵀPx + qᵀx
//!   subject to A x + s = b,   s ∈ K
//! ```
//!
//! where `K` is a product of zero, nonnegative, second-order and PSD-triangle
//! cones. Problems without PSD blocks go to Clarabel; problems with PSD blocks
//! go to the in-crate dense interior-point method in [`sdp`] (small
//! semidefinite programs only, which is all this crate produces).
//!
//! [`solve_nlp`] is a dense SQP with damped BFGS, an elastic ℓ₁ penalty on
//! linearized constraints and an ℓ₁ merit line search. Identical inputs give
//! bit-identical iterates, so warm-started receding-horizon solves are
//! reproducible.

mod clarabel_backend;
mod sdp;
mod sqp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use sqp::{solve_nlp, NlpOptions, NlpProblem, NlpSolution};

/// Default feasibility/optimality tolerance for conic solves.
pub const CONIC_TOL: f64 = 1e-8;
/// Default KKT tolerance for NLP solves.
pub const NLP_TOL: f64 = 1e-6;

/// Cone blocks, in row order of the constraint matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    /// `s = 0` (equality rows).
    Zero(usize),
    /// `s >= 0` componentwise.
    Nonneg(usize),
    /// Second-order cone `s_1 >= ‖s_2..‖`.
    Soc(usize),
    /// Symmetric PSD matrix of the given side length, passed as its scaled
    /// upper-triangle vector (off-diagonals times √2).
    PsdTriangle(usize),
}

impl Cone {
    /// Number of constraint rows the block occupies.
    pub fn rows(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::Nonneg(n) | Cone::Soc(n) => n,
            Cone::PsdTriangle(n) => n * (n + 1) / 2,
        }
    }
}

/// Dense conic problem; `p = None` means a linear objective.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub p: Option<DMatrix<f64>>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cones: Vec<Cone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    AlmostOptimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalError,
}

impl SolveStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::AlmostOptimal)
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: DVector<f64>,
    /// Dual variables, one per constraint row.
    pub z: DVector<f64>,
    /// Slacks `s = b - Ax`.
    pub s: DVector<f64>,
    pub obj: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("conic solve failed: {0:?}")]
    Conic(SolveStatus),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("unsupported cone combination: {0}")]
    Unsupported(String),
}

/// Solve a conic problem, dispatching on cone content. Infeasible or
/// unconverged problems come back as a status inside `Ok`; `Err` is reserved
/// for malformed inputs.
pub fn solve_conic(problem: &ConicProblem) -> Result<ConicSolution, SolveError> {
    let rows: usize = problem.cones.iter().map(Cone::rows).sum();
    if problem.a.nrows() != rows || problem.b.len() != rows {
        return Err(SolveError::Shape(format!(
            "cones describe {} rows, A has {}, b has {}",
            rows,
            problem.a.nrows(),
            problem.b.len()
        )));
    }
    if problem.a.ncols() != problem.q.len() {
        return Err(SolveError::Shape(format!(
            "A has {} cols, q has {}",
            problem.a.ncols(),
            problem.q.len()
        )));
    }
    let has_psd = problem.cones.iter().any(|c| matches!(c, Cone::PsdTriangle(_)));
    if has_psd {
        if problem.p.is_some() {
            return Err(SolveError::Unsupported(
                "quadratic objective with PSD cones".into(),
            ));
        }
        if problem.cones.iter().any(|c| matches!(c, Cone::Soc(_))) {
            return Err(SolveError::Unsupported("SOC mixed with PSD cones".into()));
        }
        sdp::solve(problem)
    } else {
        clarabel_backend::solve(problem)
    }
}

/// Scaled upper-triangle vectorization (column order, off-diagonals × √2);
/// an isometry between symmetric matrices and R^{n(n+1)/2}.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut k = 0;
    let s2 = std::f64::consts::SQRT_2;
    for j in 0..n {
        for i in 0..=j {
            out[k] = if i == j { m[(i, j)] } else { s2 * m[(i, j)] };
            k += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    let s2 = std::f64::consts::SQRT_2;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                out[(i, j)] = v[k];
            } else {
                out[(i, j)] = v[k] / s2;
                out[(j, i)] = v[k] / s2;
            }
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn svec_isometry() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 4.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.3, 2.0, 0.3, 0.7]);
        let ip = svec(&a).dot(&svec(&b));
        assert_abs_diff_eq!(ip, (a.clone() * b.clone()).trace(), epsilon = 1e-12);
        let back = smat(&svec(&a), 3);
        assert_abs_diff_eq!((back - a).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lp_scalar_bound() {
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&[1.0]),
            a: DMatrix::from_row_slice(1, 1, &[-1.0]),
            b: DVector::from_row_slice(&[-1.0]),
            cones: vec![Cone::Nonneg(1)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok());
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn qp_projection_orthant() {
        // min 0.5*|x|^2 - x1 + 0.1*x2  s.t. x >= 0  ->  (1, 0); the linear
        // x2 term keeps the active bound strictly complementary.
        let prob = ConicProblem {
            p: Some(DMatrix::identity(2, 2)),
            q: DVector::from_row_slice(&[-1.0, 0.1]),
            a: -DMatrix::identity(2, 2),
            b: DVector::zeros(2),
            cones: vec![Cone::Nonneg(2)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok());
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn soc_distance_to_ball() {
        // min t  s.t. |x - (3,4)| <= t, |x| <= 1   ->  t = 4 at x = (0.6, 0.8)
        let a = DMatrix::from_row_slice(6, 3, &[
            0.0, 0.0, -1.0,
            -1.0, 0.0, 0.0,
            0.0, -1.0, 0.0,
            0.0, 0.0, 0.0,
            -1.0, 0.0, 0.0,
            0.0, -1.0, 0.0,
        ]);
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&[0.0, 0.0, 1.0]),
            a,
            b: DVector::from_row_slice(&[0.0, -3.0, -4.0, 1.0, 0.0, 0.0]),
            cones: vec![Cone::Soc(3), Cone::Soc(3)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok());
        assert_abs_diff_eq!(sol.x[0], 0.6, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[1], 0.8, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[2], 4.0, epsilon = 1e-5);
    }

    #[test]
    fn sdp_min_trace_dominating_identity() {
        // min tr(S)  s.t. S >= I_2   ->  S = I, objective 2
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&[1.0, 0.0, 1.0]),
            a: -DMatrix::identity(3, 3),
            b: -svec(&DMatrix::identity(2, 2)),
            cones: vec![Cone::PsdTriangle(2)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok(), "status {:?}", sol.status);
        assert_abs_diff_eq!(sol.obj, 2.0, epsilon = 1e-6);
        let s = smat(&sol.x, 2);
        assert_abs_diff_eq!((s - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn sdp_two_psd_blocks() {
        // min tr(S)  s.t. S >= diag(2,0), S >= diag(0,2)  ->  S = diag(2,2), objective 4
        let a1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let mut a = DMatrix::zeros(6, 3);
        a.view_mut((0, 0), (3, 3)).copy_from(&(-DMatrix::identity(3, 3)));
        a.view_mut((3, 0), (3, 3)).copy_from(&(-DMatrix::identity(3, 3)));
        let mut b = DVector::zeros(6);
        b.rows_mut(0, 3).copy_from(&(-svec(&a1)));
        b.rows_mut(3, 3).copy_from(&(-svec(&a2)));
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&[1.0, 0.0, 1.0]),
            a,
            b,
            cones: vec![Cone::PsdTriangle(2), Cone::PsdTriangle(2)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok(), "status {:?}", sol.status);
        assert_abs_diff_eq!(sol.obj, 4.0, epsilon = 1e-5);
    }

    #[test]
    fn sdp_mixed_with_nonneg() {
        // min tr(S) + t  s.t. S >= I_2, t >= 3   ->  5
        let mut a = DMatrix::zeros(4, 4);
        a.view_mut((0, 0), (3, 3)).copy_from(&(-DMatrix::identity(3, 3)));
        a[(3, 3)] = -1.0;
        let mut b = DVector::zeros(4);
        b.rows_mut(0, 3).copy_from(&(-svec(&DMatrix::identity(2, 2))));
        b[3] = -3.0;
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&[1.0, 0.0, 1.0, 1.0]),
            a,
            b,
            cones: vec![Cone::PsdTriangle(2), Cone::Nonneg(1)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok(), "status {:?}", sol.status);
        assert_abs_diff_eq!(sol.obj, 5.0, epsilon = 1e-5);
    }

    #[test]
    fn lp_infeasible_detected() {
        // x >= 1 and x <= 0 is infeasible
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&[1.0]),
            a: DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            b: DVector::from_row_slice(&[-1.0, 0.0]),
            cones: vec![Cone::Nonneg(2)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert_eq!(sol.status, SolveStatus::PrimalInfeasible);
    }

    #[test]
    fn barycentric_lp_centroid_cost() {
        // Generators (0,0),(1,0),(0,1) with costs (4,2,0). The triangle is affinely
        // independent, so the centroid has the unique representation lambda = 1/3 each
        // and the interpolated value is (4+2+0)/3 = 2.
        let verts = [
            DVector::from_row_slice(&[0.0, 0.0]),
            DVector::from_row_slice(&[1.0, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0]),
        ];
        let costs = [4.0, 2.0, 0.0];
        let k = 3;
        let mut a = DMatrix::zeros(3 + k, k);
        let mut b = DVector::zeros(3 + k);
        for j in 0..k {
            a[(0, j)] = 1.0;
            a[(1, j)] = verts[j][0];
            a[(2, j)] = verts[j][1];
            a[(j + 3, j)] = -1.0;
        }
        b[0] = 1.0;
        b[1] = 1.0 / 3.0;
        b[2] = 1.0 / 3.0;
        let prob = ConicProblem {
            p: None,
            q: DVector::from_row_slice(&costs),
            a,
            b,
            cones: vec![Cone::Zero(3), Cone::Nonneg(k)],
        };
        let sol = solve_conic(&prob).unwrap();
        assert!(sol.status.is_ok());
        assert_abs_diff_eq!(sol.obj, 2.0, epsilon = 1e-6);
    }
}
