//! Bridge from the dense [`ConicProblem`] form to Clarabel.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use super::{Cone, ConicProblem, ConicSolution, SolveError, SolveStatus, CONIC_TOL};

fn to_csc(m: &DMatrix<f64>) -> CscMatrix<f64> {
    let (rows, cols) = (m.nrows(), m.ncols());
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..cols {
        for i in 0..rows {
            let v = m[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

pub fn solve(problem: &ConicProblem) -> Result<ConicSolution, SolveError> {
    let n = problem.q.len();
    let p = match &problem.p {
        Some(p) => {
            // Clarabel wants the upper triangle of P.
            let mut upper = p.clone();
            for j in 0..n {
                for i in (j + 1)..n {
                    upper[(i, j)] = 0.0;
                }
            }
            to_csc(&upper)
        }
        None => CscMatrix::zeros((n, n)),
    };
    let a = to_csc(&problem.a);
    let q: Vec<f64> = problem.q.iter().copied().collect();
    let b: Vec<f64> = problem.b.iter().copied().collect();
    let cones: Vec<SupportedConeT<f64>> = problem
        .cones
        .iter()
        .map(|c| match *c {
            Cone::Zero(k) => SupportedConeT::ZeroConeT(k),
            Cone::Nonneg(k) => SupportedConeT::NonnegativeConeT(k),
            Cone::Soc(k) => SupportedConeT::SecondOrderConeT(k),
            Cone::PsdTriangle(_) => unreachable!("PSD blocks are dispatched to the dense IPM"),
        })
        .collect();

    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: CONIC_TOL,
        tol_gap_rel: CONIC_TOL,
        tol_feas: CONIC_TOL,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings);
    solver.solve();

    let status = match solver.solution.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::AlmostOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::PrimalInfeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            SolveStatus::DualInfeasible
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIterations,
        _ => SolveStatus::NumericalError,
    };
    Ok(ConicSolution {
        x: DVector::from_vec(solver.solution.x.clone()),
        z: DVector::from_vec(solver.solution.z.clone()),
        s: DVector::from_vec(solver.solution.s.clone()),
        obj: solver.solution.obj_val,
        status,
    })
}
