//! Dense SQP for small smooth NLPs.
//!
//! Sequential quadratic programming with damped BFGS curvature, an elastic ℓ₁
//! relaxation of the linearized constraints (which doubles as feasibility
//! restoration when a linearization is inconsistent) and an ℓ₁ merit line
//! search. Subproblems are quadratic programs handed to the conic layer.

use nalgebra::{DMatrix, DVector};

use super::{solve_conic, Cone, ConicProblem, SolveError, NLP_TOL};

/// Smooth NLP `min f(x) s.t. h(x) = 0, g(x) <= 0` with dense derivatives.
///
/// Callbacks return value and Jacobian together so shared work (dynamics
/// rollouts, trig) is done once per evaluation point.
pub struct NlpProblem<'a> {
    pub n: usize,
    pub m_eq: usize,
    pub m_ineq: usize,
    pub x0: DVector<f64>,
    #[allow(clippy::type_complexity)]
    pub objective: Box<dyn Fn(&DVector<f64>) -> (f64, DVector<f64>) + 'a>,
    #[allow(clippy::type_complexity)]
    pub eq: Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + 'a>,
    #[allow(clippy::type_complexity)]
    pub ineq: Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + 'a>,
}

#[derive(Debug, Clone, Copy)]
pub struct NlpOptions {
    /// KKT / feasibility tolerance.
    pub tol: f64,
    pub max_iters: usize,
    /// Initial ℓ₁ elastic penalty weight.
    pub penalty: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self { tol: NLP_TOL, max_iters: 150, penalty: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    MaxIterations,
    Stalled,
    SubproblemFailure,
}

impl NlpStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, NlpStatus::Converged)
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: DVector<f64>,
    pub obj: f64,
    /// `‖h‖_∞`.
    pub eq_violation: f64,
    /// `‖max(g, 0)‖_∞`.
    pub ineq_violation: f64,
    pub iters: usize,
    pub status: NlpStatus,
}

/// Solve a smooth NLP from the supplied starting point. Deterministic:
/// identical inputs produce bit-identical iterates.
pub fn solve_nlp(problem: &NlpProblem, opts: &NlpOptions) -> Result<NlpSolution, SolveError> {
    let n = problem.n;
    let me = problem.m_eq;
    let mi = problem.m_ineq;

    let mut x = problem.x0.clone();
    let mut bmat = DMatrix::<f64>::identity(n, n);
    let mut lam = DVector::<f64>::zeros(me);
    let mut mu = DVector::<f64>::zeros(mi);
    let mut nu = opts.penalty; // merit weight
    let mut status = NlpStatus::MaxIterations;
    let mut iters = 0;

    let (mut fv, mut gradf) = (problem.objective)(&x);
    let (mut hv, mut jh) = (problem.eq)(&x);
    let (mut gv, mut jg) = (problem.ineq)(&x);

    for iter in 0..opts.max_iters {
        iters = iter + 1;

        // KKT residuals with current multiplier estimates.
        let mut stat = gradf.clone();
        if me > 0 {
            stat += jh.transpose() * &lam;
        }
        if mi > 0 {
            stat += jg.transpose() * &mu;
        }
        let eq_viol = if me > 0 { hv.amax() } else { 0.0 };
        let ineq_viol = gv.iter().fold(0.0f64, |a, &v| a.max(v)).max(0.0);
        let comp = (0..mi).fold(0.0f64, |a, i| a.max((mu[i] * gv[i]).abs()));
        let scale = 1.0 + gradf.amax() + nu;
        if eq_viol <= opts.tol
            && ineq_viol <= opts.tol
            && stat.amax() <= opts.tol * scale
            && comp <= opts.tol * scale
            && iter > 0
        {
            status = NlpStatus::Converged;
            break;
        }

        // Elastic QP subproblem in [d, e⁺, e⁻, t].
        let rho = (10.0 * nu).max(1e4);
        let nv = n + 2 * me + mi;
        let mut p = DMatrix::zeros(nv, nv);
        p.view_mut((0, 0), (n, n)).copy_from(&bmat);
        let mut q = DVector::zeros(nv);
        q.rows_mut(0, n).copy_from(&gradf);
        for i in 0..2 * me + mi {
            q[n + i] = rho;
        }
        let rows = me + mi + 2 * me + mi;
        let mut a = DMatrix::zeros(rows, nv);
        let mut b = DVector::zeros(rows);
        // Jh d − e⁺ + e⁻ = −h
        for r in 0..me {
            for c in 0..n {
                a[(r, c)] = jh[(r, c)];
            }
            a[(r, n + r)] = -1.0;
            a[(r, n + me + r)] = 1.0;
            b[r] = -hv[r];
        }
        // Jg d − t <= −g
        for r in 0..mi {
            for c in 0..n {
                a[(me + r, c)] = jg[(r, c)];
            }
            a[(me + r, n + 2 * me + r)] = -1.0;
            b[me + r] = -gv[r];
        }
        // e⁺, e⁻, t >= 0
        for i in 0..2 * me + mi {
            a[(me + mi + i, n + i)] = -1.0;
        }
        let qp = ConicProblem {
            p: Some(p),
            q,
            a,
            b,
            cones: vec![Cone::Zero(me), Cone::Nonneg(mi + 2 * me + mi)],
        };
        let sol = match solve_conic(&qp) {
            Ok(s) if s.status.is_ok() => s,
            _ => {
                // One retry with reset curvature before giving up.
                bmat = DMatrix::identity(n, n);
                let mut qp2 = qp.clone();
                qp2.p.as_mut().unwrap().view_mut((0, 0), (n, n)).copy_from(&bmat);
                match solve_conic(&qp2) {
                    Ok(s2) if s2.status.is_ok() => s2,
                    _ => {
                        status = NlpStatus::SubproblemFailure;
                        break;
                    }
                }
            }
        };
        let d = sol.x.rows(0, n).clone_owned();
        let new_lam = sol.z.rows(0, me).clone_owned();
        let new_mu = sol.z.rows(me, mi).clone_owned().map(|v| v.max(0.0));

        // Merit weight must dominate the multipliers for descent.
        let mult_norm = new_lam.amax().max(new_mu.amax());
        if nu < 1.2 * mult_norm {
            nu = 1.2 * mult_norm + 1.0;
        }

        let merit = |fx: f64, h: &DVector<f64>, g: &DVector<f64>| -> f64 {
            let l1h: f64 = h.iter().map(|v| v.abs()).sum();
            let l1g: f64 = g.iter().map(|v| v.max(0.0)).sum();
            fx + nu * (l1h + l1g)
        };
        let phi0 = merit(fv, &hv, &gv);
        let infeas0: f64 = hv.iter().map(|v| v.abs()).sum::<f64>()
            + gv.iter().map(|v| v.max(0.0)).sum::<f64>();
        let ddir = gradf.dot(&d) - nu * infeas0;

        let mut alpha = 1.0f64;
        let mut accepted = false;
        let (mut fn_, mut hn, mut gn) = (fv, hv.clone(), gv.clone());
        let mut xn = x.clone();
        for _ in 0..30 {
            xn = &x + &d * alpha;
            let (fa, _) = (problem.objective)(&xn);
            let (ha, _) = (problem.eq)(&xn);
            let (ga, _) = (problem.ineq)(&xn);
            if merit(fa, &ha, &ga) <= phi0 + 1e-4 * alpha * ddir.min(0.0) {
                fn_ = fa;
                hn = ha;
                gn = ga;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Direction is not a merit descent direction to line-search
            // precision; treat as converged-as-far-as-possible.
            status = if eq_viol <= opts.tol && ineq_viol <= opts.tol {
                NlpStatus::Converged
            } else {
                NlpStatus::Stalled
            };
            break;
        }

        // Damped BFGS on the Lagrangian gradient change.
        let (fa, grad_new) = (problem.objective)(&xn);
        let (ha, jh_new) = (problem.eq)(&xn);
        let (ga, jg_new) = (problem.ineq)(&xn);
        debug_assert_eq!(fa, fn_);
        let mut grad_l_new = grad_new.clone();
        let mut grad_l_old = gradf.clone();
        if me > 0 {
            grad_l_new += jh_new.transpose() * &new_lam;
            grad_l_old += jh.transpose() * &new_lam;
        }
        if mi > 0 {
            grad_l_new += jg_new.transpose() * &new_mu;
            grad_l_old += jg.transpose() * &new_mu;
        }
        let sstep = &xn - &x;
        let y = &grad_l_new - &grad_l_old;
        let sbs = (&bmat * &sstep).dot(&sstep);
        let sy = sstep.dot(&y);
        if sbs > 1e-16 {
            let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
            let r = &y * theta + (&bmat * &sstep) * (1.0 - theta);
            let sr = sstep.dot(&r);
            if sr > 1e-12 * sstep.norm() * r.norm() {
                let bs = &bmat * &sstep;
                bmat = &bmat - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
            }
        }

        x = xn;
        fv = fa;
        gradf = grad_new;
        hv = ha;
        jh = jh_new;
        gv = ga;
        jg = jg_new;
        lam = new_lam;
        mu = new_mu;
        let _ = (fn_, hn, gn);
    }

    let eq_violation = if me > 0 { hv.amax() } else { 0.0 };
    let ineq_violation = gv.iter().fold(0.0f64, |a, &v| a.max(v)).max(0.0);
    Ok(NlpSolution { x, obj: fv, eq_violation, ineq_violation, iters, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn no_eq(_x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    }

    fn no_ineq(_x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    }

    #[test]
    fn rosenbrock_unconstrained() {
        let prob = NlpProblem {
            n: 2,
            m_eq: 0,
            m_ineq: 0,
            x0: DVector::from_row_slice(&[-1.2, 1.0]),
            objective: Box::new(|x: &DVector<f64>| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = DVector::from_row_slice(&[
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ]);
                (f, g)
            }),
            eq: Box::new(no_eq),
            ineq: Box::new(no_ineq),
        };
        let sol = solve_nlp(&prob, &NlpOptions::default()).unwrap();
        assert!(matches!(sol.status, NlpStatus::Converged), "{:?}", sol.status);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn equality_circle_projection() {
        // min (x-2)^2 + y^2  s.t. x^2 + y^2 = 1  ->  (1, 0)
        let prob = NlpProblem {
            n: 2,
            m_eq: 1,
            m_ineq: 0,
            x0: DVector::from_row_slice(&[0.0, 1.0]),
            objective: Box::new(|x: &DVector<f64>| {
                let f = (x[0] - 2.0).powi(2) + x[1] * x[1];
                let g = DVector::from_row_slice(&[2.0 * (x[0] - 2.0), 2.0 * x[1]]);
                (f, g)
            }),
            eq: Box::new(|x: &DVector<f64>| {
                let h = DVector::from_row_slice(&[x[0] * x[0] + x[1] * x[1] - 1.0]);
                let j = DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]);
                (h, j)
            }),
            ineq: Box::new(no_ineq),
        };
        let sol = solve_nlp(&prob, &NlpOptions::default()).unwrap();
        assert!(matches!(sol.status, NlpStatus::Converged), "{:?}", sol.status);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-5);
        assert!(sol.eq_violation < 1e-6);
    }

    #[test]
    fn inequality_disk_corner() {
        // min x + y  s.t. x^2 + y^2 <= 2  ->  (-1, -1)
        let prob = NlpProblem {
            n: 2,
            m_eq: 0,
            m_ineq: 1,
            x0: DVector::from_row_slice(&[0.5, 0.0]),
            objective: Box::new(|x: &DVector<f64>| {
                (x[0] + x[1], DVector::from_row_slice(&[1.0, 1.0]))
            }),
            eq: Box::new(no_eq),
            ineq: Box::new(|x: &DVector<f64>| {
                let g = DVector::from_row_slice(&[x[0] * x[0] + x[1] * x[1] - 2.0]);
                let j = DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]);
                (g, j)
            }),
        };
        let sol = solve_nlp(&prob, &NlpOptions::default()).unwrap();
        assert!(matches!(sol.status, NlpStatus::Converged), "{:?}", sol.status);
        assert_abs_diff_eq!(sol.x[0], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[1], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn mixed_active_bound() {
        // min x^2 + y^2  s.t. x + y = 2, x <= 0.5  ->  (0.5, 1.5)
        let prob = NlpProblem {
            n: 2,
            m_eq: 1,
            m_ineq: 1,
            x0: DVector::from_row_slice(&[0.0, 0.0]),
            objective: Box::new(|x: &DVector<f64>| {
                (
                    x[0] * x[0] + x[1] * x[1],
                    DVector::from_row_slice(&[2.0 * x[0], 2.0 * x[1]]),
                )
            }),
            eq: Box::new(|x: &DVector<f64>| {
                (
                    DVector::from_row_slice(&[x[0] + x[1] - 2.0]),
                    DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                )
            }),
            ineq: Box::new(|x: &DVector<f64>| {
                (
                    DVector::from_row_slice(&[x[0] - 0.5]),
                    DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                )
            }),
        };
        let sol = solve_nlp(&prob, &NlpOptions::default()).unwrap();
        assert!(matches!(sol.status, NlpStatus::Converged), "{:?}", sol.status);
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[1], 1.5, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.obj, 2.5, epsilon = 1e-4);
    }

    #[test]
    fn infeasible_reports_violation() {
        // x = 1 and x = -1 cannot both hold; the elastic subproblem still returns,
        // but the violation stays bounded away from zero.
        let prob = NlpProblem {
            n: 1,
            m_eq: 2,
            m_ineq: 0,
            x0: DVector::from_row_slice(&[0.3]),
            objective: Box::new(|x: &DVector<f64>| (x[0] * x[0], DVector::from_row_slice(&[2.0 * x[0]]))),
            eq: Box::new(|x: &DVector<f64>| {
                (
                    DVector::from_row_slice(&[x[0] - 1.0, x[0] + 1.0]),
                    DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
                )
            }),
            ineq: Box::new(no_ineq),
        };
        let sol = solve_nlp(&prob, &NlpOptions::default()).unwrap();
        assert!(sol.eq_violation > 0.5);
        assert!(!matches!(sol.status, NlpStatus::Converged));
    }
}
