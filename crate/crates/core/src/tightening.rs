//! Bounding-function-aware constraint tightening.
//!
//! Starting from the invariant-set-tightened boxes `X̂ = X ⊖ Box(ℰ)` and
//! `Û = U ⊖ Box(Kℰ)`, this module builds the further-restricted regions
//! `S̄ˣ` / `S̄ᵘ` whose members are reachable through the flat maps with their
//! whole componentwise bounding interval inside `X̂` / `Û`, and then solves
//! the scaling program
//!
//! ```text
//!   max  αˣ + αᵘ   s.t.  prev ⊆ α·prev + v ⊆ S̄
//! ```
//!
//! producing the per-iteration nominal constraint boxes.  Membership in `S̄`
//! is certified by a small witness NLP over the output window, seeded from
//! the inverse flat map; any solver failure is treated as "not a member"
//! (conservative - shrinks the boxes, never unsoundly grows them).
//!
//! Bounding components whose value is a data-independent constant (e.g. a
//! map whose image is an open interval, bounded only by its endpoint
//! constants) are excluded from the membership conditions: a constant bound
//! can never satisfy a strictly tightened box, and for those components the
//! plain box membership already provides the safety guarantee.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error_invariant::InvariantSet;
use crate::flat_system::{LiftedOutput, OutputWindow, SystemModel};
use crate::geometry::{box_pontryagin_diff, AxisBox, GeometryError};
use crate::solver::{solve_nlp, NlpOptions, NlpProblem};

/// Minimum forward progress (first output component) per window step allowed
/// inside witness searches; keeps the flat maps well defined.
const WITNESS_MIN_PROGRESS: f64 = 1e-3;
/// Tolerance for accepting a witness: equality residual and bound slack.
const WITNESS_TOL: f64 = 1e-6;
/// Relative tolerance of the bisection on the scaling factors.
const ALPHA_TOL: f64 = 5e-3;
/// Hard cap on the scaling factor growth phase.
const ALPHA_CAP: f64 = 512.0;

#[derive(Debug, Error)]
pub enum TighteningError {
    #[error("tightening infeasible: {0}")]
    Infeasible(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-iteration tightened constraint boxes and the scaling that produced
/// them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TightenedConstraints {
    /// Nominal state box for the MPC.
    pub x_bar: AxisBox,
    /// Nominal input box for the MPC.
    pub u_bar: AxisBox,
    /// State limits minus the error set box.
    pub x_hat: AxisBox,
    /// Input limits minus the error-feedback image box.
    pub u_hat: AxisBox,
    pub alpha_x: f64,
    pub alpha_u: f64,
    pub v_x: DVector<f64>,
    pub v_u: DVector<f64>,
    pub iteration: usize,
}

/// Which components of the stacked `(state, input)` bounding functions carry
/// window-dependent information.  Constant components are excluded from
/// membership conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundInformativeness {
    /// Length `n + m`; `true` when the lower bounding component varies.
    pub lower: Vec<bool>,
    /// Length `n + m`; `true` when the upper bounding component varies.
    pub upper: Vec<bool>,
}

/// Probe the model's bounding functions on a handful of distinct lifted
/// outputs and flag components whose bounds actually depend on the window.
pub fn detect_informative_bounds(model: &SystemModel) -> BoundInformativeness {
    let dim = model.n + model.m_in;
    let mut lows: Vec<Vec<f64>> = Vec::new();
    let mut highs: Vec<Vec<f64>> = Vec::new();
    // A few qualitatively different windows: straight/curved, slow/fast.
    let probes = [
        (5.0, 0.0, 0.4, 0.0),
        (20.0, 1.0, 2.0, 0.3),
        (30.0, -2.0, 1.0, -0.5),
        (8.0, 0.5, 3.0, 0.8),
        (45.0, -1.0, 0.6, 0.1),
    ];
    for (s0, e0, ds, de) in probes {
        let cols = [
            DVector::from_vec(vec![s0, e0]),
            DVector::from_vec(vec![s0 + ds, e0 + de]),
            DVector::from_vec(vec![s0 + 2.0 * ds, e0 + 1.5 * de]),
        ];
        let Ok(win) = OutputWindow::from_outputs(&cols) else { continue };
        let lifted = LiftedOutput(win.0.clone());
        if let Ok((lo, hi)) = model.bounding_eval(&lifted) {
            lows.push(lo.iter().copied().collect());
            highs.push(hi.iter().copied().collect());
        }
    }
    let varies = |rows: &Vec<Vec<f64>>, i: usize| -> bool {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for r in rows {
            min = min.min(r[i]);
            max = max.max(r[i]);
        }
        max - min > 1e-9
    };
    BoundInformativeness {
        lower: (0..dim).map(|i| varies(&lows, i)).collect(),
        upper: (0..dim).map(|i| varies(&highs, i)).collect(),
    }
}

/// Clamp raw optimization variables into a valid output window: columns are
/// projected into the position box and forward progress is floored, so the
/// flat maps stay defined at every NLP iterate.
fn window_cols(vars: &DVector<f64>, cols: usize, pos_box: &AxisBox) -> Vec<DVector<f64>> {
    let m = pos_box.dim();
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let mut c = DVector::zeros(m);
        for i in 0..m {
            c[i] = vars[k * m + i].clamp(pos_box.lb[i], pos_box.ub[i]);
        }
        if k > 0 {
            let prev0 = out[k - 1][0];
            if c[0] < prev0 + WITNESS_MIN_PROGRESS {
                c[0] = prev0 + WITNESS_MIN_PROGRESS;
            }
        }
        out.push(c);
    }
    out
}

/// Finite-difference Jacobian of `g` at `x` (forward differences).
fn fd_jacobian(
    g: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    rows: usize,
) -> DMatrix<f64> {
    let h = 1e-6;
    let g0 = g(x);
    let mut jac = DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp[j] += h;
        let gp = g(&xp);
        for i in 0..rows {
            jac[(i, j)] = (gp[i] - g0[i]) / h;
        }
    }
    jac
}

/// Certify `x ∈ S̄ˣ`: find an output window mapping to `x` whose informative
/// state bounding components stay inside `x_hat`.  Returns the witness
/// window, or `None` when no witness could be verified.
pub fn in_s_x(
    x: &DVector<f64>,
    x_hat: &AxisBox,
    model: &SystemModel,
    info: &BoundInformativeness,
) -> Option<OutputWindow> {
    if x.len() != model.n || !x_hat.contains(x, 1e-9) {
        return None;
    }
    let m = model.m_out;
    let pos_box = AxisBox::new(
        x_hat.lb.rows(0, m).into_owned(),
        x_hat.ub.rows(0, m).into_owned(),
    )
    .ok()?;
    for v_nom in [10.0, 6.0, 14.0, 3.0] {
        if let Some(w) = state_witness_attempt(x, x_hat, &pos_box, model, info, v_nom) {
            return Some(w);
        }
    }
    None
}

fn state_witness_attempt(
    x: &DVector<f64>,
    x_hat: &AxisBox,
    pos_box: &AxisBox,
    model: &SystemModel,
    info: &BoundInformativeness,
    v_nom: f64,
) -> Option<OutputWindow> {
    let n = model.n;
    let m = model.m_out;
    let r = model.r;
    let nv = m * r;

    // Seed from the inverse flat map: first column at the state's position,
    // second column advanced so the reconstructed heading matches exactly.
    let (s0, e0, epsi) = (x[0], x[1], x[2]);
    let q0 = 1.0 - e0 * curvature_of(model, s0);
    let mut ds = (model.dt * v_nom).max(2.0 * WITNESS_MIN_PROGRESS);
    let s_room = pos_box.ub[0] - s0;
    if s_room < 2.0 * WITNESS_MIN_PROGRESS {
        return None;
    }
    ds = ds.min(0.9 * s_room);
    let mut de = epsi.tan() * q0 * ds;
    // Keep the second column's lateral position inside the box.
    let e_room = if de >= 0.0 { pos_box.ub[1] - e0 } else { e0 - pos_box.lb[1] };
    if de.abs() > 0.9 * e_room {
        let scale = (0.9 * e_room / de.abs()).min(1.0);
        if scale <= 1e-6 {
            return None;
        }
        ds *= scale;
        de *= scale;
        if ds < 2.0 * WITNESS_MIN_PROGRESS {
            return None;
        }
    }
    let mut x0 = DVector::zeros(nv);
    x0[0] = s0;
    x0[1] = e0;
    x0[2] = s0 + ds;
    x0[3] = e0 + de;

    let eval_maps = |vars: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let cols = window_cols(vars, r, pos_box);
        let win = OutputWindow::from_outputs(&cols).expect("validated columns");
        let fx = model.reconstruct_state(&win).unwrap_or_else(|_| DVector::from_element(n, 1e6));
        let (lo, hi) = (model.bounds_state)(&win)
            .unwrap_or_else(|_| (DVector::from_element(n, 1e6), DVector::from_element(n, -1e6)));
        (fx, lo, hi)
    };

    // Inequality rows: variable box (2·nv), progress (r-1), informative
    // lower bounds (≤ n), informative upper bounds (≤ n).
    let low_idx: Vec<usize> = (0..n).filter(|&i| info.lower[i]).collect();
    let up_idx: Vec<usize> = (0..n).filter(|&i| info.upper[i]).collect();
    let m_ineq = 2 * nv + (r - 1) + low_idx.len() + up_idx.len();

    let ineq_fn = |vars: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(m_ineq);
        let mut k = 0;
        for c in 0..r {
            for i in 0..m {
                let v = vars[c * m + i];
                g[k] = pos_box.lb[i] - v;
                g[k + 1] = v - pos_box.ub[i];
                k += 2;
            }
        }
        for c in 1..r {
            g[k] = 2.0 * WITNESS_MIN_PROGRESS - (vars[c * m] - vars[(c - 1) * m]);
            k += 1;
        }
        let (_, lo, hi) = eval_maps(vars);
        for &i in &low_idx {
            g[k] = x_hat.lb[i] - lo[i];
            k += 1;
        }
        for &i in &up_idx {
            g[k] = hi[i] - x_hat.ub[i];
            k += 1;
        }
        g
    };
    let eq_fn = |vars: &DVector<f64>| -> DVector<f64> {
        let (fx, _, _) = eval_maps(vars);
        fx - x
    };

    let problem = NlpProblem {
        n: nv,
        m_eq: n,
        m_ineq,
        x0,
        objective: Box::new(|_v: &DVector<f64>| (0.0, DVector::zeros(nv))),
        eq: Box::new(|v: &DVector<f64>| {
            let h = eq_fn(v);
            let jac = fd_jacobian(&eq_fn, v, h.len());
            (h, jac)
        }),
        ineq: Box::new(|v: &DVector<f64>| {
            let g = ineq_fn(v);
            let jac = fd_jacobian(&ineq_fn, v, g.len());
            (g, jac)
        }),
    };
    let opts = NlpOptions { tol: 1e-8, max_iters: 60, penalty: 10.0 };
    let sol = solve_nlp(&problem, &opts).ok()?;
    if sol.eq_violation > WITNESS_TOL || sol.ineq_violation > WITNESS_TOL {
        return None;
    }

    // Re-verify on the raw (unclamped) solution.
    let cols = window_cols(&sol.x, r, pos_box);
    for (c, col) in cols.iter().enumerate() {
        let raw = sol.x.rows(c * m, m);
        if (col - raw).amax() > 1e-7 {
            return None;
        }
    }
    let win = OutputWindow::from_outputs(&cols).ok()?;
    let fx = model.reconstruct_state(&win).ok()?;
    if (&fx - x).amax() > WITNESS_TOL {
        return None;
    }
    let (lo, hi) = (model.bounds_state)(&win).ok()?;
    for &i in &low_idx {
        if lo[i] < x_hat.lb[i] - WITNESS_TOL {
            return None;
        }
    }
    for &i in &up_idx {
        if hi[i] > x_hat.ub[i] + WITNESS_TOL {
            return None;
        }
    }
    Some(win)
}

/// Certify `u ∈ S̄ᵘ`: find a lifted output mapping to `u` whose informative
/// input bounding components stay inside `u_hat`.  Witness columns are
/// restricted to `pos_box` (the position part of the tightened state box).
pub fn in_s_u(
    u: &DVector<f64>,
    u_hat: &AxisBox,
    pos_box: &AxisBox,
    model: &SystemModel,
    info: &BoundInformativeness,
) -> Option<LiftedOutput> {
    if u.len() != model.m_in || !u_hat.contains(u, 1e-9) {
        return None;
    }
    for s0 in [200.0f64.sqrt(), 30.0, 5.0, 45.0] {
        if let Some(l) = input_witness_attempt(u, u_hat, pos_box, model, info, s0) {
            return Some(l);
        }
    }
    None
}

fn input_witness_attempt(
    u: &DVector<f64>,
    u_hat: &AxisBox,
    pos_box: &AxisBox,
    model: &SystemModel,
    info: &BoundInformativeness,
    s0_pref: f64,
) -> Option<LiftedOutput> {
    let n = model.n;
    let m = model.m_out;
    let m_in = model.m_in;
    let cols_n = model.r + 1;
    let nv = m * cols_n;
    let (v_cmd, delta_cmd) = (u[0], u[1]);
    if v_cmd <= 0.0 {
        return None;
    }

    // Closed-form seed on the centerline: a straight first step realises the
    // speed exactly, then the third column bends to realise the steering.
    let dt = model.dt;
    let wheelbase = wheelbase_of(model);
    let ds = dt * v_cmd;
    let s0 = s0_pref.clamp(pos_box.lb[0], (pos_box.ub[0] - 2.1 * ds).max(pos_box.lb[0]));
    if s0 + 2.0 * ds > pos_box.ub[0] {
        return None;
    }
    let c0 = curvature_of(model, s0);
    let dpsi = delta_cmd.tan() * dt * v_cmd / wheelbase - ds * c0;
    let s1 = s0 + ds;
    let q1 = 1.0 - 0.0 * curvature_of(model, s1);
    let de2 = dpsi.tan() * q1 * ds;
    // The witness needs a lateral offset of de2 across one step; skip seeds
    // that cannot fit it inside the lateral span at all.
    if de2.abs() > pos_box.ub[1] - pos_box.lb[1] {
        return None;
    }
    let e_mid = 0.0f64.clamp(pos_box.lb[1], pos_box.ub[1]);
    let mut x0 = DVector::zeros(nv);
    x0[0] = s0;
    x0[1] = e_mid;
    x0[2] = s1;
    x0[3] = e_mid;
    x0[4] = s1 + ds;
    x0[5] = (e_mid + de2).clamp(pos_box.lb[1], pos_box.ub[1]);

    let eval_maps = |vars: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let cols = window_cols(vars, cols_n, pos_box);
        let lifted = LiftedOutput(OutputWindow::from_outputs(&cols).expect("validated").0);
        let fu = model
            .reconstruct_input(&lifted)
            .unwrap_or_else(|_| DVector::from_element(m_in, 1e6));
        let (lo, hi) = (model.bounds_input)(&lifted).unwrap_or_else(|_| {
            (DVector::from_element(m_in, 1e6), DVector::from_element(m_in, -1e6))
        });
        (fu, lo, hi)
    };

    let low_idx: Vec<usize> = (0..m_in).filter(|&i| info.lower[n + i]).collect();
    let up_idx: Vec<usize> = (0..m_in).filter(|&i| info.upper[n + i]).collect();
    let m_ineq = 2 * nv + (cols_n - 1) + low_idx.len() + up_idx.len();

    let ineq_fn = |vars: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(m_ineq);
        let mut k = 0;
        for c in 0..cols_n {
            for i in 0..m {
                let v = vars[c * m + i];
                g[k] = pos_box.lb[i] - v;
                g[k + 1] = v - pos_box.ub[i];
                k += 2;
            }
        }
        for c in 1..cols_n {
            g[k] = 2.0 * WITNESS_MIN_PROGRESS - (vars[c * m] - vars[(c - 1) * m]);
            k += 1;
        }
        let (_, lo, hi) = eval_maps(vars);
        for &i in &low_idx {
            g[k] = u_hat.lb[i] - lo[i];
            k += 1;
        }
        for &i in &up_idx {
            g[k] = hi[i] - u_hat.ub[i];
            k += 1;
        }
        g
    };
    let eq_fn = |vars: &DVector<f64>| -> DVector<f64> {
        let (fu, _, _) = eval_maps(vars);
        fu - u
    };

    let problem = NlpProblem {
        n: nv,
        m_eq: m_in,
        m_ineq,
        x0,
        objective: Box::new(|_v: &DVector<f64>| (0.0, DVector::zeros(nv))),
        eq: Box::new(|v: &DVector<f64>| {
            let h = eq_fn(v);
            let jac = fd_jacobian(&eq_fn, v, h.len());
            (h, jac)
        }),
        ineq: Box::new(|v: &DVector<f64>| {
            let g = ineq_fn(v);
            let jac = fd_jacobian(&ineq_fn, v, g.len());
            (g, jac)
        }),
    };
    let opts = NlpOptions { tol: 1e-8, max_iters: 60, penalty: 10.0 };
    let sol = solve_nlp(&problem, &opts).ok()?;
    if sol.eq_violation > WITNESS_TOL || sol.ineq_violation > WITNESS_TOL {
        return None;
    }

    let cols = window_cols(&sol.x, cols_n, pos_box);
    for (c, col) in cols.iter().enumerate() {
        let raw = sol.x.rows(c * m, m);
        if (col - raw).amax() > 1e-7 {
            return None;
        }
    }
    let lifted = LiftedOutput(OutputWindow::from_outputs(&cols).ok()?.0);
    let fu = model.reconstruct_input(&lifted).ok()?;
    if (&fu - u).amax() > WITNESS_TOL {
        return None;
    }
    let (lo, hi) = (model.bounds_input)(&lifted).ok()?;
    for &i in &low_idx {
        if lo[i] < u_hat.lb[i] - WITNESS_TOL {
            return None;
        }
    }
    for &i in &up_idx {
        if hi[i] > u_hat.ub[i] + WITNESS_TOL {
            return None;
        }
    }
    Some(lifted)
}

/// The model's curvature at `s`, recovered through the output map of a probe
/// state (keeps this module independent of the concrete parameter struct).
fn curvature_of(model: &SystemModel, s: f64) -> f64 {
    // One nominal step from (s, 0, 0) with v = 1, δ = 0 moves the heading by
    // exactly -dt·C(s).
    let x = DVector::from_vec(vec![s, 0.0, 0.0]);
    let u = DVector::from_vec(vec![1.0, 0.0]);
    let nxt = model.step(&x, &u);
    -nxt[2] / model.dt
}

/// Wheelbase recovered from the steering Jacobian at a probe point:
/// `∂f₃/∂δ = dt·v/L` at δ = 0.
fn wheelbase_of(model: &SystemModel) -> f64 {
    let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
    let u = DVector::from_vec(vec![1.0, 0.0]);
    let (_, b) = model.jacobians(&x, &u, 1e-6);
    model.dt / b[(2, 1)]
}

/// Points gridding all `2·n` facets of a box, `density` per edge (includes
/// edge endpoints), deduplicated, corners first (they fail earliest).
pub fn grid_facet_points(b: &AxisBox, density: usize) -> Vec<DVector<f64>> {
    let n = b.dim();
    let density = density.max(2);
    let lin = |lo: f64, hi: f64| -> Vec<f64> {
        (0..density)
            .map(|k| lo + (hi - lo) * k as f64 / (density - 1) as f64)
            .collect()
    };
    let mut pts: Vec<DVector<f64>> = Vec::new();
    for fixed in 0..n {
        for side in 0..2 {
            let fval = if side == 0 { b.lb[fixed] } else { b.ub[fixed] };
            // Iterate the grid over the free dims via mixed-radix counting.
            let free: Vec<usize> = (0..n).filter(|&i| i != fixed).collect();
            let grids: Vec<Vec<f64>> = free.iter().map(|&i| lin(b.lb[i], b.ub[i])).collect();
            let total: usize = grids.iter().map(|g| g.len()).product();
            for idx in 0..total {
                let mut rem = idx;
                let mut p = DVector::zeros(n);
                p[fixed] = fval;
                for (gi, &i) in free.iter().enumerate() {
                    let g = &grids[gi];
                    p[i] = g[rem % g.len()];
                    rem /= g.len();
                }
                pts.push(p);
            }
        }
    }
    // Dedup (corners repeat across facets) and order corners first.
    let mut uniq: Vec<DVector<f64>> = Vec::new();
    'outer: for p in pts {
        for q in &uniq {
            if (q - &p).amax() < 1e-12 {
                continue 'outer;
            }
        }
        uniq.push(p);
    }
    let extremeness = |p: &DVector<f64>| -> usize {
        (0..n)
            .filter(|&i| (p[i] - b.lb[i]).abs() < 1e-12 || (p[i] - b.ub[i]).abs() < 1e-12)
            .count()
    };
    uniq.sort_by_key(|p| std::cmp::Reverse(extremeness(p)));
    uniq
}

fn scaled_box(prev: &AxisBox, alpha: f64, v: &DVector<f64>) -> AxisBox {
    AxisBox::new(alpha * &prev.lb + v, alpha * &prev.ub + v).expect("alpha >= 0 keeps lb <= ub")
}

/// `v` range keeping `prev ⊆ alpha·prev + v`: `(1-alpha)·ub ≤ v ≤ (1-alpha)·lb`.
fn inclusion_window(prev: &AxisBox, alpha: f64) -> AxisBox {
    AxisBox::new((1.0 - alpha) * &prev.ub, (1.0 - alpha) * &prev.lb)
        .expect("well ordered for alpha >= 1")
}

/// One axis (state or input) of the scaling program: bisection on `alpha`
/// with a deterministic short list of translation candidates per level.
fn solve_axis(
    prev: &AxisBox,
    hat: &AxisBox,
    relaxed: bool,
    grid_density: usize,
    member: &(dyn Fn(&DVector<f64>) -> bool + Sync),
) -> Result<(f64, DVector<f64>, AxisBox), TighteningError> {
    let candidates = |alpha: f64| -> Vec<DVector<f64>> {
        let centered = hat.center() - alpha * prev.center();
        if relaxed {
            vec![centered, (1.0 - alpha) * prev.center()]
        } else {
            let w = inclusion_window(prev, alpha.max(1.0));
            let mut c = centered;
            for i in 0..c.len() {
                c[i] = c[i].clamp(w.lb[i], w.ub[i]);
            }
            vec![c, (1.0 - alpha) * prev.center()]
        }
    };
    let feasible = |alpha: f64| -> Option<DVector<f64>> {
        for v in candidates(alpha) {
            let b = scaled_box(prev, alpha, &v);
            if !hat.contains(&b.lb, 0.0) || !hat.contains(&b.ub, 0.0) {
                continue;
            }
            let pts = grid_facet_points(&b, grid_density);
            let ok = pts.par_iter().all(member);
            if ok {
                return Some(v);
            }
        }
        None
    };

    // Feasibility floor: alpha = 1, v = 0 for the recursive case.
    let (mut lo, mut lo_v) = if relaxed {
        let mut found = None;
        for a in [1.0, 0.5, 0.1, 0.01, 0.0] {
            if let Some(v) = feasible(a) {
                found = Some((a, v));
                break;
            }
        }
        found.ok_or_else(|| {
            TighteningError::Infeasible("no feasible scaling at the first iteration".into())
        })?
    } else {
        let b1 = scaled_box(prev, 1.0, &DVector::zeros(prev.dim()));
        let pts = grid_facet_points(&b1, grid_density);
        if pts.par_iter().all(member) && hat.contains(&b1.lb, 0.0) && hat.contains(&b1.ub, 0.0)
        {
            (1.0, DVector::zeros(prev.dim()))
        } else {
            // The previous box should remain feasible; accept it unscaled
            // rather than failing (conservative floor).
            return Ok((1.0, DVector::zeros(prev.dim()), prev.clone()));
        }
    };

    // Growth phase, then bisection.
    let mut hi = (lo.max(1e-3)) * 2.0;
    let mut hi_infeasible = None;
    while hi < ALPHA_CAP {
        match feasible(hi) {
            Some(v) => {
                lo = hi;
                lo_v = v;
                hi *= 2.0;
            }
            None => {
                hi_infeasible = Some(hi);
                break;
            }
        }
    }
    if let Some(mut bad) = hi_infeasible {
        while bad - lo > ALPHA_TOL * lo.max(1.0) {
            let mid = 0.5 * (lo + bad);
            match feasible(mid) {
                Some(v) => {
                    lo = mid;
                    lo_v = v;
                }
                None => bad = mid,
            }
        }
    }
    let result = scaled_box(prev, lo, &lo_v);
    Ok((lo, lo_v, result))
}

/// Solve the scaling program for both axes and assemble the iteration's
/// tightened constraints.  `iteration == 1` relaxes the
/// previous-box-inclusion constraint (seeding case).
#[allow(clippy::too_many_arguments)]
pub fn solve_tightening(
    prev_x: &AxisBox,
    prev_u: &AxisBox,
    inv: &InvariantSet,
    model: &SystemModel,
    x_limits: &AxisBox,
    u_limits: &AxisBox,
    grid_density: usize,
    iteration: usize,
) -> Result<TightenedConstraints, TighteningError> {
    let x_hat = box_pontryagin_diff(x_limits, &inv.rpi_box)
        .map_err(|e| TighteningError::Infeasible(format!("state box minus error set: {e}")))?;
    let u_hat = box_pontryagin_diff(u_limits, &inv.input_image_box)
        .map_err(|e| TighteningError::Infeasible(format!("input box minus feedback image: {e}")))?;
    let info = detect_informative_bounds(model);
    let relaxed = iteration <= 1;

    let member_x = |p: &DVector<f64>| in_s_x(p, &x_hat, model, &info).is_some();
    let (alpha_x, v_x, x_bar) = solve_axis(prev_x, &x_hat, relaxed, grid_density, &member_x)?;

    let m = model.m_out;
    let pos_box = AxisBox::new(
        x_hat.lb.rows(0, m).into_owned(),
        x_hat.ub.rows(0, m).into_owned(),
    )?;
    let member_u = |p: &DVector<f64>| in_s_u(p, &u_hat, &pos_box, model, &info).is_some();
    let (alpha_u, v_u, u_bar) = solve_axis(prev_u, &u_hat, relaxed, grid_density, &member_u)?;

    Ok(TightenedConstraints {
        x_bar,
        u_bar,
        x_hat,
        u_hat,
        alpha_x,
        alpha_u,
        v_x,
        v_u,
        iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bicycle::{bicycle_model, BicycleParams};
    use crate::error_invariant::{compute_rpi, linearize_and_gain};
    use crate::geometry::VPolytope;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn model() -> SystemModel {
        bicycle_model(BicycleParams::default())
    }

    fn zero_invariant() -> InvariantSet {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::zeros(3, 2);
        let k = DMatrix::zeros(2, 3);
        let d = VPolytope::new(vec![DVector::zeros(3)]).unwrap();
        compute_rpi(&a, &b, &k, &d, 10).unwrap()
    }

    #[test]
    fn probe_constants_detected() {
        let info = detect_informative_bounds(&model());
        // States: positions exact, heading interval varies.
        assert_eq!(&info.lower[..3], &[true, true, true]);
        assert_eq!(&info.upper[..3], &[true, true, true]);
        // Inputs: speed bounds vary, steering bounds are the constant ±π/2.
        assert!(info.lower[3] && info.upper[3]);
        assert!(!info.lower[4] && !info.upper[4]);
    }

    #[test]
    fn state_membership_interior_point() {
        let m = model();
        let info = detect_informative_bounds(&m);
        let x_hat = BicycleParams::default().state_box();
        let x = DVector::from_vec(vec![10.0, 0.0, 0.0]);
        let w = in_s_x(&x, &x_hat, &m, &info).expect("interior point certified");
        let back = m.reconstruct_state(&w).unwrap();
        assert!((back - &x).amax() < 1e-6);
    }

    #[test]
    fn state_membership_rejects_outside_box() {
        let m = model();
        let info = detect_informative_bounds(&m);
        let x_hat = BicycleParams::default().state_box();
        let x = DVector::from_vec(vec![10.0, 5.0, 0.0]);
        assert!(in_s_x(&x, &x_hat, &m, &info).is_none());
    }

    #[test]
    fn state_membership_heading_spread() {
        // At e_y = 0 the curvature factor is exactly 1, so the heading
        // bounding interval spreads tan(eψ) by [40/49, 40/31]; the upper end
        // exits the π/3 bound whenever atan(tan(eψ)·40/31) > π/3, i.e.
        // eψ > atan(tan(π/3)·31/40) ≈ 0.9307 — even though eψ itself is
        // inside the box.
        let m = model();
        let info = detect_informative_bounds(&m);
        let x_hat = BicycleParams::default().state_box();
        let inside = DVector::from_vec(vec![10.0, 0.0, 0.80]);
        assert!(in_s_x(&inside, &x_hat, &m, &info).is_some());
        let spread_exit = DVector::from_vec(vec![10.0, 0.0, 0.99]);
        assert!(in_s_x(&spread_exit, &x_hat, &m, &info).is_none());
    }

    #[test]
    fn input_membership_interior_and_witness_roundtrip() {
        let m = model();
        let info = detect_informative_bounds(&m);
        let u_hat = AxisBox::from_slices(&[2.0, -0.6], &[16.0, 0.6]).unwrap();
        let pos = AxisBox::from_slices(&[-2.0, -4.5], &[60.0, 4.5]).unwrap();
        let u = DVector::from_vec(vec![10.0, 0.1]);
        let l = in_s_u(&u, &u_hat, &pos, &m, &info).expect("interior input certified");
        let back = m.reconstruct_input(&l).unwrap();
        assert!((back - &u).amax() < 1e-6);
    }

    #[test]
    fn input_membership_speed_spread_oracle() {
        // Forcing the witness to the centerline (e_y ≈ 0) makes the upper
        // speed bound exactly (49/40)·v; the pair below brackets it.
        let m = model();
        let info = detect_informative_bounds(&m);
        let pos = AxisBox::from_slices(&[-2.0, -1e-6], &[60.0, 1e-6]).unwrap();
        let u = DVector::from_vec(vec![10.0, 0.0]);
        let tight = AxisBox::from_slices(&[0.0, -0.6], &[10.2, 0.6]).unwrap();
        assert!(in_s_u(&u, &tight, &pos, &m, &info).is_none());
        let loose = AxisBox::from_slices(&[0.0, -0.6], &[13.0, 0.6]).unwrap();
        assert!(in_s_u(&u, &loose, &pos, &m, &info).is_some());
    }

    #[test]
    fn facet_grid_counts_and_membership() {
        let b = AxisBox::from_slices(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        let pts = grid_facet_points(&b, 3);
        // 6 facets × 9 points = 54 raw; shared edges/corners dedup to 26
        // (the 3×3×3 lattice minus the interior point).
        assert_eq!(pts.len(), 26);
        for p in &pts {
            assert!(b.contains(p, 1e-12));
            let on_boundary = (0..3).any(|i| {
                (p[i] - b.lb[i]).abs() < 1e-12 || (p[i] - b.ub[i]).abs() < 1e-12
            });
            assert!(on_boundary);
        }
        // Corners sorted first.
        assert_eq!(
            (0..3)
                .filter(|&i| (pts[0][i] - b.lb[i]).abs() < 1e-12
                    || (pts[0][i] - b.ub[i]).abs() < 1e-12)
                .count(),
            3
        );
    }

    #[test]
    fn tightening_first_iteration_grows_seed() {
        let m = model();
        let inv = zero_invariant();
        let x_limits = BicycleParams::default().state_box();
        let u_limits = AxisBox::from_slices(&[4.0, -0.5], &[14.0, 0.5]).unwrap();
        let seed_x = AxisBox::from_slices(&[28.0, -0.5, -0.05], &[32.0, 0.5, 0.05]).unwrap();
        let seed_u = AxisBox::from_slices(&[9.0, -0.05], &[11.0, 0.05]).unwrap();
        let t = solve_tightening(&seed_x, &seed_u, &inv, &m, &x_limits, &u_limits, 3, 1).unwrap();
        assert!(t.alpha_x > 1.0, "alpha_x = {}", t.alpha_x);
        assert!(t.alpha_u > 1.0, "alpha_u = {}", t.alpha_u);
        for i in 0..3 {
            assert!(t.x_bar.lb[i] >= t.x_hat.lb[i] - 1e-9);
            assert!(t.x_bar.ub[i] <= t.x_hat.ub[i] + 1e-9);
        }
        for i in 0..2 {
            assert!(t.u_bar.lb[i] >= t.u_hat.lb[i] - 1e-9);
            assert!(t.u_bar.ub[i] <= t.u_hat.ub[i] + 1e-9);
        }
        // The heading range must respect the bounding-spread limit ±0.9307.
        assert!(t.x_bar.ub[2] <= 0.9308);
        assert!(t.x_bar.lb[2] >= -0.9308);
    }

    #[test]
    fn tightening_recursion_keeps_previous_box() {
        let m = model();
        let inv = zero_invariant();
        let x_limits = BicycleParams::default().state_box();
        let u_limits = AxisBox::from_slices(&[4.0, -0.5], &[14.0, 0.5]).unwrap();
        let seed_x = AxisBox::from_slices(&[28.0, -0.5, -0.05], &[32.0, 0.5, 0.05]).unwrap();
        let seed_u = AxisBox::from_slices(&[9.0, -0.05], &[11.0, 0.05]).unwrap();
        let t1 = solve_tightening(&seed_x, &seed_u, &inv, &m, &x_limits, &u_limits, 3, 1).unwrap();
        let t2 =
            solve_tightening(&t1.x_bar, &t1.u_bar, &inv, &m, &x_limits, &u_limits, 3, 2).unwrap();
        assert!(t2.alpha_x >= 1.0 - 1e-9);
        assert!(t2.alpha_u >= 1.0 - 1e-9);
        for i in 0..3 {
            assert!(t2.x_bar.lb[i] <= t1.x_bar.lb[i] + 1e-7);
            assert!(t2.x_bar.ub[i] >= t1.x_bar.ub[i] - 1e-7);
        }
        for i in 0..2 {
            assert!(t2.u_bar.lb[i] <= t1.u_bar.lb[i] + 1e-7);
            assert!(t2.u_bar.ub[i] >= t1.u_bar.ub[i] - 1e-7);
        }
    }

    #[test]
    fn tightening_grows_as_invariant_shrinks() {
        let m = model();
        let p = BicycleParams::default();
        let x_ref = DVector::from_vec(vec![200.0f64.sqrt(), 0.0, 0.0]);
        let u_ref = DVector::from_vec(vec![10.0, 0.0]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.05, 1.0, 2.0]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 20.0]));
        let (a, b, pol) = linearize_and_gain(&m, &x_ref, &u_ref, &q, &r).unwrap();
        let d_big = AxisBox::from_slices(&[-0.15, -0.15, -0.05], &[0.15, 0.15, 0.05])
            .unwrap()
            .to_vpolytope();
        let d_small = AxisBox::from_slices(&[-0.075, -0.075, -0.025], &[0.075, 0.075, 0.025])
            .unwrap()
            .to_vpolytope();
        let inv1 = compute_rpi(&a, &b, &pol.k, &d_big, 60).unwrap();
        let inv2 = compute_rpi(&a, &b, &pol.k, &d_small, 60).unwrap();

        let x_limits = p.state_box();
        let u_limits = AxisBox::from_slices(&[4.0, -0.5], &[14.0, 0.5]).unwrap();
        let seed_x = AxisBox::from_slices(&[28.0, -0.4, -0.04], &[32.0, 0.4, 0.04]).unwrap();
        let seed_u = AxisBox::from_slices(&[9.0, -0.04], &[11.0, 0.04]).unwrap();
        let t1 =
            solve_tightening(&seed_x, &seed_u, &inv1, &m, &x_limits, &u_limits, 3, 1).unwrap();
        let t2 =
            solve_tightening(&t1.x_bar, &t1.u_bar, &inv2, &m, &x_limits, &u_limits, 3, 2).unwrap();
        for i in 0..3 {
            assert!(t2.x_bar.lb[i] <= t1.x_bar.lb[i] + 1e-7);
            assert!(t2.x_bar.ub[i] >= t1.x_bar.ub[i] - 1e-7);
        }
        for i in 0..2 {
            assert!(t2.u_bar.lb[i] <= t1.u_bar.lb[i] + 1e-7);
            assert!(t2.u_bar.ub[i] >= t1.u_bar.ub[i] - 1e-7);
        }

        // Safety transfer: tightened nominal pairs plus tube errors stay in
        // the limit boxes.
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..2000 {
            let xb = t2.x_bar.sample(&mut rng);
            let ub = t2.u_bar.sample(&mut rng);
            let e = inv2.zonotope.sample(&mut rng);
            let x_tot = &xb + &e;
            let u_tot = &ub + &pol.k * &e;
            assert!(x_limits.contains(&x_tot, 1e-9));
            assert!(u_limits.contains(&u_tot, 1e-9));
        }
    }
}
