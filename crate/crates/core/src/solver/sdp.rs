//! Dense primal-dual interior-point method for small semidefinite programs.
//!
//! Handles `min qᵀx  s.t. Ax + s = b, s ∈ K` with `K` a product of zero,
//! nonnegative and PSD-triangle cones, using Nesterov–Todd scaling and an
//! adaptive-centering predictor step. Everything is dense; intended problem
//! sizes are a few hundred variables with PSD blocks of side ≲ 20, where a
//! handful of LU factorizations per solve is cheap.

use nalgebra::{DMatrix, DVector};

use super::{smat, svec, Cone, ConicProblem, ConicSolution, SolveError, SolveStatus};

const MAX_ITERS: usize = 200;
const TOL: f64 = 1e-9;
const ALMOST_TOL: f64 = 1e-6;

/// Per-block view of the cone rows.
#[derive(Clone, Copy)]
struct Block {
    cone: Cone,
    offset: usize,
}

struct State {
    s: DVector<f64>,
    z: DVector<f64>,
}

pub fn solve(problem: &ConicProblem) -> Result<ConicSolution, SolveError> {
    let n = problem.q.len();
    let rows = problem.b.len();
    let blocks = layout(&problem.cones);

    let mut x = DVector::zeros(n);
    let mut st = State { s: DVector::zeros(rows), z: DVector::zeros(rows) };
    let s_scale = 1.0 + problem.b.amax();
    let z_scale = 1.0 + problem.q.amax();
    for blk in &blocks {
        init_block(blk, &mut st.s, s_scale);
        init_block(blk, &mut st.z, z_scale);
    }

    let nu: f64 = blocks
        .iter()
        .map(|b| match b.cone {
            Cone::Zero(_) => 0.0,
            Cone::Nonneg(k) => k as f64,
            Cone::PsdTriangle(k) => k as f64,
            Cone::Soc(_) => unreachable!(),
        })
        .sum();
    if nu == 0.0 {
        return Err(SolveError::Unsupported("no conic rows".into()));
    }

    let mut status = SolveStatus::MaxIterations;
    let mut best_gap = f64::INFINITY;
    for _iter in 0..MAX_ITERS {
        // Residuals. Zero-cone rows carry no slack.
        let r_d = -(&problem.q + problem.a.transpose() * &st.z);
        let mut r_p = &problem.b - &problem.a * &x;
        for blk in &blocks {
            if !matches!(blk.cone, Cone::Zero(_)) {
                for r in blk.offset..blk.offset + blk.cone.rows() {
                    r_p[r] -= st.s[r];
                }
            }
        }
        let mu = complementarity(&blocks, &st) / nu;
        let rp_norm = r_p.amax() / (1.0 + problem.b.amax());
        let rd_norm = r_d.amax() / (1.0 + problem.q.amax());
        let pobj = problem.q.dot(&x);
        let dobj = -problem.b.dot(&st.z);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs().max(dobj.abs()));
        best_gap = best_gap.min(gap.max(rp_norm).max(rd_norm));
        if rp_norm <= TOL && rd_norm <= TOL && (gap <= TOL || mu <= TOL) {
            status = SolveStatus::Optimal;
            break;
        }
        if !mu.is_finite() || st.s.amax() > 1e14 || st.z.amax() > 1e14 {
            status = SolveStatus::NumericalError;
            break;
        }

        // NT scaling per block, then one factorization reused for the
        // predictor and the combined step.
        let scalings: Vec<Scaling> = blocks.iter().map(|b| Scaling::build(b, &st)).collect();
        let kkt = assemble_kkt(problem, &blocks, &scalings);
        let lu = kkt.clone().lu();

        // Predictor (σ = 0) to gauge the achievable progress.
        let (_dx_a, dz_a, ds_a) =
            solve_direction(problem, &blocks, &scalings, &lu, &r_p, &r_d, &st, 0.0, mu);
        let alpha_a = max_step(&blocks, &st, &ds_a, &dz_a);
        let mu_aff = {
            let mut trial = State { s: st.s.clone(), z: st.z.clone() };
            trial.s.axpy(alpha_a, &ds_a, 1.0);
            trial.z.axpy(alpha_a, &dz_a, 1.0);
            complementarity(&blocks, &trial) / nu
        };
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3).max(1e-10);

        let (dx, dz, ds) =
            solve_direction(problem, &blocks, &scalings, &lu, &r_p, &r_d, &st, sigma, mu);
        let alpha = 0.99 * max_step(&blocks, &st, &ds, &dz);
        let alpha = alpha.min(1.0);
        if !alpha.is_finite() || alpha <= 1e-14 {
            status = SolveStatus::NumericalError;
            break;
        }
        x.axpy(alpha, &dx, 1.0);
        st.s.axpy(alpha, &ds, 1.0);
        st.z.axpy(alpha, &dz, 1.0);
    }

    if status == SolveStatus::MaxIterations && best_gap <= ALMOST_TOL {
        status = SolveStatus::AlmostOptimal;
    }
    let obj = problem.q.dot(&x);
    Ok(ConicSolution { x, z: st.z, s: st.s, obj, status })
}

fn layout(cones: &[Cone]) -> Vec<Block> {
    let mut out = Vec::with_capacity(cones.len());
    let mut offset = 0;
    for &cone in cones {
        out.push(Block { cone, offset });
        offset += cone.rows();
    }
    out
}

fn init_block(blk: &Block, v: &mut DVector<f64>, scale: f64) {
    match blk.cone {
        Cone::Zero(_) => {}
        Cone::Nonneg(k) => {
            for i in 0..k {
                v[blk.offset + i] = scale;
            }
        }
        Cone::PsdTriangle(k) => {
            let ident = svec(&(DMatrix::identity(k, k) * scale));
            for (i, val) in ident.iter().enumerate() {
                v[blk.offset + i] = *val;
            }
        }
        Cone::Soc(_) => unreachable!(),
    }
}

fn complementarity(blocks: &[Block], st: &State) -> f64 {
    let mut total = 0.0;
    for blk in blocks {
        match blk.cone {
            Cone::Zero(_) => {}
            _ => {
                for r in blk.offset..blk.offset + blk.cone.rows() {
                    total += st.s[r] * st.z[r];
                }
            }
        }
    }
    // svec is an isometry, so the PSD contribution ⟨svec S, svec Z⟩ = tr(SZ).
    total
}

/// NT scaling data for one block.
enum Scaling {
    None,
    Diag(DVector<f64>),
    /// `r` with `S = RΛRᵀ`, `Z = R^{-T}ΛR^{-1}`; `w = RRᵀ` maps Z to S.
    Psd { w: DMatrix<f64>, zinv: DMatrix<f64>, smat_s: DMatrix<f64> },
}

impl Scaling {
    fn build(blk: &Block, st: &State) -> Scaling {
        match blk.cone {
            Cone::Zero(_) => Scaling::None,
            Cone::Nonneg(k) => {
                let mut d = DVector::zeros(k);
                for i in 0..k {
                    d[i] = st.s[blk.offset + i] / st.z[blk.offset + i];
                }
                Scaling::Diag(d)
            }
            Cone::PsdTriangle(k) => {
                let t = k * (k + 1) / 2;
                let sv = st.s.rows(blk.offset, t).clone_owned();
                let zv = st.z.rows(blk.offset, t).clone_owned();
                let sm = smat(&sv.clone_owned(), k);
                let zm = smat(&zv.clone_owned(), k);
                let ls = sm.clone().cholesky().map(|c| c.l());
                let lz = zm.clone().cholesky().map(|c| c.l());
                let (ls, lz) = match (ls, lz) {
                    (Some(a), Some(b)) => (a, b),
                    // Fall back to a crude symmetric scaling when an iterate
                    // grazes the boundary; the step-length guard keeps the
                    // next iterate interior.
                    _ => (DMatrix::identity(k, k), DMatrix::identity(k, k)),
                };
                let m = lz.transpose() * &ls;
                let svd = m.svd(true, true);
                let u = svd.u.as_ref().expect("svd");
                let vt = svd.v_t.as_ref().expect("svd");
                let sing = &svd.singular_values;
                let mut lam_is = DMatrix::zeros(k, k);
                for i in 0..k {
                    lam_is[(i, i)] = 1.0 / sing[i].max(1e-300).sqrt();
                }
                let r = &ls * vt.transpose() * &lam_is;
                let _ = u;
                let w = &r * r.transpose();
                let zinv = zm
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .unwrap_or_else(|| zm.clone().lu().try_inverse().unwrap_or(DMatrix::identity(k, k)));
                Scaling::Psd { w, zinv, smat_s: sm }
            }
            Cone::Soc(_) => unreachable!(),
        }
    }
}

/// `[[δI, Aᵀ], [A, -H-δI]]` with `H` the scaled cone metric per block.
fn assemble_kkt(problem: &ConicProblem, blocks: &[Block], scalings: &[Scaling]) -> DMatrix<f64> {
    let n = problem.q.len();
    let rows = problem.b.len();
    let reg = 1e-10;
    let mut kkt = DMatrix::zeros(n + rows, n + rows);
    for i in 0..n {
        kkt[(i, i)] = reg;
    }
    for i in 0..rows {
        for j in 0..n {
            let v = problem.a[(i, j)];
            kkt[(n + i, j)] = v;
            kkt[(j, n + i)] = v;
        }
        kkt[(n + i, n + i)] = -reg;
    }
    for (blk, sc) in blocks.iter().zip(scalings) {
        match sc {
            Scaling::None => {}
            Scaling::Diag(d) => {
                for (i, di) in d.iter().enumerate() {
                    let r = n + blk.offset + i;
                    kkt[(r, r)] -= *di;
                }
            }
            Scaling::Psd { w, .. } => {
                // Symmetric Kronecker product of W with itself in svec
                // coordinates: H[:, col] = svec(W E_col W).
                let k = w.nrows();
                let t = k * (k + 1) / 2;
                let mut col_idx = 0;
                for j in 0..k {
                    for i in 0..=j {
                        let mut e = DMatrix::zeros(k, k);
                        if i == j {
                            e[(i, j)] = 1.0;
                        } else {
                            let v = 1.0 / std::f64::consts::SQRT_2;
                            e[(i, j)] = v;
                            e[(j, i)] = v;
                        }
                        let col = svec(&(w * e * w));
                        for r in 0..t {
                            kkt[(n + blk.offset + r, n + blk.offset + col_idx)] -= col[r];
                        }
                        col_idx += 1;
                    }
                }
            }
        }
    }
    kkt
}

#[allow(clippy::too_many_arguments)]
fn solve_direction(
    problem: &ConicProblem,
    blocks: &[Block],
    scalings: &[Scaling],
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r_p: &DVector<f64>,
    r_d: &DVector<f64>,
    st: &State,
    sigma: f64,
    mu: f64,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = problem.q.len();
    let rows = problem.b.len();
    // d_c = σμ Z^{-1} − S per block (σ = 0 for the predictor).
    let mut d_c = DVector::zeros(rows);
    for (blk, sc) in blocks.iter().zip(scalings) {
        match sc {
            Scaling::None => {}
            Scaling::Diag(_) => {
                for i in blk.offset..blk.offset + blk.cone.rows() {
                    d_c[i] = sigma * mu / st.z[i] - st.s[i];
                }
            }
            Scaling::Psd { zinv, smat_s, .. } => {
                let k = zinv.nrows();
                let dm = zinv * (sigma * mu) - smat_s;
                let dv = svec(&dm);
                for (i, v) in dv.iter().enumerate() {
                    d_c[blk.offset + i] = *v;
                }
                let _ = k;
            }
        }
    }
    let mut rhs = DVector::zeros(n + rows);
    for i in 0..n {
        rhs[i] = r_d[i];
    }
    for i in 0..rows {
        rhs[n + i] = r_p[i] - d_c[i];
    }
    let sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(n + rows));
    let dx = sol.rows(0, n).clone_owned();
    let dz = sol.rows(n, rows).clone_owned();
    // Δs = d_c − H Δz on cone rows, and Δs = 0 on zero rows.
    let mut ds = DVector::zeros(rows);
    for (blk, sc) in blocks.iter().zip(scalings) {
        match sc {
            Scaling::None => {}
            Scaling::Diag(d) => {
                for (i, di) in d.iter().enumerate() {
                    let r = blk.offset + i;
                    ds[r] = d_c[r] - di * dz[r];
                }
            }
            Scaling::Psd { w, .. } => {
                let k = w.nrows();
                let t = k * (k + 1) / 2;
                let dz_m = smat(&dz.rows(blk.offset, t).clone_owned(), k);
                let hdz = svec(&(w * dz_m * w));
                for i in 0..t {
                    ds[blk.offset + i] = d_c[blk.offset + i] - hdz[i];
                }
            }
        }
    }
    (dx, dz, ds)
}

/// Largest step keeping every block strictly inside its cone.
fn max_step(blocks: &[Block], st: &State, ds: &DVector<f64>, dz: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for blk in blocks {
        match blk.cone {
            Cone::Zero(_) => {}
            Cone::Nonneg(k) => {
                for i in 0..k {
                    let r = blk.offset + i;
                    if ds[r] < 0.0 {
                        alpha = alpha.min(-st.s[r] / ds[r]);
                    }
                    if dz[r] < 0.0 {
                        alpha = alpha.min(-st.z[r] / dz[r]);
                    }
                }
            }
            Cone::PsdTriangle(k) => {
                let t = k * (k + 1) / 2;
                let sm = smat(&st.s.rows(blk.offset, t).clone_owned(), k);
                let zm = smat(&st.z.rows(blk.offset, t).clone_owned(), k);
                let dsm = smat(&ds.rows(blk.offset, t).clone_owned(), k);
                let dzm = smat(&dz.rows(blk.offset, t).clone_owned(), k);
                alpha = alpha.min(psd_max_step(&sm, &dsm));
                alpha = alpha.min(psd_max_step(&zm, &dzm));
            }
            Cone::Soc(_) => unreachable!(),
        }
    }
    alpha.max(0.0)
}

/// Max α with `M + α ΔM ⪰ 0`, via the generalized eigenvalue bound
/// `λ_min(L⁻¹ ΔM L⁻ᵀ)`.
fn psd_max_step(m: &DMatrix<f64>, dm: &DMatrix<f64>) -> f64 {
    let k = m.nrows();
    let chol = match m.clone().cholesky() {
        Some(c) => c,
        None => return 0.0,
    };
    let l = chol.l();
    let linv = l.solve_lower_triangular(&DMatrix::identity(k, k)).expect("triangular solve");
    let g = &linv * dm * linv.transpose();
    let g = (&g + g.transpose()) * 0.5;
    let min_eig = g.symmetric_eigenvalues().min();
    if min_eig >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / min_eig
    }
}
