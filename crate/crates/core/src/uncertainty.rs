//! Data-driven quantification of the unmodeled dynamics.
//!
//! Residuals `d = x⁺ − f(x, u)` collected from closed-loop runs are samples of
//! an unknown set-valued map assumed to have Lipschitz-plus-offset structure:
//! increments between any two graph points obey `‖dᵢ−dⱼ‖ ≤ L‖zᵢ−zⱼ‖ + 2γ`.
//! This module estimates `(L, γ)` from data with a scenario LP, encodes the
//! structure as a quadratic constraint matrix, and certifies an ellipsoidal
//! outer bound on the residual support via an S-procedure semidefinite
//! program.  Passing the previous bound back in keeps successive estimates
//! nested, so downstream tube sizes never grow between iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flat_system::SystemModel;
use crate::geometry::{AxisBox, Ellipsoid, GeometryError};
use crate::solver::{self, svec, Cone, ConicProblem, SolveError, SolveStatus};

/// Positivity floor standing in for the strict inequality on the scaling
/// variable of the support program.
pub const LAMBDA_FLOOR: f64 = 1e-8;
/// Transitions kept per iteration when assembling the support program; evenly
/// spaced subsampling beyond this keeps solve times at desk scale.
pub const MAX_TRANSITIONS_PER_ITERATION: usize = 50;
/// Data points kept for the pairwise scenario LP (all pairs are enumerated).
pub const MAX_SCENARIO_POINTS: usize = 150;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("need at least {need} data points, got {got}")]
    NotEnoughData { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("support program infeasible: data inconsistent with the declared structure")]
    Infeasible,
    #[error(transparent)]
    Solver(#[from] SolveError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Symmetric matrix encoding one quadratic constraint on stacked increment
/// vectors `[1, zᵢ−zⱼ, dᵢ−dⱼ]`: nonnegativity of the induced form holds for
/// every pair of graph points of the unknown map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QCMatrix {
    matrix: DMatrix<f64>,
}

impl QCMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, UncertaintyError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(UncertaintyError::Shape(format!(
                "QC matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let asym = (&matrix - matrix.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(UncertaintyError::Shape(format!(
                "QC matrix asymmetric by {asym:.3e}"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Value of the quadratic form on a stacked increment `[1, dz, dd]`.
    pub fn evaluate(&self, dz: &DVector<f64>, dd: &DVector<f64>) -> f64 {
        let mut v = DVector::zeros(self.dim());
        v[0] = 1.0;
        v.rows_mut(1, dz.len()).copy_from(dz);
        v.rows_mut(1 + dz.len(), dd.len()).copy_from(dd);
        (&self.matrix * &v).dot(&v)
    }
}

/// Single QC matrix for the Lipschitz-plus-offset family:
/// `blkdiag(8γ², 2L²·I_{n+m}, −I_n)`, sound because
/// `(L‖dz‖ + 2γ)² ≤ 2L²‖dz‖² + 8γ²`.
pub fn lipschitz_qc(l: f64, gamma: f64, n: usize, m: usize) -> QCMatrix {
    let dim = 1 + n + m + n;
    let mut q = DMatrix::zeros(dim, dim);
    q[(0, 0)] = 8.0 * gamma * gamma;
    for i in 0..n + m {
        q[(1 + i, 1 + i)] = 2.0 * l * l;
    }
    for i in 0..n {
        q[(1 + n + m + i, 1 + n + m + i)] = -1.0;
    }
    QCMatrix::new(q).expect("constructed symmetric")
}

/// One recorded transition: stacked state-input point and the model residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionDatum {
    pub q: DVector<f64>,
    pub d: DVector<f64>,
    pub iteration: usize,
    pub time: usize,
}

impl TransitionDatum {
    /// Builds the datum from a stored transition, deriving the residual from
    /// the model rather than trusting an externally supplied value.
    pub fn from_step(
        model: &SystemModel,
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_next: &DVector<f64>,
        iteration: usize,
        time: usize,
    ) -> Self {
        let mut q = DVector::zeros(x.len() + u.len());
        q.rows_mut(0, x.len()).copy_from(x);
        q.rows_mut(x.len(), u.len()).copy_from(u);
        let d = x_next - model.step(x, u);
        Self { q, d, iteration, time }
    }
}

/// Certified outer bound on the residual support at one iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportEstimate {
    pub ellipsoid: Ellipsoid,
    pub lambda: f64,
    pub iteration: usize,
}

/// Scenario LP for the structure constants: minimize `L̃ + γ̃` subject to
/// `‖dᵢ−dⱼ‖ ≤ L̃‖zᵢ−zⱼ‖ + 2γ̃` over all data pairs.
pub fn estimate_constants(data: &[TransitionDatum]) -> Result<(f64, f64), UncertaintyError> {
    if data.len() < 2 {
        return Err(UncertaintyError::NotEnoughData { need: 2, got: data.len() });
    }
    let pts = subsample(data, MAX_SCENARIO_POINTS);
    let mut rows = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let dz = (&pts[i].q - &pts[j].q).norm();
            let dd = (&pts[i].d - &pts[j].d).norm();
            rows.push((dz, dd));
        }
    }
    let nr = rows.len() + 2;
    let mut a = DMatrix::zeros(nr, 2);
    let mut b = DVector::zeros(nr);
    for (r, (dz, dd)) in rows.iter().enumerate() {
        // L*dz + 2*gamma >= dd   encoded as   -dz*L - 2*gamma <= -dd
        a[(r, 0)] = -dz;
        a[(r, 1)] = -2.0;
        b[r] = -dd;
    }
    a[(rows.len(), 0)] = -1.0;
    a[(rows.len() + 1, 1)] = -1.0;
    let prob = ConicProblem {
        p: None,
        q: DVector::from_row_slice(&[1.0, 1.0]),
        a,
        b,
        cones: vec![Cone::Nonneg(nr)],
    };
    let sol = solver::solve_conic(&prob)?;
    if !sol.status.is_ok() {
        return Err(UncertaintyError::Solver(SolveError::Conic(sol.status)));
    }
    Ok((sol.x[0].max(0.0), sol.x[1].max(0.0)))
}

/// Assembles and solves the support-construction program: a trace-minimal
/// ellipsoid certified (by S-procedure over the data quadratic constraints and
/// the state/input boxes) to contain every residual the data admit.  With
/// `prev` supplied, an additional coupling constraint keeps the new ellipsoid
/// inside the previous one.
pub fn build_support_sdp(
    data: &[TransitionDatum],
    q_set: &[QCMatrix],
    x_box: &AxisBox,
    u_box: &AxisBox,
    prev: Option<&SupportEstimate>,
) -> Result<SupportEstimate, UncertaintyError> {
    if data.is_empty() {
        return Err(UncertaintyError::NotEnoughData { need: 1, got: 0 });
    }
    if q_set.is_empty() {
        return Err(UncertaintyError::Shape("empty QC set".into()));
    }
    let n = data[0].d.len();
    let nx = x_box.dim();
    let nu = u_box.dim();
    let nz = nx + nu;
    let dim = 1 + nz + n;
    for q in q_set {
        if q.dim() != dim {
            return Err(UncertaintyError::Shape(format!(
                "QC dimension {} does not match 1+{}+{}",
                q.dim(),
                nz,
                n
            )));
        }
    }
    for t in data {
        if t.q.len() != nz || t.d.len() != n {
            return Err(UncertaintyError::Shape("datum dimension mismatch".into()));
        }
    }
    let kept = subsample_per_iteration(data, MAX_TRANSITIONS_PER_ITERATION);
    let iteration = kept.iter().map(|t| t.iteration).max().unwrap_or(0) + 1;

    // Constant matrices entering the big certificate with multipliers.
    let data_mats: Vec<DMatrix<f64>> = kept
        .iter()
        .flat_map(|t| q_set.iter().map(move |q| qc_data_matrix(q, t)))
        .collect();

    // Variable layout: svec(S) | c | lambda | G_x upper | G_u upper | tau.
    let ns = n * (n + 1) / 2;
    let tx = nx * (nx + 1) / 2;
    let tu = nu * (nu + 1) / 2;
    let ntau = data_mats.len();
    let nv = ns + n + 1 + tx + tu + ntau;
    let off_c = ns;
    let off_lambda = ns + n;
    let off_gx = off_lambda + 1;
    let off_gu = off_gx + tx;
    let off_tau = off_gu + tu;

    let side = dim + n;
    let assemble_big = |v: &DVector<f64>| -> DMatrix<f64> {
        let s = solver::smat(&v.rows(0, ns).into_owned(), n);
        let c = v.rows(off_c, n).into_owned();
        let lambda = v[off_lambda];
        let gx = sym_from_upper(&v.rows(off_gx, tx).into_owned(), nx);
        let gu = sym_from_upper(&v.rows(off_gu, tu).into_owned(), nu);
        let mut big = DMatrix::zeros(side, side);
        let mut m11 = DMatrix::zeros(dim, dim);
        m11[(0, 0)] = lambda;
        m11 -= box_sproc_matrix(&gx, x_box, dim, 1);
        m11 -= box_sproc_matrix(&gu, u_box, dim, 1 + nx);
        for (k, mat) in data_mats.iter().enumerate() {
            m11 -= mat * v[off_tau + k];
        }
        big.view_mut((0, 0), (dim, dim)).copy_from(&m11);
        // Coupling column: first row −cᵀ, residual rows λ·I.
        for i in 0..n {
            big[(0, dim + i)] = -c[i];
            big[(dim + i, 0)] = -c[i];
            big[(1 + nz + i, dim + i)] = lambda;
            big[(dim + i, 1 + nz + i)] = lambda;
        }
        big.view_mut((dim, dim), (n, n)).copy_from(&s);
        big
    };

    let big_rows = side * (side + 1) / 2;
    let nest_rows = if prev.is_some() { (n + 1) * (n + 2) / 2 } else { 0 };
    let nonneg_rows = 1 + tx + tu + ntau;
    let total_rows = 1 + nonneg_rows + big_rows + nest_rows;

    let mut a = DMatrix::zeros(total_rows, nv);
    let mut b = DVector::zeros(total_rows);
    let mut cones = Vec::new();
    let mut row = 0;

    // The program is positively homogeneous in all variables, so the scale may
    // be fixed outright.  Besides conditioning the solve (no variables pinned
    // to the tiny positivity floor), this makes the iteration-coupling
    // constraint genuinely contractive: at unit scale it reads "same center,
    // shape never grows", which nests the reported ellipsoids exactly.
    a[(row, off_lambda)] = 1.0;
    b[row] = 1.0;
    cones.push(Cone::Zero(1));
    row += 1;

    // lambda >= floor, multipliers >= 0.
    a[(row, off_lambda)] = -1.0;
    b[row] = -LAMBDA_FLOOR;
    row += 1;
    for k in 0..tx + tu + ntau {
        a[(row, off_gx + k)] = -1.0;
        row += 1;
    }
    cones.push(Cone::Nonneg(nonneg_rows));

    // Big certificate block, columns assembled from unit-variable evaluations.
    let mut unit = DVector::zeros(nv);
    for k in 0..nv {
        unit[k] = 1.0;
        let col = svec(&assemble_big(&unit));
        for r in 0..big_rows {
            a[(row + r, k)] = -col[r];
        }
        unit[k] = 0.0;
    }
    cones.push(Cone::PsdTriangle(side));
    row += big_rows;

    if let Some(p) = prev {
        // svec(prev lift) − svec(current lift) must stay positive semidefinite.
        let lift_prev = lift(&p.ellipsoid.shape, &p.ellipsoid.center, 1.0);
        b.rows_mut(row, nest_rows).copy_from(&svec(&lift_prev));
        for k in 0..nv {
            unit[k] = 1.0;
            let s = solver::smat(&unit.rows(0, ns).into_owned(), n);
            let c = unit.rows(off_c, n).into_owned();
            let cur = lift(&s, &c, unit[off_lambda]);
            let col = svec(&cur);
            for r in 0..nest_rows {
                a[(row + r, k)] = col[r];
            }
            unit[k] = 0.0;
        }
        cones.push(Cone::PsdTriangle(n + 1));
    }

    let mut q_obj = DVector::zeros(nv);
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                q_obj[idx] = 1.0;
            }
            idx += 1;
        }
    }

    let prob = ConicProblem { p: None, q: q_obj, a, b, cones };
    let sol = solver::solve_conic(&prob)?;
    match sol.status {
        SolveStatus::PrimalInfeasible => return Err(UncertaintyError::Infeasible),
        s if !s.is_ok() => return Err(UncertaintyError::Solver(SolveError::Conic(s))),
        _ => {}
    }
    let s_mat = solver::smat(&sol.x.rows(0, ns).into_owned(), n);
    let c = sol.x.rows(off_c, n).into_owned();
    let lambda = sol.x[off_lambda];
    let shape = s_mat / lambda;
    let center = c / lambda;
    // Symmetrize defensively before the PD-validated constructor.
    let shape = (&shape + shape.transpose()) * 0.5;
    let ellipsoid = Ellipsoid::new(shape, center)?;
    Ok(SupportEstimate { ellipsoid, lambda, iteration })
}

/// `[[λ, −cᵀ], [−c, S]]`, the homogeneous lifted form coupling iterations.
fn lift(s: &DMatrix<f64>, c: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
    let n = c.len();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m[(0, 0)] = lambda;
    for i in 0..n {
        m[(0, 1 + i)] = -c[i];
        m[(1 + i, 0)] = -c[i];
    }
    m.view_mut((1, 1), (n, n)).copy_from(s);
    m
}

/// `VᵀQV` with `V = I − [0; z_t; d_t] e₁ᵀ`: the QC matrix re-centered on one
/// recorded graph point, valid for every other point of the unknown map.
fn qc_data_matrix(q: &QCMatrix, t: &TransitionDatum) -> DMatrix<f64> {
    let dim = q.dim();
    let mut v = DMatrix::identity(dim, dim);
    for i in 0..t.q.len() {
        v[(1 + i, 0)] = -t.q[i];
    }
    for i in 0..t.d.len() {
        v[(1 + t.q.len() + i, 0)] = -t.d[i];
    }
    v.transpose() * q.matrix() * v
}

/// Box S-procedure certificate `(ub−z)ᵀ G (z−lb) ≥ 0` as a symmetric form on
/// `[1, …]` coordinates, with the z-block placed at `offset`.
fn box_sproc_matrix(g: &DMatrix<f64>, bx: &AxisBox, dim: usize, offset: usize) -> DMatrix<f64> {
    let k = bx.dim();
    let mut m = DMatrix::zeros(dim, dim);
    let lb = &bx.lb;
    let ub = &bx.ub;
    m[(0, 0)] = -lb.dot(&(g * ub));
    let lin = g * (ub + lb) * 0.5;
    for i in 0..k {
        m[(0, offset + i)] = lin[i];
        m[(offset + i, 0)] = lin[i];
        for j in 0..k {
            m[(offset + i, offset + j)] = -g[(i, j)];
        }
    }
    m
}

/// Symmetric matrix from its stacked upper triangle (column-major, unscaled).
fn sym_from_upper(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            m[(i, j)] = v[idx];
            m[(j, i)] = v[idx];
            idx += 1;
        }
    }
    m
}

fn subsample(data: &[TransitionDatum], cap: usize) -> Vec<&TransitionDatum> {
    if data.len() <= cap {
        return data.iter().collect();
    }
    (0..cap)
        .map(|k| &data[k * (data.len() - 1) / (cap - 1)])
        .collect()
}

fn subsample_per_iteration(data: &[TransitionDatum], cap: usize) -> Vec<&TransitionDatum> {
    let mut by_iter: std::collections::BTreeMap<usize, Vec<&TransitionDatum>> = Default::default();
    for t in data {
        by_iter.entry(t.iteration).or_default().push(t);
    }
    let mut out = Vec::new();
    for (_, group) in by_iter {
        if group.len() <= cap {
            out.extend(group);
        } else {
            out.extend((0..cap).map(|k| group[k * (group.len() - 1) / (cap - 1)]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn datum(q: &[f64], d: &[f64], iteration: usize, time: usize) -> TransitionDatum {
        TransitionDatum {
            q: DVector::from_row_slice(q),
            d: DVector::from_row_slice(d),
            iteration,
            time,
        }
    }

    /// Smooth 3-channel test field with Lipschitz constant `l` over 5d inputs.
    fn field(l: f64, z: &DVector<f64>) -> DVector<f64> {
        let dirs = [
            [0.3, -0.5, 0.4, 0.2, -0.1],
            [-0.2, 0.4, 0.1, 0.5, 0.3],
            [0.5, 0.1, -0.3, 0.1, 0.4],
        ];
        DVector::from_fn(3, |i, _| {
            let d = dirs[i];
            let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let arg: f64 = d.iter().zip(z.iter()).map(|(a, b)| a / norm * b).sum();
            l / 3f64.sqrt() * arg.sin()
        })
    }

    fn synthetic_data(l: f64, gamma: f64, count: usize, seed: u64) -> Vec<TransitionDatum> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|t| {
                let z = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
                let mut w = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let norm = w.norm();
                if norm > 1e-12 {
                    w *= gamma * rng.random_range(0.0..1.0f64).cbrt() / norm;
                }
                TransitionDatum {
                    d: field(l, &z) + w,
                    q: z,
                    iteration: 0,
                    time: t,
                }
            })
            .collect()
    }

    #[test]
    fn qc_blockdiag_values() {
        let q = lipschitz_qc(0.0329, 0.164, 3, 2);
        let m = q.matrix();
        assert_abs_diff_eq!(m[(0, 0)], 0.215_168, epsilon = 1e-9);
        for i in 1..6 {
            assert_abs_diff_eq!(m[(i, i)], 0.002_164_82, epsilon = 1e-9);
        }
        for i in 6..9 {
            assert_abs_diff_eq!(m[(i, i)], -1.0);
        }
        assert_abs_diff_eq!(m.iter().map(|v| v.abs()).sum::<f64>(), 0.215_168 + 5.0 * 0.002_164_82 + 3.0, epsilon = 1e-9);
        let z = lipschitz_qc(0.0, 0.0, 3, 2);
        assert_abs_diff_eq!(z.matrix().trace(), -3.0);
    }

    #[test]
    fn qc_sound_on_sampled_pairs() {
        let (l, gamma) = (0.0329, 0.164);
        let q = lipschitz_qc(l, gamma, 3, 2);
        let data = synthetic_data(l, gamma, 200, 5);
        let mut checked = 0;
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let dz = &data[i].q - &data[j].q;
                let dd = &data[i].d - &data[j].d;
                assert!(q.evaluate(&dz, &dd) >= -1e-12, "pair ({i},{j})");
                checked += 1;
            }
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn constants_single_binding_pair() {
        let data = vec![
            datum(&[1.0, 2.0, 0.0, 0.5, 0.1], &[0.4, 0.0, 0.0], 0, 0),
            datum(&[1.0, 2.0, 0.0, 0.5, 0.1], &[0.0, 0.0, 0.0], 0, 1),
        ];
        let (l, g) = estimate_constants(&data).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g, 0.2, epsilon = 1e-6);
    }

    #[test]
    fn constants_zero_spread() {
        let data: Vec<_> = (0..5)
            .map(|t| datum(&[t as f64, 0.0, 0.0, 0.0, 0.0], &[0.3, -0.1, 0.2], 0, t))
            .collect();
        let (l, g) = estimate_constants(&data).unwrap();
        assert!(l < 1e-7 && g < 1e-7, "got {l}, {g}");
    }

    #[test]
    fn constants_upper_bound_pairwise_ratios() {
        let data = synthetic_data(0.03, 0.1, 80, 9);
        let (l, g) = estimate_constants(&data).unwrap();
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let dz = (&data[i].q - &data[j].q).norm();
                let dd = (&data[i].d - &data[j].d).norm();
                assert!(dd <= l * dz + 2.0 * g + 1e-7);
            }
        }
    }

    fn unit_boxes() -> (AxisBox, AxisBox) {
        (
            AxisBox::from_slices(&[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0]).unwrap(),
            AxisBox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]).unwrap(),
        )
    }

    #[test]
    fn single_datum_ball() {
        let (xb, ub) = unit_boxes();
        let q = lipschitz_qc(0.0, 1.0, 3, 2);
        let data = vec![datum(&[0.0; 5], &[0.0; 3], 0, 0)];
        let est = build_support_sdp(&data, &[q], &xb, &ub, None).unwrap();
        let radius = 8f64.sqrt();
        assert!(est.ellipsoid.center.norm() < 0.03, "center {}", est.ellipsoid.center);
        let bb = crate::geometry::bounding_box_ellipsoid(&est.ellipsoid);
        for i in 0..3 {
            let hw = (bb.ub[i] - bb.lb[i]) / 2.0;
            assert!((hw / radius - 1.0).abs() < 0.02, "half-width {hw} vs {radius}");
        }
        // Trace of the normalized shape for the exact ball is 3 * 8.
        assert!((est.ellipsoid.trace() / 24.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn residuals_contained_and_prefix_monotone() {
        let (l, gamma) = (0.05, 0.12);
        let xb = AxisBox::from_slices(&[-3.0, -3.0, -3.0], &[3.0, 3.0, 3.0]).unwrap();
        let ubx = AxisBox::from_slices(&[-3.0, -3.0], &[3.0, 3.0]).unwrap();
        let q = lipschitz_qc(l, gamma, 3, 2);
        let data = synthetic_data(l, gamma, 50, 21);
        let mut traces = Vec::new();
        for cap in [10, 25, 50] {
            let est =
                build_support_sdp(&data[..cap], std::slice::from_ref(&q), &xb, &ubx, None).unwrap();
            for t in &data[..cap] {
                assert!(
                    est.ellipsoid.quad_form(&t.d) <= 1.0 + 1e-6,
                    "residual escaped at cap {cap}"
                );
            }
            traces.push(est.ellipsoid.trace());
        }
        assert!(traces[1] <= traces[0] + 1e-6, "traces {traces:?}");
        assert!(traces[2] <= traces[1] + 1e-6, "traces {traces:?}");
    }

    #[test]
    fn nesting_with_previous_estimate() {
        let (l, gamma) = (0.05, 0.12);
        let xb = AxisBox::from_slices(&[-3.0, -3.0, -3.0], &[3.0, 3.0, 3.0]).unwrap();
        let ubx = AxisBox::from_slices(&[-3.0, -3.0], &[3.0, 3.0]).unwrap();
        let q = lipschitz_qc(l, gamma, 3, 2);
        let mut batch0 = synthetic_data(l, gamma, 30, 31);
        let mut batch1 = synthetic_data(l, gamma, 30, 32);
        for t in &mut batch1 {
            t.iteration = 1;
        }
        let prev = build_support_sdp(&batch0, std::slice::from_ref(&q), &xb, &ubx, None).unwrap();
        batch0.extend(batch1);
        let cur = build_support_sdp(&batch0, &[q], &xb, &ubx, Some(&prev)).unwrap();
        assert_eq!(cur.iteration, 2);
        assert!(cur.lambda >= LAMBDA_FLOOR);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..2000 {
            let p = cur.ellipsoid.sample(&mut rng);
            assert!(
                prev.ellipsoid.quad_form(&p) <= 1.0 + 1e-6,
                "sample {p} escaped the previous estimate"
            );
        }
        assert!(cur.ellipsoid.trace() <= prev.ellipsoid.trace() + 1e-6);
    }
}
