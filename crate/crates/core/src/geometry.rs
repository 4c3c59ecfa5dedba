//! Set primitives: axis-aligned boxes, ellipsoids, vertex polytopes.
//!
//! Everything downstream (tube containment, constraint tightening, terminal
//! sets) reduces to a handful of operations on these three representations.
//! Polytope membership is decided by a small feasibility LP, so it depends on
//! the conic layer in [`crate::solver`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{self, Cone, ConicProblem, SolveError};

/// Positive-definiteness tolerance for ellipsoid shape matrices.
pub const PD_TOL: f64 = 1e-9;
/// Inclusion / membership tolerance for polytope tests.
pub const MEMBERSHIP_TOL: f64 = 1e-7;
/// Prune accumulated Minkowski sums every this many terms.
pub const PRUNE_EVERY: usize = 5;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty set: {0}")]
    Empty(String),
    #[error("shape matrix is not symmetric positive definite (min eig {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("degenerate polytope: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Solver(#[from] SolveError),
}

/// Axis-aligned box `{ x : lb <= x <= ub }` (componentwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl AxisBox {
    pub fn new(lb: DVector<f64>, ub: DVector<f64>) -> Result<Self, GeometryError> {
        if lb.len() != ub.len() {
            return Err(GeometryError::DimensionMismatch(lb.len(), ub.len()));
        }
        if lb.iter().zip(ub.iter()).any(|(l, u)| l > u) {
            return Err(GeometryError::Empty("box with lb > ub".into()));
        }
        Ok(Self { lb, ub })
    }

    pub fn from_slices(lb: &[f64], ub: &[f64]) -> Result<Self, GeometryError> {
        Self::new(DVector::from_row_slice(lb), DVector::from_row_slice(ub))
    }

    /// Symmetric box `[-h, h]` from nonnegative half-widths.
    pub fn symmetric(half: &DVector<f64>) -> Self {
        Self { lb: -half.clone(), ub: half.clone() }
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lb + &self.ub) * 0.5
    }

    pub fn half_widths(&self) -> DVector<f64> {
        (&self.ub - &self.lb) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter()
            .zip(self.lb.iter().zip(self.ub.iter()))
            .all(|(xi, (l, u))| *xi >= l - tol && *xi <= u + tol)
    }

    /// Largest componentwise bound violation (0 inside).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..self.dim() {
            v = v.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
        }
        v.max(0.0)
    }

    /// Minkowski sum of two boxes (interval addition).
    pub fn minkowski_sum(&self, other: &AxisBox) -> Result<AxisBox, GeometryError> {
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(AxisBox { lb: &self.lb + &other.lb, ub: &self.ub + &other.ub })
    }

    /// All `2^n` corner points.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        let mut out = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            let v = DVector::from_fn(n, |i, _| {
                if mask >> i & 1 == 1 {
                    self.ub[i]
                } else {
                    self.lb[i]
                }
            });
            out.push(v);
        }
        out
    }

    pub fn to_vpolytope(&self) -> VPolytope {
        VPolytope { vertices: self.vertices() }
    }

    /// Uniform sample, componentwise.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| rng.random_range(self.lb[i]..=self.ub[i]))
    }
}

/// Pontryagin difference `a ⊖ b = { x : x + b ⊆ a }` for boxes.
///
/// Componentwise this shifts each bound inward by the corresponding bound of
/// `b`; the result errors out when the difference is empty.
pub fn box_pontryagin_diff(a: &AxisBox, b: &AxisBox) -> Result<AxisBox, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch(a.dim(), b.dim()));
    }
    let lb = &a.lb - &b.lb;
    let ub = &a.ub - &b.ub;
    if lb.iter().zip(ub.iter()).any(|(l, u)| l > u) {
        return Err(GeometryError::Empty("Pontryagin difference".into()));
    }
    Ok(AxisBox { lb, ub })
}

/// Ellipsoid `{ z : (z - c)ᵀ S⁻¹ (z - c) <= 1 }` with `S` symmetric positive
/// definite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub shape: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl Ellipsoid {
    pub fn new(shape: DMatrix<f64>, center: DVector<f64>) -> Result<Self, GeometryError> {
        if shape.nrows() != shape.ncols() || shape.nrows() != center.len() {
            return Err(GeometryError::DimensionMismatch(shape.nrows(), center.len()));
        }
        let asym = (&shape - shape.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(GeometryError::Degenerate(format!(
                "shape matrix asymmetric by {asym:.3e}"
            )));
        }
        let eigs = shape.clone().symmetric_eigenvalues();
        let min_eig = eigs.min();
        if min_eig < PD_TOL {
            return Err(GeometryError::NotPositiveDefinite(min_eig));
        }
        Ok(Self { shape, center })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Membership value `(z-c)ᵀ S⁻¹ (z-c)`; inside iff <= 1.
    pub fn quad_form(&self, z: &DVector<f64>) -> f64 {
        let d = z - &self.center;
        let sol = self
            .shape
            .clone()
            .cholesky()
            .expect("validated PD at construction")
            .solve(&d);
        d.dot(&sol)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        self.quad_form(z) <= 1.0 + tol
    }

    /// Uniform sample from the ellipsoid interior.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let chol = self.shape.clone().cholesky().expect("validated PD at construction");
        let mut w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let norm = w.norm();
        if norm > 1e-12 {
            let radius: f64 = rng.random_range(0.0..1.0f64).powf(1.0 / n as f64);
            w *= radius / norm;
        }
        &self.center + chol.l() * w
    }

    pub fn trace(&self) -> f64 {
        self.shape.trace()
    }
}

/// Polytope in vertex representation `conv{ v_1, ..., v_k }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VPolytope {
    pub vertices: Vec<DVector<f64>>,
}

impl VPolytope {
    pub fn new(vertices: Vec<DVector<f64>>) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::Empty("polytope with no vertices".into()));
        }
        let n = vertices[0].len();
        if vertices.iter().any(|v| v.len() != n) {
            return Err(GeometryError::DimensionMismatch(n, 0));
        }
        Ok(Self { vertices })
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Random point as a convex combination with Dirichlet-ish weights.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.vertices.len();
        let mut w: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let s: f64 = w.iter().sum();
        for wi in &mut w {
            *wi /= s;
        }
        let mut p = DVector::zeros(self.dim());
        for (wi, v) in w.iter().zip(&self.vertices) {
            p += v * *wi;
        }
        p
    }
}

/// Componentwise bounding box of an ellipsoid: `c_i ± sqrt(S_ii)`.
pub fn bounding_box_ellipsoid(e: &Ellipsoid) -> AxisBox {
    let half = DVector::from_fn(e.dim(), |i, _| e.shape[(i, i)].max(0.0).sqrt());
    AxisBox { lb: &e.center - &half, ub: &e.center + &half }
}

/// Componentwise bounding box of a vertex polytope.
pub fn bounding_box_vpoly(p: &VPolytope) -> AxisBox {
    let n = p.dim();
    let mut lb = p.vertices[0].clone();
    let mut ub = p.vertices[0].clone();
    for v in &p.vertices[1..] {
        for i in 0..n {
            lb[i] = lb[i].min(v[i]);
            ub[i] = ub[i].max(v[i]);
        }
    }
    AxisBox { lb, ub }
}

/// Minkowski sum of vertex polytopes: all pairwise vertex sums, pruned down to
/// extreme points when the product grows past a small threshold.
pub fn minkowski_sum_vpoly(a: &VPolytope, b: &VPolytope) -> Result<VPolytope, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut verts = Vec::with_capacity(a.vertices.len() * b.vertices.len());
    for va in &a.vertices {
        for vb in &b.vertices {
            verts.push(va + vb);
        }
    }
    dedup_points(&mut verts, 1e-12);
    let mut out = VPolytope { vertices: verts };
    if out.vertices.len() > 2 * (a.vertices.len() + b.vertices.len()) {
        out = prune_to_extreme_points(&out)?;
    }
    Ok(out)
}

/// Accumulated Minkowski sum of many polytopes, pruning every
/// [`PRUNE_EVERY`] terms to keep the vertex count in check.
pub fn minkowski_sum_accumulate(terms: &[VPolytope]) -> Result<VPolytope, GeometryError> {
    let mut iter = terms.iter();
    let first = iter.next().ok_or_else(|| GeometryError::Empty("no terms".into()))?;
    let mut acc = first.clone();
    for (k, t) in iter.enumerate() {
        acc = minkowski_sum_vpoly(&acc, t)?;
        if (k + 2) % PRUNE_EVERY == 0 {
            acc = prune_to_extreme_points(&acc)?;
        }
    }
    prune_to_extreme_points(&acc)
}

/// Drop every vertex that lies in the convex hull of the others.
pub fn prune_to_extreme_points(p: &VPolytope) -> Result<VPolytope, GeometryError> {
    let mut keep: Vec<DVector<f64>> = p.vertices.clone();
    let mut i = 0;
    while i < keep.len() && keep.len() > 1 {
        let candidate = keep[i].clone();
        let others: Vec<DVector<f64>> =
            keep.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.clone()).collect();
        let inside = convex_hull_membership(&candidate, &others, MEMBERSHIP_TOL)?;
        if inside {
            keep.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(VPolytope { vertices: keep })
}

/// Convex-hull membership via the feasibility LP
/// `∃ λ >= 0, Σλ = 1, Σλ v_i = p` at the given tolerance.
pub fn convex_hull_membership(
    point: &DVector<f64>,
    vertices: &[DVector<f64>],
    tol: f64,
) -> Result<bool, GeometryError> {
    Ok(hull_membership_residual(point, vertices)? <= tol)
}

/// Minimal `‖Σλ v_i − p‖_∞` over the simplex: 0 (up to solver tolerance) for
/// points inside the hull and the ∞-norm distance-ish gap outside.
pub fn hull_membership_residual(
    point: &DVector<f64>,
    vertices: &[DVector<f64>],
) -> Result<f64, GeometryError> {
    if vertices.is_empty() {
        return Err(GeometryError::Empty("hull with no vertices".into()));
    }
    let n = point.len();
    let k = vertices.len();
    // Variables [λ_1..λ_k, t]: min t  s.t. Σλ = 1 (zero cone),
    // |Σλ v - p| <= t and λ >= 0 (nonneg cone).
    let nv = k + 1;
    let mut q = DVector::zeros(nv);
    q[k] = 1.0;
    let rows = 1 + 2 * n + k;
    let mut a = DMatrix::zeros(rows, nv);
    let mut b = DVector::zeros(rows);
    for j in 0..k {
        a[(0, j)] = 1.0;
    }
    b[0] = 1.0;
    for i in 0..n {
        // Σλ v_i - p_i <= t  →  Σλ v_i - t + s = p_i
        for j in 0..k {
            a[(1 + i, j)] = vertices[j][i];
        }
        a[(1 + i, k)] = -1.0;
        b[1 + i] = point[i];
        // p_i - Σλ v_i <= t
        for j in 0..k {
            a[(1 + n + i, j)] = -vertices[j][i];
        }
        a[(1 + n + i, k)] = -1.0;
        b[1 + n + i] = -point[i];
    }
    for j in 0..k {
        a[(1 + 2 * n + j, j)] = -1.0;
    }
    let problem = ConicProblem {
        p: None,
        q,
        a,
        b,
        cones: vec![Cone::Zero(1), Cone::Nonneg(2 * n + k)],
    };
    let sol = solver::solve_conic(&problem)?;
    Ok(sol.x[k].max(0.0))
}

fn dedup_points(points: &mut Vec<DVector<f64>>, tol: f64) {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(points.len());
    for p in points.drain(..) {
        if !out.iter().any(|q| (&p - q).amax() <= tol) {
            out.push(p);
        }
    }
    *points = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(s: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(s)
    }

    #[test]
    fn pontryagin_interval() {
        let a = AxisBox::from_slices(&[0.0], &[10.0]).unwrap();
        let b = AxisBox::from_slices(&[-1.0], &[1.0]).unwrap();
        let d = box_pontryagin_diff(&a, &b).unwrap();
        assert_eq!(d.lb[0], 1.0);
        assert_eq!(d.ub[0], 9.0);
    }

    #[test]
    fn pontryagin_state_box() {
        let a = AxisBox::from_slices(&[-2.0, -4.5], &[60.0, 4.5]).unwrap();
        let b = AxisBox::from_slices(&[-0.1, -0.2], &[0.1, 0.2]).unwrap();
        let d = box_pontryagin_diff(&a, &b).unwrap();
        assert_abs_diff_eq!(d.lb[0], -1.9);
        assert_abs_diff_eq!(d.ub[0], 59.9);
        assert_abs_diff_eq!(d.lb[1], -4.3);
        assert_abs_diff_eq!(d.ub[1], 4.3);
    }

    #[test]
    fn pontryagin_empty_errors() {
        let a = AxisBox::from_slices(&[0.0], &[1.0]).unwrap();
        let b = AxisBox::from_slices(&[-2.0], &[2.0]).unwrap();
        assert!(matches!(box_pontryagin_diff(&a, &b), Err(GeometryError::Empty(_))));
    }

    #[test]
    fn ellipsoid_bounding_box() {
        let e = Ellipsoid::new(
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]),
            v(&[1.0, 0.0]),
        )
        .unwrap();
        let b = bounding_box_ellipsoid(&e);
        assert_abs_diff_eq!(b.lb[0], -1.0);
        assert_abs_diff_eq!(b.ub[0], 3.0);
        assert_abs_diff_eq!(b.lb[1], -3.0);
        assert_abs_diff_eq!(b.ub[1], 3.0);
    }

    #[test]
    fn ellipsoid_rejects_indefinite() {
        let res = Ellipsoid::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-6]),
            v(&[0.0, 0.0]),
        );
        assert!(matches!(res, Err(GeometryError::NotPositiveDefinite(_))));
    }

    #[test]
    fn minkowski_unit_squares() {
        let sq = AxisBox::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap().to_vpolytope();
        let sum = minkowski_sum_vpoly(&sq, &sq).unwrap();
        let bb = bounding_box_vpoly(&sum);
        assert_abs_diff_eq!(bb.lb[0], 0.0);
        assert_abs_diff_eq!(bb.ub[0], 2.0);
        assert_abs_diff_eq!(bb.ub[1], 2.0);
        let pruned = prune_to_extreme_points(&sum).unwrap();
        assert_eq!(pruned.vertices.len(), 4);
    }

    #[test]
    fn hull_membership_square() {
        let sq = AxisBox::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap().vertices();
        assert!(convex_hull_membership(&v(&[0.5, 0.5]), &sq, MEMBERSHIP_TOL).unwrap());
        assert!(convex_hull_membership(&v(&[1.0, 1.0]), &sq, MEMBERSHIP_TOL).unwrap());
        assert!(!convex_hull_membership(&v(&[1.2, 0.5]), &sq, MEMBERSHIP_TOL).unwrap());
        let r = hull_membership_residual(&v(&[1.2, 0.5]), &sq).unwrap();
        assert!((r - 0.2).abs() < 1e-6, "residual {r}");
    }

    #[test]
    fn accumulate_prunes() {
        let sq = AxisBox::from_slices(&[-0.1, -0.1], &[0.1, 0.1]).unwrap().to_vpolytope();
        let terms: Vec<VPolytope> = (0..7).map(|_| sq.clone()).collect();
        let acc = minkowski_sum_accumulate(&terms).unwrap();
        assert_eq!(acc.vertices.len(), 4);
        let bb = bounding_box_vpoly(&acc);
        assert_abs_diff_eq!(bb.ub[0], 0.7, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pontryagin_then_sum_is_inside(
            lb in proptest::collection::vec(-5.0f64..0.0, 3),
            w in proptest::collection::vec(0.5f64..4.0, 3),
            bw in proptest::collection::vec(0.0f64..0.4, 3),
        ) {
            let a = AxisBox::new(v(&lb), v(&lb) + v(&w)).unwrap();
            let b = AxisBox::symmetric(&v(&bw));
            if let Ok(d) = box_pontryagin_diff(&a, &b) {
                let s = d.minkowski_sum(&b).unwrap();
                prop_assert!(s.lb.iter().zip(a.lb.iter()).all(|(x, y)| *x >= y - 1e-12));
                prop_assert!(s.ub.iter().zip(a.ub.iter()).all(|(x, y)| *x <= y + 1e-12));
            }
        }

        #[test]
        fn bounding_box_contains_samples(
            pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 3..8),
            seed in 0u64..200,
        ) {
            let poly = VPolytope::new(pts.iter().map(|p| v(p)).collect()).unwrap();
            let bb = bounding_box_vpoly(&poly);
            let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(seed);
            for _ in 0..10 {
                let p = poly.sample(&mut rng);
                prop_assert!(bb.contains(&p, 1e-9));
            }
        }

        #[test]
        fn membership_monotone_under_vertices(
            pts in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 2), 3..6),
            q in proptest::collection::vec(-2.0f64..2.0, 2),
            extra in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let base: Vec<DVector<f64>> = pts.iter().map(|p| v(p)).collect();
            let inside_before = convex_hull_membership(&v(&q), &base, MEMBERSHIP_TOL).unwrap();
            let mut bigger = base.clone();
            bigger.push(v(&extra));
            let inside_after = convex_hull_membership(&v(&q), &bigger, MEMBERSHIP_TOL).unwrap();
            prop_assert!(!inside_before || inside_after);
        }
    }
}
