//! Ancillary error feedback and robust positively invariant (RPI) error sets.
//!
//! The closed loop applies `u = u_bar + K (x - x_bar)`, so the tracking error
//! `e = x - x_bar` evolves (to first order around a reference point) as
//! `e+ = (A + B K) e + d_bar`, where `d_bar` collects both the estimated
//! unmodeled disturbance and the linearization remainder of the nominal model
//! over the certified operating region.  This module provides:
//!
//! * discrete-time LQR synthesis for the error feedback gain,
//! * an outer-approximated (and for axis-aligned disturbance boxes, exact)
//!   RPI set for the linear error dynamics, represented as a zonotope,
//! * a sampled bound on the linearization remainder over an operating
//!   envelope, and
//! * the combination of the estimated disturbance support with the
//!   linearization error into a single bounded disturbance set.
//!
//! The RPI construction truncates the series `sum_k A_cl^k D` after `N` terms
//! and inflates by `1/(1 - alpha)` once the `N`-step image of the disturbance
//! box fits inside `alpha` times itself componentwise; this yields a true
//! invariant set, not just an approximation.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flat_system::SystemModel;
use crate::geometry::{
    bounding_box_ellipsoid, bounding_box_vpoly, AxisBox, Ellipsoid, GeometryError, VPolytope,
};

/// Componentwise contraction level at which the truncated series is inflated.
const RPI_ALPHA_TARGET: f64 = 0.01;
/// Convergence threshold for the Riccati fixed-point iteration.
const RICCATI_TOL: f64 = 1e-10;
/// Iteration cap for the Riccati fixed-point iteration.
const RICCATI_MAX_ITERS: usize = 10_000;
/// Generators with support below this threshold are dropped.
const GENERATOR_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ErrorInvariantError {
    #[error("Riccati iteration did not converge within {0} steps (residual {1:.3e})")]
    RiccatiDivergence(usize, f64),
    #[error("closed-loop error dynamics are not contractive: {0}")]
    NotContractive(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Static error feedback `u = u_bar + K (x - x_bar)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorPolicy {
    /// Gain matrix, `m x n`.
    pub k: DMatrix<f64>,
}

/// Centrally symmetric polytope `c + sum_i t_i g_i`, `|t_i| <= 1`.
///
/// Used as the concrete representation of RPI sets: Minkowski sums and linear
/// maps are closed-form on zonotopes, and membership reduces to facet
/// inequalities (in up to three dimensions the facet normals are exactly the
/// pairwise cross products of generators).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Zonotope {
    pub center: DVector<f64>,
    pub generators: Vec<DVector<f64>>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: Vec<DVector<f64>>) -> Result<Self, ErrorInvariantError> {
        let n = center.len();
        for g in &generators {
            if g.len() != n {
                return Err(ErrorInvariantError::Shape(format!(
                    "generator of length {} in {}-dimensional zonotope",
                    g.len(),
                    n
                )));
            }
        }
        let generators = generators
            .into_iter()
            .filter(|g| g.amax() > GENERATOR_EPS)
            .collect();
        Ok(Self { center, generators })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Support value `max { d^T x : x in Z }`.
    pub fn support(&self, dir: &DVector<f64>) -> f64 {
        let mut s = dir.dot(&self.center);
        for g in &self.generators {
            s += dir.dot(g).abs();
        }
        s
    }

    /// Smallest axis-aligned box containing the set.
    pub fn box_hull(&self) -> AxisBox {
        let n = self.dim();
        let mut half = DVector::zeros(n);
        for g in &self.generators {
            for i in 0..n {
                half[i] += g[i].abs();
            }
        }
        let lb = &self.center - &half;
        let ub = &self.center + &half;
        AxisBox::new(lb, ub).expect("lb <= ub by construction")
    }

    /// Image under a linear map (`M Z` is again a zonotope).
    pub fn linear_map(&self, m: &DMatrix<f64>) -> Result<Self, ErrorInvariantError> {
        if m.ncols() != self.dim() {
            return Err(ErrorInvariantError::Shape(format!(
                "map with {} columns applied to {}-dimensional zonotope",
                m.ncols(),
                self.dim()
            )));
        }
        Zonotope::new(m * &self.center, self.generators.iter().map(|g| m * g).collect())
    }

    /// Outward normals and support offsets (relative to the center) of every
    /// facet; exact for dimensions up to three, including rank-deficient
    /// generator sets (segments and flat zonotopes get equality cuts for
    /// their affine hull plus the facet cuts inside it).
    pub fn facet_cuts(&self) -> Vec<(DVector<f64>, f64)> {
        let n = self.dim();
        let mut dirs: Vec<DVector<f64>> = Vec::new();
        match n {
            1 => dirs.push(DVector::from_element(1, 1.0)),
            2 => {
                for g in &self.generators {
                    let d = DVector::from_vec(vec![-g[1], g[0]]);
                    let norm = d.norm();
                    if norm > GENERATOR_EPS {
                        dirs.push(d / norm);
                    }
                }
                // A segment also needs its axis cut to bound the endpoints.
                if self.generators.len() == 1 {
                    if let Some(g) = self.generators.first() {
                        dirs.push(g / g.norm());
                    }
                }
            }
            3 => {
                for (i, gi) in self.generators.iter().enumerate() {
                    for gj in self.generators.iter().skip(i + 1) {
                        let d = cross3(gi, gj);
                        let norm = d.norm();
                        if norm > 1e-10 {
                            dirs.push(d / norm);
                        }
                    }
                }
            }
            _ => {
                // Fall back to axis directions: an outer box test.  The RPI
                // pipeline only builds zonotopes in the state dimension (3).
                for i in 0..n {
                    let mut d = DVector::zeros(n);
                    d[i] = 1.0;
                    dirs.push(d);
                }
            }
        }
        let mut unique = dedup_directions(dirs);
        if n == 3 && !self.generators.is_empty() {
            if unique.is_empty() {
                // All generators parallel: a segment.  Cut along the axis and
                // along two orthogonal completions (zero-width equalities).
                let u = &self.generators[0] / self.generators[0].norm();
                let pivot = if u[0].abs() < 0.9 {
                    DVector::from_vec(vec![1.0, 0.0, 0.0])
                } else {
                    DVector::from_vec(vec![0.0, 1.0, 0.0])
                };
                let p = cross3(&u, &pivot);
                let p = &p / p.norm();
                let q = cross3(&u, &p);
                unique = vec![u, p, q];
            } else if unique.len() == 1 {
                // Coplanar generators: the single cross direction is the
                // plane normal; add in-plane perpendiculars of each generator
                // to bound the flat zonotope inside its plane.
                let normal = unique[0].clone();
                for g in &self.generators {
                    let d = cross3(&normal, g);
                    let norm = d.norm();
                    if norm > GENERATOR_EPS {
                        unique.push(d / norm);
                    }
                }
                unique = dedup_directions(unique);
            }
        }
        unique
            .into_iter()
            .map(|d| {
                let off = self.generators.iter().map(|g| d.dot(g).abs()).sum();
                (d, off)
            })
            .collect()
    }

    /// Exact membership test (dimensions <= 3) with absolute tolerance.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let rel = x - &self.center;
        self.facet_cuts()
            .iter()
            .all(|(d, off)| d.dot(&rel).abs() <= off + tol)
    }

    /// Vertex enumeration (dimensions <= 3).
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        if self.generators.is_empty() {
            return vec![self.center.clone()];
        }
        let mut raw: Vec<DVector<f64>> = Vec::new();
        match n {
            1 => {
                let h: f64 = self.generators.iter().map(|g| g[0].abs()).sum();
                raw.push(DVector::from_element(1, self.center[0] - h));
                raw.push(DVector::from_element(1, self.center[0] + h));
            }
            2 => {
                // Orient all generators into the upper half-plane, sort by
                // angle, and walk the boundary.
                let mut gs: Vec<DVector<f64>> = self
                    .generators
                    .iter()
                    .map(|g| {
                        if g[1] < 0.0 || (g[1] == 0.0 && g[0] < 0.0) {
                            -g
                        } else {
                            g.clone()
                        }
                    })
                    .collect();
                gs.sort_by(|a, b| {
                    a[1].atan2(a[0])
                        .partial_cmp(&b[1].atan2(b[0]))
                        .expect("finite angles")
                });
                let mut v = self.center.clone();
                for g in &gs {
                    v -= g;
                }
                raw.push(v.clone());
                for g in &gs {
                    v += 2.0 * g;
                    raw.push(v.clone());
                }
                // Second chain: mirror through the center.
                let k = raw.len();
                for i in 0..k {
                    raw.push(2.0 * &self.center - &raw[i]);
                }
            }
            3 => {
                for (d, _) in self.facet_cuts() {
                    for sign in [1.0f64, -1.0] {
                        let dir = sign * &d;
                        let mut base = self.center.clone();
                        let mut free: Vec<usize> = Vec::new();
                        for (gi, g) in self.generators.iter().enumerate() {
                            let s = dir.dot(g);
                            if s.abs() > 1e-10 {
                                base += s.signum() * g;
                            } else {
                                free.push(gi);
                            }
                        }
                        // Generators orthogonal to the facet normal span the
                        // facet itself; branch over their signs to collect the
                        // facet's corners.
                        let k = free.len().min(4);
                        for mask in 0..(1usize << k) {
                            let mut v = base.clone();
                            for (bit, gi) in free.iter().take(k).enumerate() {
                                let s = if (mask >> bit) & 1 == 1 { 1.0 } else { -1.0 };
                                v += s * &self.generators[*gi];
                            }
                            raw.push(v);
                        }
                    }
                }
                if raw.is_empty() {
                    // All generators parallel: a segment.
                    let u = &self.generators[0] / self.generators[0].norm();
                    let mut ext = DVector::zeros(n);
                    for g in &self.generators {
                        ext += u.dot(g).signum() * g;
                    }
                    raw.push(&self.center + &ext);
                    raw.push(&self.center - &ext);
                }
            }
            _ => {
                // Not needed beyond 3-D; return the box hull corners.
                raw = self.box_hull().vertices();
            }
        }
        dedup_points(raw)
    }

    /// Uniform-ish sample: random coefficients in `[-1, 1]` per generator.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let mut x = self.center.clone();
        for g in &self.generators {
            x += rng.random_range(-1.0..1.0f64) * g;
        }
        x
    }
}

fn cross3(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])
}

/// Deduplicate unit directions that agree up to sign.
fn dedup_directions(dirs: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    'outer: for d in dirs {
        for seen in &out {
            if (seen - &d).amax() < 1e-9 || (seen + &d).amax() < 1e-9 {
                continue 'outer;
            }
        }
        out.push(d);
    }
    out
}

fn dedup_points(mut pts: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    while let Some(p) = pts.pop() {
        if !out.iter().any(|q| (q - &p).amax() < 1e-9) {
            out.push(p);
        }
    }
    out.reverse();
    out
}

/// Robust positively invariant error set and its derived tightening boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantSet {
    /// Vertex representation of the invariant set (for hull computations).
    pub rpi: VPolytope,
    /// Axis-aligned hull of the invariant set; used to tighten state boxes.
    pub rpi_box: AxisBox,
    /// Axis-aligned hull of `K * rpi`; used to tighten input boxes.
    pub input_image_box: AxisBox,
    /// Iteration index this set was computed for.
    pub iteration: usize,
    /// Underlying zonotope (exact membership tests, sampling).
    pub zonotope: Zonotope,
    /// Facet cuts of the zonotope, cached for bulk membership checks.
    pub facets: Vec<(DVector<f64>, f64)>,
}

impl InvariantSet {
    /// Membership in the invariant set with absolute tolerance.
    pub fn contains(&self, e: &DVector<f64>, tol: f64) -> bool {
        let rel = e - &self.zonotope.center;
        self.facets.iter().all(|(d, off)| d.dot(&rel).abs() <= off + tol)
    }
}

/// Discrete-time LQR gain for `x+ = A x + B u` with stage cost
/// `x^T Q x + u^T R u`, via the Riccati fixed point.  Returns `K` such that
/// `u = K x` is optimal (and stabilizing when `(A, B)` is stabilizable).
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ErrorInvariantError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(ErrorInvariantError::Shape(format!(
            "A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITERS {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let gain_part = gram
            .clone()
            .cholesky()
            .ok_or_else(|| ErrorInvariantError::Shape("R + B'PB not positive definite".into()))?
            .solve(&(&btp * a));
        let p_next = q + a.transpose() * &p * a - (a.transpose() * btp.transpose()) * &gain_part;
        // Symmetrize to stop round-off drift.
        let p_next = 0.5 * (&p_next + p_next.transpose());
        if p_next.iter().any(|v| !v.is_finite()) {
            return Err(ErrorInvariantError::RiccatiDivergence(RICCATI_MAX_ITERS, f64::INFINITY));
        }
        residual = (&p_next - &p).amax();
        p = p_next;
        if residual < RICCATI_TOL {
            let btp = b.transpose() * &p;
            let gram = r + &btp * b;
            let k = -gram
                .cholesky()
                .ok_or_else(|| ErrorInvariantError::Shape("R + B'PB not positive definite".into()))?
                .solve(&(&btp * a));
            return Ok(k);
        }
    }
    Err(ErrorInvariantError::RiccatiDivergence(RICCATI_MAX_ITERS, residual))
}

/// Spectral radius via complex eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Linearize the model at a reference point and synthesize the error
/// feedback gain.  Returns `(A, B, policy)` with `A, B` the Jacobians of the
/// dynamics at `(x_ref, u_ref)`.
pub fn linearize_and_gain(
    model: &SystemModel,
    x_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
    q_lqr: &DMatrix<f64>,
    r_lqr: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, ErrorPolicy), ErrorInvariantError> {
    let (a, b) = model.jacobians(x_ref, u_ref, 1e-6);
    let k = lqr_gain(&a, &b, q_lqr, r_lqr)?;
    let rho = spectral_radius(&(&a + &b * &k));
    if rho >= 1.0 {
        return Err(ErrorInvariantError::NotContractive(format!(
            "spectral radius of A + BK is {rho:.6}"
        )));
    }
    Ok((a, b, ErrorPolicy { k }))
}

/// RPI set for `e+ = (A + B K) e + d`, `d` ranging over `d_bar`.
///
/// The disturbance polytope is first over-approximated by its axis-aligned
/// bounding box, split into center `c` and half-width vector `h`.  The
/// constant part is absorbed into the equilibrium offset
/// `e_c = (I - A_cl)^{-1} c`; the symmetric part accumulates as the zonotope
/// with generators `A_cl^k diag(h)`, `k < N`, inflated by `1/(1 - alpha)`
/// where `alpha >= max_i (|A_cl^N| h)_i / h_i`.  The result is invariant for
/// the boxed dynamics, hence for the original ones.
pub fn compute_rpi(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    d_bar: &VPolytope,
    horizon_cap: usize,
) -> Result<InvariantSet, ErrorInvariantError> {
    let n = a.nrows();
    if d_bar.dim() != n {
        return Err(ErrorInvariantError::Shape(format!(
            "disturbance dimension {} vs state dimension {}",
            d_bar.dim(),
            n
        )));
    }
    let a_cl = a + b * k;
    let rho = spectral_radius(&a_cl);
    if rho >= 1.0 {
        return Err(ErrorInvariantError::NotContractive(format!(
            "spectral radius of A + BK is {rho:.6}"
        )));
    }

    let d_box = bounding_box_vpoly(d_bar);
    let c = d_box.center();
    let h = d_box.half_widths();

    // Equilibrium offset for the constant disturbance component.
    let eye = DMatrix::<f64>::identity(n, n);
    let e_c = (&eye - &a_cl)
        .lu()
        .solve(&c)
        .ok_or_else(|| ErrorInvariantError::NotContractive("I - A_cl singular".into()))?;

    // Degenerate case: no symmetric disturbance at all.
    if h.amax() <= GENERATOR_EPS {
        let zono = Zonotope::new(e_c, Vec::new())?;
        return finish_invariant_set(zono, k);
    }

    // Find the truncation order: componentwise |A_cl^N| h <= alpha h.
    let mut pow = eye.clone();
    let mut powers: Vec<DMatrix<f64>> = Vec::with_capacity(horizon_cap);
    let mut chosen: Option<(usize, f64)> = None;
    let mut last_alpha = f64::INFINITY;
    for step in 1..=horizon_cap {
        powers.push(pow.clone());
        pow = &a_cl * pow;
        let abs_pow_h = {
            let mut v: DVector<f64> = DVector::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    v[i] += pow[(i, j)].abs() * h[j];
                }
            }
            v
        };
        let mut alpha: f64 = 0.0;
        for i in 0..n {
            if h[i] > GENERATOR_EPS {
                alpha = alpha.max(abs_pow_h[i] / h[i]);
            } else if abs_pow_h[i] > 1e-12 {
                alpha = f64::INFINITY;
            }
        }
        last_alpha = alpha;
        if alpha <= RPI_ALPHA_TARGET {
            chosen = Some((step, alpha));
            break;
        }
    }
    let (order, alpha) = match chosen {
        Some(pair) => pair,
        None if last_alpha < 1.0 => (horizon_cap, last_alpha),
        None => {
            return Err(ErrorInvariantError::NotContractive(format!(
                "|A_cl^{horizon_cap}| h does not fit inside h (ratio {last_alpha:.3})"
            )))
        }
    };

    let inflate = 1.0 / (1.0 - alpha);
    let mut generators: Vec<DVector<f64>> = Vec::with_capacity(order * n);
    for p in powers.iter().take(order) {
        for j in 0..n {
            if h[j] > GENERATOR_EPS {
                let g = p.column(j) * (h[j] * inflate);
                generators.push(g.into_owned());
            }
        }
    }
    let zono = Zonotope::new(e_c, generators)?;
    finish_invariant_set(zono, k)
}

fn finish_invariant_set(zono: Zonotope, k: &DMatrix<f64>) -> Result<InvariantSet, ErrorInvariantError> {
    let rpi_box = zono.box_hull();
    let input_image_box = zono.linear_map(k)?.box_hull();
    let rpi = VPolytope::new(zono.vertices())?;
    let facets = zono.facet_cuts();
    Ok(InvariantSet {
        rpi,
        rpi_box,
        input_image_box,
        iteration: 0,
        zonotope: zono,
        facets,
    })
}

/// Sampled componentwise bound on the linearization remainder
/// `f(x, u) - f(x_ref, u_ref) - A (x - x_ref) - B (u - u_ref)` over the
/// operating envelope `x_box x u_box`, inflated by `margin`.
/// Returns a symmetric axis-aligned box.
#[allow(clippy::too_many_arguments)]
pub fn linearization_error_box(
    model: &SystemModel,
    x_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_box: &AxisBox,
    u_box: &AxisBox,
    samples: usize,
    margin: f64,
    seed: u64,
) -> AxisBox {
    let n = x_ref.len();
    let f_ref = model.step(x_ref, u_ref);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: DVector<f64> = DVector::zeros(n);
    for _ in 0..samples {
        let x = x_box.sample(&mut rng);
        let u = u_box.sample(&mut rng);
        let f = model.step(&x, &u);
        let lin = &f_ref + a * (&x - x_ref) + b * (&u - u_ref);
        for i in 0..n {
            worst[i] = worst[i].max((f[i] - lin[i]).abs());
        }
    }
    AxisBox::symmetric(&(worst * margin))
}

/// Sampled componentwise bound on the closed-loop prediction remainder
///
/// ```text
///   r(x̄, ū, e) = f(x̄ + e, ū + K e) − f(x̄, ū) − (A + B K) e
/// ```
///
/// over a cloud of nominal base points and an error box, inflated by
/// `margin`.  This is the quantity that actually perturbs the error dynamics
/// `e⁺ = (A + BK) e + d + r` along a tube around a nominal trajectory: the
/// base-point linearization errors of the true and predicted step cancel, so
/// only the increment remainder survives.  Bounding it over trajectory-shaped
/// base clouds (recorded nominal pairs jittered inside `base_spread_*`,
/// clipped to the operating boxes) instead of the full operating envelope
/// keeps the bound usable: the curvature of the dynamics far from any
/// realizable trajectory would otherwise dominate.
///
/// Corners of the error box are cycled deterministically in addition to the
/// uniform draws, and `e = 0` (remainder zero) is always included.  The
/// result is a symmetric box bounding `|r|` componentwise.
#[allow(clippy::too_many_arguments)]
pub fn tube_remainder_box(
    model: &SystemModel,
    k: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bases: &[(DVector<f64>, DVector<f64>)],
    base_spread_x: &AxisBox,
    base_spread_u: &AxisBox,
    clip_x: &AxisBox,
    clip_u: &AxisBox,
    e_box: &AxisBox,
    samples: usize,
    margin: f64,
    seed: u64,
) -> AxisBox {
    let n = model.n;
    let a_cl = a + b * k;
    let corners = e_box.vertices();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: DVector<f64> = DVector::zeros(n);
    let clip = |v: &DVector<f64>, bx: &AxisBox| -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i].clamp(bx.lb[i], bx.ub[i]))
    };
    let fallback = (clip_x.center(), clip_u.center());
    for idx in 0..samples {
        let (bx, bu) = if bases.is_empty() {
            (&fallback.0, &fallback.1)
        } else {
            let (x, u) = &bases[idx % bases.len()];
            (x, u)
        };
        let x_bar = clip(&(bx + base_spread_x.sample(&mut rng)), clip_x);
        let u_bar = clip(&(bu + base_spread_u.sample(&mut rng)), clip_u);
        // Interleave exact corners of the error box with interior draws.
        let e = if idx % 3 == 0 {
            corners[(idx / 3) % corners.len()].clone()
        } else {
            e_box.sample(&mut rng)
        };
        let true_step = model.step(&(&x_bar + &e), &(&u_bar + k * &e));
        let predicted = model.step(&x_bar, &u_bar) + &a_cl * &e;
        for i in 0..n {
            worst[i] = worst[i].max((true_step[i] - predicted[i]).abs());
        }
    }
    AxisBox::symmetric(&(worst * margin))
}

///// Bounded disturbance set for the error dynamics: the box hull of the
/// estimated support widened by the model-increment remainder.  The executed
/// nominal trajectory satisfies the model exactly (the planner enforces a
/// dynamics residual far below the remainder scale), so the remainder enters
/// the error recursion once.
pub fn combined_disturbance(
    d_hat: &Ellipsoid,
    w_lin: &AxisBox,
) -> Result<VPolytope, ErrorInvariantError> {
    if d_hat.dim() != w_lin.dim() {
        return Err(ErrorInvariantError::Shape(format!(
            "support dimension {} vs linearization-error dimension {}",
            d_hat.dim(),
            w_lin.dim()
        )));
    }
    let d_box = bounding_box_ellipsoid(d_hat);
    let total = d_box.minkowski_sum(w_lin)?;
    Ok(total.to_vpolytope())
}
