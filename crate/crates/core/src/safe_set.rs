//! Convex safe sets over output windows with barycentric cost-to-go values.
//!
//! Recorded nominal trajectories are stored as tuples `(window, next output,
//! cost-to-go)`.  The convex hull of the stored windows acts as a terminal
//! region for planning, and the cost-to-go of an arbitrary hull point is the
//! cheapest convex combination of stored values that reproduces it — a linear
//! program over the multipliers.
//!
//! Two structural properties make the hull usable as a terminal ingredient:
//!
//! * **Succession closure.**  Every stored tuple carries the output that
//!   followed it, and the one-step-shifted window of each tuple is itself a
//!   stored generator.  A convex combination of tuples therefore has a
//!   well-defined successor window that is again in the hull.  Finite
//!   forward-moving data cannot close on itself, so each inserted trajectory
//!   is extended with a synthetic *anchor chain*: the forward step decays
//!   geometrically until it vanishes, and the chain ends in a zero-step
//!   window that succeeds itself.  Anchor rows are flagged `synthetic`; they
//!   carry zero stage cost deep in the goal region and exist purely to
//!   terminate succession.
//! * **Cost recursion.**  Stored cost-to-go values satisfy
//!   `C_t = c(Y_t) + C_{t+1}` along every tuple chain, with the self-succeeding
//!   anchor forcing a zero tail.  Together with convexity of the stage cost
//!   this yields the one-step decrease of the barycentric value function.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error_invariant::InvariantSet;
use crate::flat_system::{FlatError, LiftedOutput, OutputWindow, SystemModel};
use crate::geometry::{hull_membership_residual, AxisBox, GeometryError};
use crate::solver::{solve_conic, Cone, ConicProblem, SolveError};
use crate::tightening::{BoundInformativeness, TightenedConstraints};

/// Stage-cost terms at or below this value count as inactive (in the goal).
pub const GOAL_TOL: f64 = 1e-9;
/// Consecutive near-goal steps required before a trajectory is truncated.
pub const SETTLE_STEPS: usize = 5;
/// Goal-distance threshold of the settling rule.
pub const SETTLE_DIST: f64 = 1e-3;
/// Numerical tolerance for hull-membership checks.
pub const HULL_TOL: f64 = 1e-6;
/// Geometric decay of the anchor chain's forward step.
const ANCHOR_DECAY: f64 = 0.7;
/// The anchor chain stops once its step is shorter than this.
const ANCHOR_MIN_STEP: f64 = 1e-4;
/// Dynamics residual allowed in recorded nominal trajectories.
const DYNAMICS_TOL: f64 = 1e-8;
/// Membership tolerance for tube / tightened-set validation of inserts.
const INSERT_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SafeSetError {
    /// Recorded data violates a storage precondition.
    #[error("storage precondition violated: {0}")]
    SpecViolation(String),
    /// The barycentric program has no feasible multiplier vector.
    #[error("barycentric program infeasible: {0}")]
    Infeasible(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Flat(#[from] FlatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolveError),
}

/// Vector of convex violation terms for one lifted output; the stage cost is
/// the sum of their positive parts and the goal set is where all terms are
/// nonpositive.  Builders are model-specific so that every term can be made
/// exactly convex (piecewise linear or norm-based) in the output entries.
pub type TermFn = Arc<dyn Fn(&LiftedOutput) -> DVector<f64> + Send + Sync>;

/// Convex stage cost measuring violation of the goal-region conditions.
#[derive(Clone)]
pub struct StageCost {
    terms: TermFn,
}

impl StageCost {
    pub fn new(terms: TermFn) -> Self {
        Self { terms }
    }

    /// Raw term values (negative means satisfied with margin).
    pub fn terms(&self, l: &LiftedOutput) -> DVector<f64> {
        (self.terms)(l)
    }

    /// Sum of hinge values `max(0, term)`.
    pub fn eval(&self, l: &LiftedOutput) -> f64 {
        self.terms(l).iter().map(|t| t.max(0.0)).sum()
    }

    /// All terms inactive up to `tol`.
    pub fn in_goal(&self, l: &LiftedOutput, tol: f64) -> bool {
        self.terms(l).iter().all(|t| *t <= tol)
    }
}

/// Stage cost of one lifted output.
pub fn stage_cost(l: &LiftedOutput, cost: &StageCost) -> f64 {
    cost.eval(l)
}

/// Goal-region description: the task target box, its nominal inset and the
/// nominal input box whose informative bound components characterize goal
/// motion (components with constant bounds are excluded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Task target region in state space.
    pub x_goal: AxisBox,
    /// Nominal goal box, inset from `x_goal` so the error tube stays inside.
    pub x_goal_bar: AxisBox,
    /// Nominal input box characterizing goal motion; must admit zero forward
    /// step so that the self-succeeding anchor carries zero stage cost.
    pub u_nom: AxisBox,
    /// Which bound components carry window information.
    pub informative: BoundInformativeness,
}

impl GoalSpec {
    pub fn new(
        x_goal: AxisBox,
        x_goal_bar: AxisBox,
        u_nom: AxisBox,
        informative: BoundInformativeness,
    ) -> Result<Self, SafeSetError> {
        if x_goal.dim() != x_goal_bar.dim() {
            return Err(SafeSetError::Shape(format!(
                "goal boxes with dims {} and {}",
                x_goal.dim(),
                x_goal_bar.dim()
            )));
        }
        let total = x_goal.dim() + u_nom.dim();
        if informative.lower.len() != total || informative.upper.len() != total {
            return Err(SafeSetError::Shape(format!(
                "informativeness over {} components, expected {}",
                informative.lower.len(),
                total
            )));
        }
        for i in 0..x_goal.dim() {
            if x_goal_bar.lb[i] < x_goal.lb[i] - 1e-12 || x_goal_bar.ub[i] > x_goal.ub[i] + 1e-12 {
                return Err(SafeSetError::SpecViolation(format!(
                    "nominal goal box leaves the target box in component {i}"
                )));
            }
        }
        Ok(Self { x_goal, x_goal_bar, u_nom, informative })
    }

    /// The nominal goal box plus the error box must stay inside the target.
    pub fn check_margin(&self, rpi_box: &AxisBox) -> Result<(), SafeSetError> {
        if rpi_box.dim() != self.x_goal.dim() {
            return Err(SafeSetError::Shape(format!(
                "error box dim {} vs goal dim {}",
                rpi_box.dim(),
                self.x_goal.dim()
            )));
        }
        let sum = self.x_goal_bar.minkowski_sum(rpi_box)?;
        for i in 0..self.x_goal.dim() {
            if sum.lb[i] < self.x_goal.lb[i] - 1e-12 || sum.ub[i] > self.x_goal.ub[i] + 1e-12 {
                return Err(SafeSetError::SpecViolation(format!(
                    "goal margin violated in component {i}: nominal goal box plus error box leaves the target"
                )));
            }
        }
        Ok(())
    }
}

/// One stored tuple: a window, the output that followed it, and the recorded
/// cost-to-go.  `synthetic` rows belong to the anchor chain appended at
/// storage time; they terminate succession and are excluded from
/// recorded-data statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredWindow {
    pub window: OutputWindow,
    pub next_output: DVector<f64>,
    pub cost_to_go: f64,
    /// Stage cost of this tuple's lifted output.
    pub stage: f64,
    pub iteration: usize,
    pub time: usize,
    pub synthetic: bool,
}

impl StoredWindow {
    /// The stored window with its next output appended.
    pub fn lifted(&self) -> LiftedOutput {
        lifted_from(&self.window, &self.next_output)
    }

    /// Column-stacked window entries.
    pub fn window_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.window.0.as_slice())
    }

    /// The one-step-shifted window this tuple leads to.
    pub fn successor_window(&self) -> Result<OutputWindow, SafeSetError> {
        Ok(self.window.forward_shift(&self.next_output)?)
    }
}

/// Append `next` to a window, forming the lifted output.
pub fn lifted_from(window: &OutputWindow, next: &DVector<f64>) -> LiftedOutput {
    let m = window.0.nrows();
    let r = window.0.ncols();
    let mut mat = DMatrix::zeros(m, r + 1);
    mat.columns_mut(0, r).copy_from(&window.0);
    mat.column_mut(r).copy_from(next);
    LiftedOutput(mat)
}

/// Convex safe set: stored tuples plus the goal description.  Immutable
/// between iterations — inserts return a new store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafeSetStore {
    pub windows: Vec<StoredWindow>,
    pub goal: GoalSpec,
}

impl SafeSetStore {
    pub fn new(goal: GoalSpec) -> Self {
        Self { windows: Vec::new(), goal }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Column-stacked window vectors of all generators.
    pub fn window_vectors(&self) -> Vec<DVector<f64>> {
        self.windows.iter().map(StoredWindow::window_vector).collect()
    }

    /// Indices of recorded (non-synthetic) tuples.
    pub fn recorded_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.windows[i].synthetic).collect()
    }

    /// Membership of a window in the convex hull of stored windows.
    pub fn hull_contains(&self, window: &OutputWindow, tol: f64) -> Result<bool, SafeSetError> {
        if self.is_empty() {
            return Ok(false);
        }
        let point = DVector::from_column_slice(window.0.as_slice());
        let verts = self.window_vectors();
        Ok(hull_membership_residual(&point, &verts)? <= tol)
    }

    /// Highest iteration index present, if any.
    pub fn latest_iteration(&self) -> Option<usize> {
        self.windows.iter().map(|w| w.iteration).max()
    }

    /// Recorded cost-to-go at time zero of one iteration.
    pub fn iteration_initial_cost(&self, iteration: usize) -> Option<f64> {
        self.windows
            .iter()
            .find(|w| w.iteration == iteration && w.time == 0 && !w.synthetic)
            .map(|w| w.cost_to_go)
    }
}

/// Closed-loop data of one iteration: the nominal trajectory that is stored
/// and the realized trajectory used to validate the tube conditions.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub nominal_states: Vec<DVector<f64>>,
    pub nominal_inputs: Vec<DVector<f64>>,
    pub true_states: Vec<DVector<f64>>,
    pub true_inputs: Vec<DVector<f64>>,
    pub iteration: usize,
}

/// References needed to validate an insert: the error invariant the run was
/// certified with and the tightened constraint sets of that iteration.
pub struct InsertValidation<'a> {
    pub invariant: &'a InvariantSet,
    pub constraints: &'a TightenedConstraints,
}

/// Validate one iteration's data, truncate it at goal settlement, append the
/// synthetic anchor chain and insert everything with backward-recursed
/// cost-to-go values.  Returns the grown store; the input store is unchanged.
pub fn insert_iteration(
    store: &SafeSetStore,
    bundle: &TrajectoryBundle,
    model: &SystemModel,
    cost: &StageCost,
    validation: &InsertValidation,
) -> Result<SafeSetStore, SafeSetError> {
    let t_steps = bundle.nominal_inputs.len();
    if bundle.nominal_states.len() != t_steps + 1 {
        return Err(SafeSetError::Shape(format!(
            "{} nominal states for {} inputs",
            bundle.nominal_states.len(),
            t_steps
        )));
    }
    if bundle.true_states.len() != t_steps + 1 || bundle.true_inputs.len() != t_steps {
        return Err(SafeSetError::Shape("realized trajectory length mismatch".into()));
    }

    // Truncation: first run of consecutive near-goal realized states.
    let t_end = settle_index(&bundle.true_states, &store.goal.x_goal).ok_or_else(|| {
        SafeSetError::SpecViolation("trajectory does not settle in the goal region".into())
    })?;
    if t_end < 2 {
        return Err(SafeSetError::SpecViolation("trajectory too short to form tuples".into()));
    }

    // Tube and constraint validation over the stored range.
    for t in 0..=t_end {
        let err = &bundle.true_states[t] - &bundle.nominal_states[t];
        if !validation.invariant.contains(&err, INSERT_TOL) {
            return Err(SafeSetError::SpecViolation(format!(
                "recorded error leaves the invariant tube at step {t}"
            )));
        }
        if !validation.constraints.x_bar.contains(&bundle.nominal_states[t], INSERT_TOL) {
            return Err(SafeSetError::SpecViolation(format!(
                "nominal state leaves the tightened state box at step {t}"
            )));
        }
        if t < t_end {
            if !validation.constraints.u_bar.contains(&bundle.nominal_inputs[t], INSERT_TOL) {
                return Err(SafeSetError::SpecViolation(format!(
                    "nominal input leaves the tightened input box at step {t}"
                )));
            }
            let pred = model.step(&bundle.nominal_states[t], &bundle.nominal_inputs[t]);
            let res = (&bundle.nominal_states[t + 1] - pred).amax();
            if res > DYNAMICS_TOL {
                return Err(SafeSetError::SpecViolation(format!(
                    "nominal dynamics residual {res:.3e} at step {t}"
                )));
            }
        }
    }

    let outputs: Vec<DVector<f64>> =
        bundle.nominal_states[..=t_end].iter().map(|x| model.output(x)).collect();

    let mut rows: Vec<StoredWindow> = Vec::new();
    // Recorded tuples: window at t with the output recorded two steps ahead.
    for t in 0..=t_end.saturating_sub(2) {
        let window = OutputWindow::from_outputs(&[outputs[t].clone(), outputs[t + 1].clone()])?;
        rows.push(StoredWindow {
            window,
            next_output: outputs[t + 2].clone(),
            cost_to_go: f64::NAN,
            stage: f64::NAN,
            iteration: bundle.iteration,
            time: t,
            synthetic: false,
        });
    }

    // Anchor chain: geometric decay of the final step down to rest.
    let seq = anchor_sequence(&outputs[t_end - 1], &outputs[t_end]);
    for (k, win) in seq.windows(3).enumerate() {
        let window = OutputWindow::from_outputs(&[win[0].clone(), win[1].clone()])?;
        rows.push(StoredWindow {
            window,
            next_output: win[2].clone(),
            cost_to_go: f64::NAN,
            stage: f64::NAN,
            iteration: bundle.iteration,
            time: t_end - 1 + k,
            synthetic: true,
        });
    }

    // Stage costs and backward cost recursion; the self-succeeding final
    // window must carry zero stage cost for the recursion to close.
    for row in rows.iter_mut() {
        row.stage = cost.eval(&row.lifted());
    }
    let last = rows.len() - 1;
    if rows[last].stage > GOAL_TOL {
        return Err(SafeSetError::SpecViolation(format!(
            "self-succeeding anchor window has stage cost {:.3e}; the recorded run must end deeper inside the goal region",
            rows[last].stage
        )));
    }
    let mut acc = rows[last].stage;
    rows[last].cost_to_go = acc;
    for i in (0..last).rev() {
        acc += rows[i].stage;
        rows[i].cost_to_go = acc;
    }

    let mut grown = store.clone();
    grown.windows.extend(rows);
    Ok(grown)
}

/// Index of the last state in the first `SETTLE_STEPS`-long run of states
/// within `SETTLE_DIST` of the goal box.
fn settle_index(states: &[DVector<f64>], goal: &AxisBox) -> Option<usize> {
    let mut streak = 0usize;
    for (t, x) in states.iter().enumerate() {
        if box_distance(goal, x) < SETTLE_DIST {
            streak += 1;
            if streak == SETTLE_STEPS {
                return Some(t);
            }
        } else {
            streak = 0;
        }
    }
    None
}

/// Euclidean distance from a point to an axis box.
pub fn box_distance(b: &AxisBox, x: &DVector<f64>) -> f64 {
    let mut sq = 0.0;
    for i in 0..b.dim() {
        let d = (b.lb[i] - x[i]).max(x[i] - b.ub[i]).max(0.0);
        sq += d * d;
    }
    sq.sqrt()
}

/// Output continuation whose step decays geometrically and ends at rest,
/// repeated so the final window succeeds itself.
fn anchor_sequence(ya: &DVector<f64>, yb: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut seq = vec![ya.clone(), yb.clone()];
    let mut step = yb - ya;
    loop {
        step *= ANCHOR_DECAY;
        if step.amax() < ANCHOR_MIN_STEP {
            break;
        }
        let next = seq.last().unwrap() + &step;
        seq.push(next);
    }
    let rest = seq.last().unwrap().clone();
    seq.push(rest.clone());
    seq.push(rest);
    seq
}

/// Barycentric value of a query window: multipliers over stored generators
/// and the minimal interpolated cost-to-go.
#[derive(Debug, Clone)]
pub struct BarycentricValue {
    pub value: f64,
    /// Multipliers over the full store (zero at unused generators).
    pub multipliers: DVector<f64>,
}

/// Cheapest convex combination of all stored tuples reproducing `query`.
pub fn barycentric_cost(
    store: &SafeSetStore,
    query: &OutputWindow,
) -> Result<BarycentricValue, SafeSetError> {
    let all: Vec<usize> = (0..store.len()).collect();
    barycentric_over(store, &all, query)
}

/// Cheapest convex combination over a generator subset reproducing `query`.
pub fn barycentric_over(
    store: &SafeSetStore,
    indices: &[usize],
    query: &OutputWindow,
) -> Result<BarycentricValue, SafeSetError> {
    if indices.is_empty() {
        return Err(SafeSetError::Infeasible("no generators".into()));
    }
    let d = query.0.nrows() * query.0.ncols();
    let qvec = DVector::from_column_slice(query.0.as_slice());

    // Collapse duplicate windows onto their cheapest row.  Re-inserted
    // trajectories would otherwise add identical columns, and interior-point
    // degeneracy then spreads multiplier mass nondeterministically.
    let mut reps: Vec<(usize, DVector<f64>)> = Vec::new();
    for &idx in indices {
        let w = &store.windows[idx];
        let wv = w.window_vector();
        if wv.len() != d {
            return Err(SafeSetError::Shape(format!(
                "stored window dim {} vs query dim {d}",
                wv.len()
            )));
        }
        let scale = 1e-12 * (1.0 + wv.amax());
        match reps.iter_mut().find(|(_, rv)| (rv - &wv).amax() <= scale) {
            Some(rep) => {
                if w.cost_to_go < store.windows[rep.0].cost_to_go {
                    rep.0 = idx;
                }
            }
            None => reps.push((idx, wv)),
        }
    }
    let k = reps.len();

    let mut a = DMatrix::zeros(d + 1 + k, k);
    let mut b = DVector::zeros(d + 1 + k);
    let mut costs = DVector::zeros(k);
    for (j, (idx, wv)) in reps.iter().enumerate() {
        a.view_mut((0, j), (d, 1)).copy_from(wv);
        a[(d, j)] = 1.0;
        a[(d + 1 + j, j)] = -1.0;
        costs[j] = store.windows[*idx].cost_to_go;
    }
    b.rows_mut(0, d).copy_from(&qvec);
    b[d] = 1.0;

    let problem = ConicProblem {
        p: None,
        q: costs.clone(),
        a,
        b,
        cones: vec![Cone::Zero(d + 1), Cone::Nonneg(k)],
    };
    let sol = solve_conic(&problem)?;
    if !sol.status.is_ok() {
        return Err(SafeSetError::Infeasible(format!(
            "query window outside the stored hull ({:?})",
            sol.status
        )));
    }

    // Clean the multipliers and verify they actually reproduce the query.
    let mut lam = DVector::zeros(store.len());
    for (j, (idx, _)) in reps.iter().enumerate() {
        lam[*idx] += sol.x[j].max(0.0);
    }
    let total: f64 = lam.sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(SafeSetError::Infeasible(format!("multiplier mass {total:.6} far from one")));
    }
    lam /= total;
    let blended = blend_window(store, &lam)?;
    let residual = (&blended.0 - &query.0).amax();
    let scale_tol = HULL_TOL * (1.0 + qvec.amax());
    if residual > scale_tol {
        return Err(SafeSetError::Infeasible(format!(
            "representation residual {residual:.3e} exceeds tolerance"
        )));
    }
    let value = lam
        .iter()
        .zip(store.windows.iter())
        .map(|(l, w)| l * w.cost_to_go)
        .sum();
    Ok(BarycentricValue { value, multipliers: lam })
}

/// Convex combination of stored windows under a full-length multiplier vector.
pub fn blend_window(
    store: &SafeSetStore,
    multipliers: &DVector<f64>,
) -> Result<OutputWindow, SafeSetError> {
    if multipliers.len() != store.len() || store.is_empty() {
        return Err(SafeSetError::Shape(format!(
            "{} multipliers for {} generators",
            multipliers.len(),
            store.len()
        )));
    }
    let mut acc = DMatrix::zeros(store.windows[0].window.0.nrows(), store.windows[0].window.0.ncols());
    for (l, w) in multipliers.iter().zip(store.windows.iter()) {
        if *l != 0.0 {
            acc += *l * &w.window.0;
        }
    }
    Ok(OutputWindow(acc))
}

/// Convex combination of the stored next outputs under the same multipliers:
/// the successor output of the blended window.
pub fn successor_output(
    store: &SafeSetStore,
    multipliers: &DVector<f64>,
) -> Result<DVector<f64>, SafeSetError> {
    if multipliers.len() != store.len() || store.is_empty() {
        return Err(SafeSetError::Shape(format!(
            "{} multipliers for {} generators",
            multipliers.len(),
            store.len()
        )));
    }
    let mut acc = DVector::zeros(store.windows[0].next_output.len());
    for (l, w) in multipliers.iter().zip(store.windows.iter()) {
        if *l != 0.0 {
            acc += *l * &w.next_output;
        }
    }
    Ok(acc)
}

/// A window qualifies as terminal for a planned state when it lies in the
/// stored hull and reconstructs exactly that state.
pub fn terminal_membership(
    store: &SafeSetStore,
    x_terminal: &DVector<f64>,
    window: &OutputWindow,
    model: &SystemModel,
) -> Result<bool, SafeSetError> {
    if !store.hull_contains(window, HULL_TOL)? {
        return Ok(false);
    }
    match model.reconstruct_state(window) {
        Ok(x) => Ok((x - x_terminal).amax() <= 1e-6),
        // Windows outside the reconstruction domain (e.g. zero forward step)
        // cannot certify a terminal state.
        Err(_) => Ok(false),
    }
}

/// Drop generators whose window is representable by the remaining ones at no
/// higher cost; the barycentric value function is unchanged.
pub fn prune(store: &SafeSetStore) -> Result<SafeSetStore, SafeSetError> {
    let mut keep: Vec<usize> = (0..store.len()).collect();
    let mut i = 0;
    while i < keep.len() && keep.len() > 1 {
        let idx = keep[i];
        let others: Vec<usize> =
            keep.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
        let redundant = match barycentric_over(store, &others, &store.windows[idx].window) {
            Ok(bv) => bv.value <= store.windows[idx].cost_to_go + 1e-9,
            Err(_) => false,
        };
        if redundant {
            keep.remove(i);
        } else {
            i += 1;
        }
    }
    let mut pruned = SafeSetStore::new(store.goal.clone());
    pruned.windows = keep.into_iter().map(|idx| store.windows[idx].clone()).collect();
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bicycle::{bicycle_model, goal_stage_cost, seed_controller, BicycleParams};
    use crate::error_invariant::Zonotope;
    use crate::geometry::VPolytope;
    use crate::tightening::detect_informative_bounds;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn params() -> BicycleParams {
        BicycleParams::default()
    }

    fn model() -> SystemModel {
        bicycle_model(params())
    }

    /// Goal spec with a degenerate tube: the nominal goal box equals the
    /// target box, so the task hinge threshold sits exactly at the target.
    fn wide_goal() -> GoalSpec {
        let p = params();
        let m = model();
        let info = detect_informative_bounds(&m);
        let x_goal = p.goal_box();
        let u_nom = AxisBox::from_slices(&[0.0, -p.delta_max], &[16.0, p.delta_max]).unwrap();
        GoalSpec::new(x_goal.clone(), x_goal, u_nom, info).expect("goal spec")
    }

    fn tiny_invariant() -> InvariantSet {
        let gens: Vec<DVector<f64>> = (0..3)
            .map(|i| {
                let mut g = DVector::zeros(3);
                g[i] = 1e-6;
                g
            })
            .collect();
        let z = Zonotope::new(DVector::zeros(3), gens).unwrap();
        InvariantSet {
            rpi: VPolytope { vertices: z.box_hull().vertices() },
            rpi_box: z.box_hull(),
            input_image_box: AxisBox::from_slices(&[-1e-6, -1e-6], &[1e-6, 1e-6]).unwrap(),
            iteration: 1,
            facets: z.facet_cuts(),
            zonotope: z,
        }
    }

    fn loose_constraints() -> TightenedConstraints {
        TightenedConstraints {
            x_bar: AxisBox::from_slices(&[-2.0, -4.5, -1.0], &[60.0, 4.5, 1.0]).unwrap(),
            u_bar: AxisBox::from_slices(&[5.0, -0.45], &[12.0, 0.45]).unwrap(),
            x_hat: AxisBox::from_slices(&[-2.0, -4.5, -1.05], &[60.0, 4.5, 1.05]).unwrap(),
            u_hat: AxisBox::from_slices(&[4.0, -0.5], &[13.0, 0.5]).unwrap(),
            alpha_x: 1.0,
            alpha_u: 1.0,
            v_x: DVector::zeros(3),
            v_u: DVector::zeros(2),
            iteration: 1,
        }
    }

    /// Undisturbed closed-loop rollout of the seed controller: nominal and
    /// realized trajectories coincide, so the tube checks pass trivially.
    fn seed_bundle(start: DVector<f64>, iteration: usize) -> TrajectoryBundle {
        let p = params();
        let m = model();
        let mut xs = vec![start];
        let mut us: Vec<DVector<f64>> = Vec::new();
        let mut streak = 0usize;
        while streak < SETTLE_STEPS && us.len() < 400 {
            let x = xs.last().unwrap().clone();
            let u = seed_controller(&p, &x);
            let xn = m.step(&x, &u);
            if p.goal_distance(&xn) < SETTLE_DIST {
                streak += 1;
            } else {
                streak = 0;
            }
            us.push(u);
            xs.push(xn);
        }
        assert_eq!(streak, SETTLE_STEPS, "seed rollout never settled");
        TrajectoryBundle {
            nominal_states: xs.clone(),
            nominal_inputs: us.clone(),
            true_states: xs,
            true_inputs: us,
            iteration,
        }
    }

    fn seeded_store() -> (SafeSetStore, StageCost) {
        let goal = wide_goal();
        let cost = goal_stage_cost(&params(), &goal);
        let store = SafeSetStore::new(goal);
        let inv = tiny_invariant();
        let cons = loose_constraints();
        let validation = InsertValidation { invariant: &inv, constraints: &cons };
        let bundle = seed_bundle(params().start_state(), 0);
        let store = insert_iteration(&store, &bundle, &model(), &cost, &validation).expect("insert");
        (store, cost)
    }

    fn straight_window(s: f64, e: f64, ds: f64) -> OutputWindow {
        OutputWindow::from_outputs(&[
            DVector::from_row_slice(&[s, e]),
            DVector::from_row_slice(&[s + ds, e]),
        ])
        .unwrap()
    }

    fn straight_lifted(s: f64, e: f64, ds: f64) -> LiftedOutput {
        LiftedOutput::from_outputs(&[
            DVector::from_row_slice(&[s, e]),
            DVector::from_row_slice(&[s + ds, e]),
            DVector::from_row_slice(&[s + 2.0 * ds, e]),
        ])
        .unwrap()
    }

    /// Dirichlet(1,…,1) weights over a subset of generators.
    fn dirichlet(rng: &mut ChaCha12Rng, store: &SafeSetStore, support: &[usize]) -> DVector<f64> {
        let mut lam = DVector::zeros(store.len());
        let mut total = 0.0;
        for &i in support {
            let e: f64 = -(rng.random::<f64>().max(1e-12)).ln();
            lam[i] = e;
            total += e;
        }
        lam / total
    }

    #[test]
    fn task_cost_values_on_straight_windows() {
        let cost = goal_stage_cost(&params(), &wide_goal());
        // 10 m short of the target line with everything else satisfied.
        assert!((cost.eval(&straight_lifted(30.0, 0.0, 1.8)) - 10.0).abs() < 1e-12);
        // Inside the target region: zero cost.
        assert_eq!(cost.eval(&straight_lifted(45.0, 0.0, 1.8)), 0.0);
        assert!(cost.in_goal(&straight_lifted(45.0, 0.0, 1.8), GOAL_TOL));
        assert!(!cost.in_goal(&straight_lifted(30.0, 0.0, 1.8), GOAL_TOL));
        // Rest window deep in the goal: exactly zero.
        let rest = LiftedOutput::from_outputs(&[
            DVector::from_row_slice(&[45.0, 1.0]),
            DVector::from_row_slice(&[45.0, 1.0]),
            DVector::from_row_slice(&[45.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(cost.eval(&rest), 0.0);
    }

    #[test]
    fn stage_cost_midpoint_convexity() {
        let cost = goal_stage_cost(&params(), &wide_goal());
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let sample = |rng: &mut ChaCha12Rng| {
            let s0 = rng.random_range(0.0..55.0);
            let e0 = rng.random_range(-4.0..4.0);
            let ds1 = rng.random_range(0.05..3.6);
            let de1 = rng.random_range(-1.5..1.5);
            let ds2 = rng.random_range(0.05..3.6);
            let de2 = rng.random_range(-1.5..1.5);
            LiftedOutput::from_outputs(&[
                DVector::from_row_slice(&[s0, e0]),
                DVector::from_row_slice(&[s0 + ds1, e0 + de1]),
                DVector::from_row_slice(&[s0 + ds1 + ds2, e0 + de1 + de2]),
            ])
            .unwrap()
        };
        for _ in 0..10_000 {
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            let mid = LiftedOutput((&a.0 + &b.0) * 0.5);
            let lhs = cost.eval(&mid);
            let rhs = 0.5 * (cost.eval(&a) + cost.eval(&b));
            assert!(lhs <= rhs + 1e-9, "midpoint {lhs} vs average {rhs}");
        }
    }

    #[test]
    fn insert_builds_recursion_and_anchor() {
        let (store, _cost) = seeded_store();
        let recorded = store.recorded_indices().len();
        let synthetic = store.len() - recorded;
        assert!(recorded >= 20, "expected a full recorded trajectory, got {recorded}");
        assert!(synthetic >= 10, "expected an anchor chain, got {synthetic}");

        // Cost recursion along the whole chain and succession closure:
        // each tuple's shifted window is the next stored window.
        for i in 0..store.len() - 1 {
            let w = &store.windows[i];
            assert!(
                (w.cost_to_go - (w.stage + store.windows[i + 1].cost_to_go)).abs() < 1e-9,
                "recursion break at {i}"
            );
            let shifted = w.successor_window().unwrap();
            assert!(
                (&shifted.0 - &store.windows[i + 1].window.0).amax() < 1e-12,
                "succession break at {i}"
            );
        }
        // Final window succeeds itself with zero stage cost.
        let last = store.windows.last().unwrap();
        let shifted = last.successor_window().unwrap();
        assert!((&shifted.0 - &last.window.0).amax() == 0.0);
        assert_eq!(last.stage, 0.0);
        assert_eq!(last.cost_to_go, 0.0);
        // The first recorded tuple carries the full accumulated cost.
        assert!(store.windows[0].cost_to_go > 30.0);
    }

    #[test]
    fn insert_rejects_bad_data() {
        let goal = wide_goal();
        let cost = goal_stage_cost(&params(), &goal);
        let inv = tiny_invariant();
        let cons = loose_constraints();
        let validation = InsertValidation { invariant: &inv, constraints: &cons };
        let store = SafeSetStore::new(goal);

        // Never settles.
        let mut short = seed_bundle(params().start_state(), 0);
        short.nominal_states.truncate(8);
        short.nominal_inputs.truncate(7);
        short.true_states.truncate(8);
        short.true_inputs.truncate(7);
        let err = insert_iteration(&store, &short, &model(), &cost, &validation).unwrap_err();
        assert!(matches!(err, SafeSetError::SpecViolation(_)), "{err}");

        // Dynamics residual: shift one nominal (and realized) state.
        let mut broken = seed_bundle(params().start_state(), 0);
        broken.nominal_states[7][1] += 1e-6;
        broken.true_states[7][1] += 1e-6;
        let err = insert_iteration(&store, &broken, &model(), &cost, &validation).unwrap_err();
        assert!(format!("{err}").contains("residual"), "{err}");

        // Tube escape: realized state far from nominal.
        let mut escaped = seed_bundle(params().start_state(), 0);
        escaped.true_states[5][1] += 0.5;
        let err = insert_iteration(&store, &escaped, &model(), &cost, &validation).unwrap_err();
        assert!(format!("{err}").contains("tube"), "{err}");
    }

    #[test]
    fn barycentric_unit_and_midpoint_values() {
        let goal = wide_goal();
        let mut store = SafeSetStore::new(goal);
        let mk = |e: f64, c: f64| StoredWindow {
            window: straight_window(10.0, e, 2.0),
            next_output: DVector::from_row_slice(&[14.0, e]),
            cost_to_go: c,
            stage: 0.0,
            iteration: 0,
            time: 0,
            synthetic: false,
        };
        store.windows.push(mk(0.0, 10.0));
        store.windows.push(mk(2.0, 0.0));

        let at_a = barycentric_cost(&store, &straight_window(10.0, 0.0, 2.0)).unwrap();
        assert!((at_a.value - 10.0).abs() < 1e-7, "unit value {}", at_a.value);
        let at_b = barycentric_cost(&store, &straight_window(10.0, 2.0, 2.0)).unwrap();
        assert!(at_b.value.abs() < 1e-7);
        let mid = barycentric_cost(&store, &straight_window(10.0, 1.0, 2.0)).unwrap();
        assert!((mid.value - 5.0).abs() < 1e-6, "midpoint value {}", mid.value);
        assert!((mid.multipliers[0] - 0.5).abs() < 1e-6);

        // Off-hull query is rejected.
        let err = barycentric_cost(&store, &straight_window(-30.0, 0.0, 2.0)).unwrap_err();
        assert!(matches!(err, SafeSetError::Infeasible(_)));
    }

    #[test]
    fn barycentric_zero_on_goal_windows() {
        let (store, _) = seeded_store();
        // Deep anchor windows sit in the goal region with zero cost-to-go.
        let deep = store
            .windows
            .iter()
            .rev()
            .find(|w| w.synthetic && w.cost_to_go == 0.0)
            .expect("zero-cost anchor row");
        let bv = barycentric_cost(&store, &deep.window).unwrap();
        assert!(bv.value.abs() <= 1e-6, "goal window value {}", bv.value);
        // Early windows are far from the goal and strictly positive.
        let early = barycentric_cost(&store, &store.windows[0].window).unwrap();
        assert!(early.value > 1.0, "early value {}", early.value);
    }

    #[test]
    fn duplicate_insert_preserves_values() {
        let (store1, cost) = seeded_store();
        let inv = tiny_invariant();
        let cons = loose_constraints();
        let validation = InsertValidation { invariant: &inv, constraints: &cons };
        let bundle = seed_bundle(params().start_state(), 1);
        let store2 =
            insert_iteration(&store1, &bundle, &model(), &cost, &validation).expect("insert");
        assert!(store2.len() > store1.len());
        // Generator-set growth: the old rows are a prefix of the new store.
        for (a, b) in store1.windows.iter().zip(store2.windows.iter()) {
            assert_eq!(a.window.0, b.window.0);
            assert_eq!(a.cost_to_go, b.cost_to_go);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let support: Vec<usize> = (0..store1.len()).collect();
        for _ in 0..100 {
            let lam = dirichlet(&mut rng, &store1, &support);
            let query = blend_window(&store1, &lam).unwrap();
            let v1 = barycentric_cost(&store1, &query).unwrap().value;
            let v2 = barycentric_cost(&store2, &query).unwrap().value;
            assert!((v1 - v2).abs() <= 1e-6 * (1.0 + v1.abs()), "value changed {v1} -> {v2}");
        }
    }

    #[test]
    fn control_invariance_of_sampled_hull_points() {
        let (store, _) = seeded_store();
        let m = model();
        let cons = loose_constraints();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let recorded = store.recorded_indices();
        for _ in 0..200 {
            let lam = dirichlet(&mut rng, &store, &recorded);
            let window = blend_window(&store, &lam).unwrap();
            let next = successor_output(&store, &lam).unwrap();
            let shifted = window.forward_shift(&next).unwrap();
            assert!(
                store.hull_contains(&shifted, HULL_TOL).unwrap(),
                "shifted window left the hull"
            );
            let lifted = lifted_from(&window, &next);
            let u = m.reconstruct_input(&lifted).unwrap();
            assert!(
                cons.u_bar.contains(&u, 1e-9),
                "blended input {u} outside the tightened box"
            );
            let x = m.reconstruct_state(&window).unwrap();
            let x_next = m.reconstruct_state(&shifted).unwrap();
            assert!(
                (m.step(&x, &u) - x_next).amax() <= 1e-6,
                "successor inconsistent with the dynamics"
            );
        }
    }

    #[test]
    fn barycentric_value_decreases_along_successors() {
        let (store, cost) = seeded_store();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let recorded = store.recorded_indices();
        for _ in 0..100 {
            let lam = dirichlet(&mut rng, &store, &recorded);
            let window = blend_window(&store, &lam).unwrap();
            let bv = barycentric_cost(&store, &window).unwrap();
            let next = successor_output(&store, &bv.multipliers).unwrap();
            let shifted = window.forward_shift(&next).unwrap();
            let v_next = barycentric_cost(&store, &shifted).unwrap().value;
            let c = cost.eval(&lifted_from(&window, &next));
            assert!(
                v_next - bv.value <= -c + 1e-6,
                "no decrease: {} -> {v_next} with stage {c}",
                bv.value
            );
        }
    }

    #[test]
    fn barycentric_positive_off_goal_zero_on_goal() {
        let (store, _) = seeded_store();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let goal_rows: Vec<usize> =
            (0..store.len()).filter(|&i| store.windows[i].cost_to_go <= 1e-9).collect();
        assert!(!goal_rows.is_empty());
        for _ in 0..50 {
            let lam = dirichlet(&mut rng, &store, &goal_rows);
            let window = blend_window(&store, &lam).unwrap();
            let v = barycentric_cost(&store, &window).unwrap().value;
            assert!(v.abs() <= 1e-6, "goal-region value {v}");
        }
        // Transit windows carry strictly positive value.
        let transit: Vec<usize> =
            (0..store.len()).filter(|&i| store.windows[i].cost_to_go > 1.0).collect();
        for _ in 0..50 {
            let lam = dirichlet(&mut rng, &store, &transit);
            let window = blend_window(&store, &lam).unwrap();
            let v = barycentric_cost(&store, &window).unwrap().value;
            assert!(v > 1e-3, "transit value {v}");
        }
    }

    #[test]
    fn terminal_membership_checks_state_and_hull() {
        let (store, _) = seeded_store();
        let m = model();
        let row = &store.windows[3];
        let x = m.reconstruct_state(&row.window).unwrap();
        assert!(terminal_membership(&store, &x, &row.window, &m).unwrap());
        let mut x_off = x.clone();
        x_off[1] += 1e-3;
        assert!(!terminal_membership(&store, &x_off, &row.window, &m).unwrap());
        let outside = straight_window(-30.0, 0.0, 2.0);
        let x_out = m.reconstruct_state(&outside).unwrap();
        assert!(!terminal_membership(&store, &x_out, &outside, &m).unwrap());
    }

    #[test]
    fn prune_preserves_barycentric_values() {
        let (store, _) = seeded_store();
        let pruned = prune(&store).expect("prune");
        assert!(pruned.len() <= store.len());
        assert!(!pruned.is_empty());
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let support: Vec<usize> = (0..store.len()).collect();
        for _ in 0..50 {
            let lam = dirichlet(&mut rng, &store, &support);
            let query = blend_window(&store, &lam).unwrap();
            let v_full = barycentric_cost(&store, &query).unwrap().value;
            let v_pruned = barycentric_cost(&pruned, &query).unwrap().value;
            assert!((v_full - v_pruned).abs() <= 1e-6, "pruning changed {v_full} -> {v_pruned}");
        }
    }

    #[test]
    fn goal_margin_validation() {
        let goal = wide_goal();
        let tiny = AxisBox::symmetric(&DVector::from_row_slice(&[1e-13, 1e-13, 1e-13]));
        // Degenerate goal spec has no margin for a real error box.
        assert!(goal.check_margin(&tiny).is_ok());
        let fat = AxisBox::symmetric(&DVector::from_row_slice(&[0.5, 0.5, 0.1]));
        assert!(goal.check_margin(&fat).is_err());
    }

    #[test]
    fn store_round_trips_through_json() {
        let (store, _) = seeded_store();
        let text = serde_json::to_string(&store).expect("serialize");
        let back: SafeSetStore = serde_json::from_str(&text).expect("deserialize");
        assert_eq!(store.len(), back.len());
        for (a, b) in store.windows.iter().zip(back.windows.iter()) {
            assert_eq!(a.window.0, b.window.0);
            assert_eq!(a.next_output, b.next_output);
            assert_eq!(a.cost_to_go, b.cost_to_go);
            assert_eq!(a.synthetic, b.synthetic);
        }
    }
}
