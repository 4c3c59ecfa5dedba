//! Receding-horizon robust controller over lifted outputs and the iteration
//! driver that alternates closed-loop data collection with set refinement.
//!
//! Difference flatness makes every planned output sequence exactly consistent
//! with the nominal dynamics, so the MPC needs no dynamics equality
//! constraints at all: the decision variables are the planned outputs, a
//! multiplier vector embedding the Barycentric terminal cost, and epigraph
//! slacks for the stage-cost hinge terms.  The whole per-step problem is a
//! small LP/SOCP solved by the conic layer — no sequential linearization.
//!
//! Constraints on planned windows are expressed through the componentwise
//! bounding functions of the flat maps: requiring a window's bounding
//! interval to stay inside the tightened boxes is convex (linear and
//! second-order-cone rows) and implies the reconstructed state and input lie
//! in those boxes.  Because lower bounding components are quasiconcave and
//! upper ones quasiconvex, convex combinations of stored windows satisfy the
//! same interval conditions automatically, which is what makes the convex
//! safe set a valid terminal set.
//!
//! The first planned window is pinned to the current nominal state by affine
//! rows (for position-type outputs the heading equality becomes a linear
//! "ray" once the anchor state is fixed), so successive solves hand off the
//! nominal trajectory exactly and the recorded nominal sequence satisfies the
//! model dynamics to floating-point precision.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error_invariant::{
    combined_disturbance, compute_rpi, linearize_and_gain, tube_remainder_box, ErrorInvariantError,
    ErrorPolicy, InvariantSet,
};
use crate::flat_system::{FlatError, LiftedOutput, OutputWindow, SystemModel};
use crate::geometry::{box_pontryagin_diff, AxisBox, GeometryError};
use crate::safe_set::{
    box_distance, insert_iteration, lifted_from, prune, GoalSpec, InsertValidation, SafeSetError,
    SafeSetStore, StageCost, TrajectoryBundle, SETTLE_DIST, SETTLE_STEPS,
};
use crate::solver::{self, Cone, ConicProblem, SolveError, SolveStatus};
use crate::tightening::{
    detect_informative_bounds, solve_tightening, TightenedConstraints, TighteningError,
};
use crate::uncertainty::{
    build_support_sdp, estimate_constants, lipschitz_qc, SupportEstimate, TransitionDatum,
    UncertaintyError,
};

/// Default planning horizon.
pub const DEFAULT_HORIZON: usize = 10;
/// Default cap on closed-loop steps per iteration.
pub const DEFAULT_STEP_CAP: usize = 400;
/// Minimum forward gap of the terminal window, keeping the flat maps defined
/// on it (mixtures over the stored hull can otherwise collapse to rest).
pub const TERMINAL_GAP_FLOOR: f64 = 1e-5;
/// Tolerance for the runtime tube-containment check.
pub const TUBE_TOL: f64 = 1e-6;
/// Tolerance for post-solve feasibility checks of a returned plan.
pub const POST_TOL: f64 = 1e-5;
/// Maximum dynamic-consistency residual of a returned plan.
pub const PLAN_RESIDUAL_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LmpcError {
    #[error("assumption {0} violated: {1}")]
    AssumptionViolated(u8, String),
    #[error("MPC problem infeasible: {0}")]
    Infeasible(String),
    #[error("MPC infeasible at iteration {iteration}, step {time}: {detail}")]
    InfeasibleMpc { iteration: usize, time: usize, detail: String },
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("step cap {0} exceeded before settling in the goal region")]
    StepCapExceeded(usize),
    #[error("error-tube synthesis diverged: {0}")]
    TubeDiverged(String),
    #[error("runtime certificate violated: {0}")]
    Certification(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Flat(#[from] FlatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    SafeSet(#[from] SafeSetError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    ErrorInvariant(#[from] ErrorInvariantError),
    #[error(transparent)]
    Tightening(#[from] TighteningError),
    #[error(transparent)]
    Solver(#[from] SolveError),
}

/// One affine-or-conic row over a pair of consecutive planned outputs
/// `(y_a, y_b)`.
///
/// As a hard constraint a row requires `value(y_a, y_b) <= 0`; as a stage-cost
/// hinge it contributes `max(0, value)` to the objective, where
///
/// * `Lin`:  `value = ca·y_a + cb·y_b + c0`
/// * `Cone`: `value = ‖Ga·y_a + Gb·y_b + g‖ − (ca·y_a + cb·y_b + c0)`
#[derive(Clone)]
pub enum PlanRow {
    Lin { ca: DVector<f64>, cb: DVector<f64>, c0: f64 },
    Cone {
        ga: DMatrix<f64>,
        gb: DMatrix<f64>,
        g: DVector<f64>,
        ca: DVector<f64>,
        cb: DVector<f64>,
        c0: f64,
    },
}

impl PlanRow {
    /// Row value on a concrete output pair.
    pub fn value(&self, ya: &DVector<f64>, yb: &DVector<f64>) -> f64 {
        match self {
            PlanRow::Lin { ca, cb, c0 } => ca.dot(ya) + cb.dot(yb) + c0,
            PlanRow::Cone { ga, gb, g, ca, cb, c0 } => {
                let v = ga * ya + gb * yb + g;
                v.norm() - (ca.dot(ya) + cb.dot(yb) + c0)
            }
        }
    }

    fn depends_on_b(&self) -> bool {
        match self {
            PlanRow::Lin { cb, .. } => cb.iter().any(|v| *v != 0.0),
            PlanRow::Cone { gb, cb, .. } => {
                gb.iter().any(|v| *v != 0.0) || cb.iter().any(|v| *v != 0.0)
            }
        }
    }
}

/// Affine description of the first planning step for a fixed nominal anchor
/// state: the first output is pinned outright and the second is restricted to
/// the affine set of outputs consistent with the anchor's reconstructed state
/// (for the position-output systems here, a ray in the heading direction).
pub struct FirstStepAnchor {
    /// The fixed first planned output `y_0 = h(x̄)`.
    pub first_output: DVector<f64>,
    /// Equality rows (`value = 0`) over `(y_0, y_1)`.
    pub equalities: Vec<PlanRow>,
    /// Exact re-projection of a solved `y_1` onto the equality set, removing
    /// solver-tolerance drift so the plan reconstructs the anchor exactly.
    pub project: Arc<dyn Fn(&mut DVector<f64>) + Send + Sync>,
}

/// Convex stage description for the planner, provided per model family.
///
/// `stage_rows` emits the hard rows confining one planned window's bounding
/// intervals to the tightened boxes; `hinge_rows` reproduce the stage cost
/// exactly as a sum of hinge terms (`StageCost::eval` of the same goal spec
/// must equal the summed positive parts on the window's output pair);
/// `terminal_rows` keep the terminal window inside the flat-map domain;
/// `anchor` builds the first-step pinning for a given nominal state.
pub struct PlanGeometry {
    pub stage_rows: Arc<dyn Fn(&TightenedConstraints) -> Vec<PlanRow> + Send + Sync>,
    pub hinge_rows: Vec<PlanRow>,
    pub terminal_rows: Vec<PlanRow>,
    pub anchor: Arc<dyn Fn(&DVector<f64>) -> Result<FirstStepAnchor, LmpcError> + Send + Sync>,
}

/// Task-level state/input limits and the goal region (on true states).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLimits {
    pub x_limits: AxisBox,
    pub u_limits: AxisBox,
    pub goal_box: AxisBox,
}

/// A model family bundled with its task limits and the builders for the
/// stage cost and planner geometry (both depend on the goal spec frozen at
/// the first iteration).
pub struct SystemTask {
    pub model: SystemModel,
    pub limits: TaskLimits,
    pub stage_cost: Arc<dyn Fn(&GoalSpec) -> StageCost + Send + Sync>,
    pub plan_geometry: Arc<dyn Fn(&GoalSpec) -> PlanGeometry + Send + Sync>,
}

/// Driver configuration.  Defaults are tuned for the bicycle demo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmpcConfig {
    /// Planning horizon `N` (must be at least the window length `R`).
    pub horizon: usize,
    /// Number of learning iterations to run (at least 1).
    pub max_iters: usize,
    /// Start state for every iteration.
    pub x_start: Vec<f64>,
    /// Nominal goal input box `(lb, ub)`: bounds characterizing goal motion;
    /// must admit zero forward step so the rest anchor has zero stage cost.
    pub u_nom: (Vec<f64>, Vec<f64>),
    /// Cap on closed-loop steps per iteration.
    pub step_cap: usize,
    /// Facet grid density for the tightening scaling program.
    pub grid_density: usize,
    /// Seed for all offline sampling (remainder bounds).
    pub sampling_seed: u64,
    /// Linearization reference for the error feedback synthesis.  Must be a
    /// point where the model is smooth; a reference at a curvature transition
    /// bakes a huge phantom coupling into the linear model and poisons the
    /// remainder bound everywhere else.
    pub lin_ref_x: Vec<f64>,
    pub lin_ref_u: Vec<f64>,
    /// LQR weight diagonals for the ancillary gain.
    pub q_lqr: Vec<f64>,
    pub r_lqr: Vec<f64>,
    /// Nominal operating corridor `(lb, ub)`: the region nominal plans are
    /// confined to (the tightening targets `envelope (+) error image` clipped
    /// to the task limits, so the nominal boxes never outgrow it) and the
    /// base domain the prediction remainder is sampled on.  Must sit inside
    /// the task limits with room for the error tube.
    pub envelope_x: (Vec<f64>, Vec<f64>),
    pub envelope_u: (Vec<f64>, Vec<f64>),
    /// Half-widths of the validity box for the sampled remainder bound: the
    /// bound covers error offsets inside this box, and the closed loop checks
    /// every realized error against it.
    pub error_box: Vec<f64>,
    /// Margin added around the hull of recorded transition points when
    /// building the region the support certificate must cover.  The quadratic
    /// constraint carries no useful information far from data (its radius
    /// grows linearly with distance), so the certified region is the
    /// operational neighbourhood rather than the full task boxes.
    pub support_margin_x: Vec<f64>,
    pub support_margin_u: Vec<f64>,
    /// Sample count and inflation margin for the remainder bound.
    pub remainder_samples: usize,
    pub remainder_margin: f64,
    /// Truncation cap for the invariant-set series.
    pub rpi_horizon_cap: usize,
    /// Re-link stored costs-to-go across iterations after each insert.
    pub relink_stored_costs: bool,
    /// Prune redundant safe-set generators after each insert.
    pub prune_store: bool,
}

impl Default for LmpcConfig {
    fn default() -> Self {
        let frac_pi_2 = std::f64::consts::FRAC_PI_2;
        Self {
            horizon: DEFAULT_HORIZON,
            max_iters: 5,
            x_start: vec![0.0, 1.0, 0.0],
            u_nom: (vec![0.0, -frac_pi_2], vec![24.0, frac_pi_2]),
            step_cap: DEFAULT_STEP_CAP,
            grid_density: 3,
            sampling_seed: 2024,
            lin_ref_x: vec![200.0f64.sqrt(), 0.0, 0.0],
            lin_ref_u: vec![10.0, 0.0],
            q_lqr: vec![0.2, 0.05, 0.3],
            r_lqr: vec![3.0, 20.0],
            envelope_x: (vec![-2.0, -4.0, -0.30], vec![60.0, 4.0, 0.30]),
            envelope_u: (vec![0.5, -0.55], vec![15.0, 0.55]),
            error_guess: vec![0.15, 0.30, 0.15],
            base_spread_x: vec![2.0, 0.5, 0.10],
            base_spread_u: vec![1.5, 0.08],
            support_margin_x: vec![4.0, 1.5, 0.4],
            support_margin_u: vec![5.0, 0.4],
            remainder_samples: 20_000,
            remainder_margin: 1.10,
            remainder_rounds: 4,
            rpi_horizon_cap: 50,
            relink_stored_costs: false,
            prune_store: true,
        }
    }
}

impl LmpcConfig {
    pub fn validate(&self, model: &SystemModel) -> Result<(), LmpcError> {
        if self.horizon < model.r {
            return Err(LmpcError::Config(format!(
                "horizon {} shorter than the window length {}",
                self.horizon, model.r
            )));
        }
        if self.max_iters == 0 {
            return Err(LmpcError::Config("max_iters must be at least 1".into()));
        }
        if self.x_start.len() != model.n {
            return Err(LmpcError::Config(format!(
                "x_start has {} entries for state dimension {}",
                self.x_start.len(),
                model.n
            )));
        }
        let dims = [
            (self.lin_ref_x.len(), model.n, "lin_ref_x"),
            (self.lin_ref_u.len(), model.m_in, "lin_ref_u"),
            (self.q_lqr.len(), model.n, "q_lqr"),
            (self.r_lqr.len(), model.m_in, "r_lqr"),
            (self.error_guess.len(), model.n, "error_guess"),
            (self.base_spread_x.len(), model.n, "base_spread_x"),
            (self.base_spread_u.len(), model.m_in, "base_spread_u"),
            (self.support_margin_x.len(), model.n, "support_margin_x"),
            (self.support_margin_u.len(), model.m_in, "support_margin_u"),
            (self.envelope_x.0.len(), model.n, "envelope_x lb"),
            (self.envelope_x.1.len(), model.n, "envelope_x ub"),
            (self.envelope_u.0.len(), model.m_in, "envelope_u lb"),
            (self.envelope_u.1.len(), model.m_in, "envelope_u ub"),
            (self.u_nom.0.len(), model.m_in, "u_nom lb"),
            (self.u_nom.1.len(), model.m_in, "u_nom ub"),
        ];
        for (got, want, name) in dims {
            if got != want {
                return Err(LmpcError::Config(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.remainder_samples == 0 || self.remainder_rounds == 0 {
            return Err(LmpcError::Config("remainder sampling needs positive counts".into()));
        }
        if self.remainder_margin < 1.0 {
            return Err(LmpcError::Config("remainder margin must be at least 1".into()));
        }
        Ok(())
    }

    fn envelope_boxes(&self) -> Result<(AxisBox, AxisBox), LmpcError> {
        Ok((
            AxisBox::from_slices(&self.envelope_x.0, &self.envelope_x.1)?,
            AxisBox::from_slices(&self.envelope_u.0, &self.envelope_u.1)?,
        ))
    }

    fn u_nom_box(&self) -> Result<AxisBox, LmpcError> {
        Ok(AxisBox::from_slices(&self.u_nom.0, &self.u_nom.1)?)
    }

    fn start_state(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x_start)
    }
}

/// Solution of one receding-horizon problem.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Planned outputs `y_0 .. y_{N+1}` (for window length 2).
    pub outputs: Vec<DVector<f64>>,
    /// Planned windows `w_0 .. w_N`.
    pub windows: Vec<OutputWindow>,
    /// Reconstructed nominal states `x̄_0 .. x̄_N`.
    pub nominal_states: Vec<DVector<f64>>,
    /// Reconstructed nominal inputs `ū_0 .. ū_{N-1}`.
    pub nominal_inputs: Vec<DVector<f64>>,
    /// Stage costs of the planned stages.
    pub stage_costs: Vec<f64>,
    /// Terminal window (last planned window, an exact stored-hull mixture).
    pub terminal_window: OutputWindow,
    /// Barycentric multipliers over the full store.
    pub terminal_multipliers: DVector<f64>,
    /// Interpolated terminal cost.
    pub terminal_value: f64,
    /// Total objective: terminal value plus summed stage costs.
    pub objective: f64,
    /// Wall time of the solve, milliseconds.
    pub solve_millis: f64,
}

/// Closed-loop record of one iteration.
///
/// For learned iterations (`iteration >= 1`) the true and nominal sequences
/// are tube-paired stepwise.  The seed record (`iteration == 0`) instead
/// holds two independent rollouts of the seed controller: an undisturbed one
/// (the nominal data the safe set is seeded from) and a disturbed one (the
/// transition data the first support estimate is built from); no tube pairing
/// is implied between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub true_states: Vec<DVector<f64>>,
    pub true_inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub nominal_states: Vec<DVector<f64>>,
    pub nominal_inputs: Vec<DVector<f64>>,
    /// Executed first windows of each solve (nominal output windows).
    pub windows: Vec<OutputWindow>,
    /// Optimal objective of each solve.
    pub step_objectives: Vec<f64>,
    /// Wall time of each solve, milliseconds.
    pub solve_millis: Vec<f64>,
    /// Iteration index of the support estimate in force.
    pub support_iteration: usize,
    /// Iteration index of the tightened constraints in force.
    pub tightened_iteration: usize,
}

/// Everything produced by a full run of the algorithm.
pub struct AlgorithmRun {
    /// Per-iteration closed-loop records, the seed at index 0.
    pub iterations: Vec<IterationRecord>,
    /// Per-iteration support estimates (index 0 is iteration 1).
    pub supports: Vec<SupportEstimate>,
    /// Per-iteration error invariant sets.
    pub invariants: Vec<InvariantSet>,
    /// Per-iteration tightened constraints.
    pub tightenings: Vec<TightenedConstraints>,
    /// Per-iteration prediction-remainder bounds.
    pub remainders: Vec<AxisBox>,
    /// Per-iteration structure-constant estimates `(L, gamma)`.
    pub constants: Vec<(f64, f64)>,
    /// Final safe set.
    pub store: SafeSetStore,
    pub goal: GoalSpec,
    pub policy: ErrorPolicy,
    /// Linearization used for the error dynamics.
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Recorded cost-to-go at time zero per iteration (seed first).
    pub initial_costs: Vec<f64>,
}

/// Tube policy: nominal input plus error feedback.
pub fn apply_policy(
    policy: &ErrorPolicy,
    u_bar: &DVector<f64>,
    x: &DVector<f64>,
    x_bar: &DVector<f64>,
) -> DVector<f64> {
    u_bar + &policy.k * (x - x_bar)
}

/// Index layout of the conic variables for one solve.
struct VarLayout {
    m: usize,
    horizon: usize,
    lambda0: usize,
    sigma0: usize,
    n_sigma: usize,
}

impl VarLayout {
    fn y(&self, k: usize, comp: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon + 1);
        (k - 1) * self.m + comp
    }

    fn total(&self) -> usize {
        self.sigma0 + self.n_sigma
    }
}

/// Sparse row under assembly: variable coefficients plus the constant offset
/// entering `b` (conic convention `s = b − A x`).
#[derive(Default, Clone)]
struct RowBuf {
    coeffs: Vec<(usize, f64)>,
    b: f64,
}

struct Assembly {
    eq: Vec<RowBuf>,
    ineq: Vec<RowBuf>,
    soc: Vec<Vec<RowBuf>>,
}

impl Assembly {
    fn new() -> Self {
        Self { eq: Vec::new(), ineq: Vec::new(), soc: Vec::new() }
    }
}

/// Accumulate `coef · y_slot` into a row, folding constants for the fixed
/// first output.
fn add_output_term(
    row: &mut RowBuf,
    layout: &VarLayout,
    k: usize,
    coef: &DVector<f64>,
    y0: &DVector<f64>,
) {
    for c in 0..layout.m {
        if coef[c] == 0.0 {
            continue;
        }
        if k == 0 {
            // Fixed output: the term is constant. `s = b − Ax` with the row
            // meaning `expr <= 0` encoded as `Ax <= b`: constants move to b.
            row.b -= coef[c] * y0[c];
        } else {
            row.coeffs.push((layout.y(k, c), coef[c]));
        }
    }
}

/// Encode `value(y_a, y_b) <= 0` (or `= 0` into `eq`) for a `Lin` row, with
/// an optional epigraph slack subtracted.  Returns `None` when the row is
/// constant (both slots fixed), yielding its value instead.
#[allow(clippy::too_many_arguments)]
fn lin_row(
    layout: &VarLayout,
    ka: usize,
    kb: usize,
    ca: &DVector<f64>,
    cb: &DVector<f64>,
    c0: f64,
    sigma: Option<usize>,
    y0: &DVector<f64>,
) -> RowBuf {
    let mut row = RowBuf { coeffs: Vec::new(), b: -c0 };
    add_output_term(&mut row, layout, ka, ca, y0);
    add_output_term(&mut row, layout, kb, cb, y0);
    if let Some(s) = sigma {
        row.coeffs.push((s, -1.0));
    }
    row
}

/// Encode a `Cone` row as a second-order-cone block
/// `‖Ga y_a + Gb y_b + g‖ <= ca·y_a + cb·y_b + c0 (+ sigma)`.
#[allow(clippy::too_many_arguments)]
fn cone_block(
    layout: &VarLayout,
    ka: usize,
    kb: usize,
    ga: &DMatrix<f64>,
    gb: &DMatrix<f64>,
    g: &DVector<f64>,
    ca: &DVector<f64>,
    cb: &DVector<f64>,
    c0: f64,
    sigma: Option<usize>,
    y0: &DVector<f64>,
) -> Vec<RowBuf> {
    let q = g.len();
    let mut rows = Vec::with_capacity(q + 1);
    // Head row: slack = rhs.
    let mut head = RowBuf { coeffs: Vec::new(), b: c0 };
    for c in 0..layout.m {
        for (k, coef) in [(ka, ca[c]), (kb, cb[c])] {
            if coef == 0.0 {
                continue;
            }
            if k == 0 {
                head.b += coef * y0[c];
            } else {
                head.coeffs.push((layout.y(k, c), -coef));
            }
        }
    }
    if let Some(s) = sigma {
        head.coeffs.push((s, -1.0));
    }
    rows.push(head);
    // Tail rows: slack_i = (Ga y_a + Gb y_b + g)_i.
    for i in 0..q {
        let mut r = RowBuf { coeffs: Vec::new(), b: g[i] };
        for c in 0..layout.m {
            for (k, coef) in [(ka, ga[(i, c)]), (kb, gb[(i, c)])] {
                if coef == 0.0 {
                    continue;
                }
                if k == 0 {
                    r.b += coef * y0[c];
                } else {
                    r.coeffs.push((layout.y(k, c), -coef));
                }
            }
        }
        rows.push(r);
    }
    rows
}

/// Deduplicated safe-set generators: representative store index, stacked
/// window vector and cheapest cost-to-go per distinct window.
fn dedup_generators(store: &SafeSetStore) -> Vec<(usize, DVector<f64>, f64)> {
    let mut reps: Vec<(usize, DVector<f64>, f64)> = Vec::new();
    for (idx, w) in store.windows.iter().enumerate() {
        let wv = w.window_vector();
        let scale = 1e-12 * (1.0 + wv.amax());
        match reps.iter_mut().find(|(_, rv, _)| (rv as &DVector<f64> - &wv).amax() <= scale) {
            Some(rep) => {
                if w.cost_to_go < rep.2 {
                    rep.0 = idx;
                    rep.2 = w.cost_to_go;
                }
            }
            None => reps.push((idx, wv, w.cost_to_go)),
        }
    }
    reps
}

/// Solve one receding-horizon problem from the nominal anchor `x_bar_init`
/// with the measured state `x_t` (used only to check the tube precondition).
///
/// The program plans `horizon` stages of output windows subject to the
/// tightened bounding-interval rows, pins the first window to the anchor,
/// constrains the terminal window to the convex hull of stored windows via
/// embedded Barycentric multipliers, and minimizes the summed stage-cost
/// hinges plus the interpolated terminal cost.  The returned plan is cleaned
/// (multipliers renormalized, terminal window set to the exact mixture, first
/// step re-projected), re-evaluated exactly, and checked against the boxes.
#[allow(clippy::too_many_arguments)]
pub fn solve_mpc(
    model: &SystemModel,
    geometry: &PlanGeometry,
    cost: &StageCost,
    x_t: &DVector<f64>,
    x_bar_init: &DVector<f64>,
    store: &SafeSetStore,
    tight: &TightenedConstraints,
    invariant: &InvariantSet,
    horizon: usize,
) -> Result<MpcSolution, LmpcError> {
    let started = Instant::now();
    if model.r != 2 {
        return Err(LmpcError::Config(format!(
            "planner assembly implemented for window length 2, model has {}",
            model.r
        )));
    }
    if horizon < model.r {
        return Err(LmpcError::Config(format!("horizon {} below window length", horizon)));
    }
    if store.is_empty() {
        return Err(LmpcError::Precondition("empty safe set".into()));
    }
    let err0 = x_t - x_bar_init;
    if !invariant.contains(&err0, TUBE_TOL) {
        return Err(LmpcError::Precondition(format!(
            "measured state is outside the error tube around the nominal anchor (error {err0:?})"
        )));
    }

    let anchor = (geometry.anchor)(x_bar_init)?;
    let y0 = anchor.first_output.clone();
    let stage_rows = (geometry.stage_rows)(tight);
    let reps = dedup_generators(store);
    let kreps = reps.len();
    let n = horizon;
    let m = model.m_out;

    let mut layout = VarLayout { m, horizon: n, lambda0: (n + 1) * m, sigma0: 0, n_sigma: 0 };
    layout.sigma0 = layout.lambda0 + kreps;

    // Enumerate epigraph slacks: one per hinge row per stage.  Rows that are
    // constant at stage 0 (touching only the fixed output) get no slack —
    // their contribution is a constant offset that cannot change the argmin,
    // and the reported objective is recomputed exactly from the stage cost
    // after the solve.
    let mut sigma_of: Vec<Vec<Option<usize>>> = vec![vec![None; geometry.hinge_rows.len()]; n];
    let mut next_sigma = layout.sigma0;
    for (h, row) in geometry.hinge_rows.iter().enumerate() {
        // Stage 0 binds (y_0 fixed, y_1 variable).
        if row.depends_on_b() {
            sigma_of[0][h] = Some(next_sigma);
            next_sigma += 1;
        }
    }
    for stage in 1..n {
        for h in 0..geometry.hinge_rows.len() {
            sigma_of[stage][h] = Some(next_sigma);
            next_sigma += 1;
        }
    }
    layout.n_sigma = next_sigma - layout.sigma0;
    let nv = layout.total();

    let mut asm = Assembly::new();

    // First-step equalities.
    for row in &anchor.equalities {
        match row {
            PlanRow::Lin { ca, cb, c0 } => {
                asm.eq.push(lin_row(&layout, 0, 1, ca, cb, *c0, None, &y0));
            }
            PlanRow::Cone { .. } => {
                return Err(LmpcError::Config("conic first-step equalities unsupported".into()))
            }
        }
    }

    // Terminal hull: stacked terminal window equals the generator mixture.
    for d in 0..2 * m {
        let mut row = RowBuf { coeffs: Vec::new(), b: 0.0 };
        let (k, comp) = if d < m { (n, d) } else { (n + 1, d - m) };
        row.coeffs.push((layout.y(k, comp), 1.0));
        for (j, (_, wv, _)) in reps.iter().enumerate() {
            row.coeffs.push((layout.lambda0 + j, -wv[d]));
        }
        asm.eq.push(row);
    }
    // Multiplier simplex.
    {
        let mut row = RowBuf { coeffs: Vec::new(), b: 1.0 };
        for j in 0..kreps {
            row.coeffs.push((layout.lambda0 + j, 1.0));
        }
        asm.eq.push(row);
    }
    for j in 0..kreps {
        asm.ineq.push(RowBuf { coeffs: vec![(layout.lambda0 + j, -1.0)], b: 0.0 });
    }
    for s in 0..layout.n_sigma {
        asm.ineq.push(RowBuf { coeffs: vec![(layout.sigma0 + s, -1.0)], b: 0.0 });
    }

    // Stage hard rows and hinge rows over windows w_0 .. w_{N-1}.
    for stage in 0..n {
        let (ka, kb) = (stage, stage + 1);
        for row in &stage_rows {
            match row {
                PlanRow::Lin { ca, cb, c0 } => {
                    let r = lin_row(&layout, ka, kb, ca, cb, *c0, None, &y0);
                    if r.coeffs.is_empty() {
                        // Fully folded (stage 0 rows on the fixed output).
                        if -r.b > POST_TOL {
                            return Err(LmpcError::Infeasible(format!(
                                "fixed first output violates a stage row by {:.3e}",
                                -r.b
                            )));
                        }
                    } else {
                        asm.ineq.push(r);
                    }
                }
                PlanRow::Cone { ga, gb, g, ca, cb, c0 } => {
                    asm.soc.push(cone_block(&layout, ka, kb, ga, gb, g, ca, cb, *c0, None, &y0));
                }
            }
        }
        for (h, row) in geometry.hinge_rows.iter().enumerate() {
            let Some(sig) = sigma_of[stage][h] else { continue };
            match row {
                PlanRow::Lin { ca, cb, c0 } => {
                    asm.ineq.push(lin_row(&layout, ka, kb, ca, cb, *c0, Some(sig), &y0));
                }
                PlanRow::Cone { ga, gb, g, ca, cb, c0 } => {
                    asm.soc.push(cone_block(
                        &layout,
                        ka,
                        kb,
                        ga,
                        gb,
                        g,
                        ca,
                        cb,
                        *c0,
                        Some(sig),
                        &y0,
                    ));
                }
            }
        }
    }

    // Terminal-window rows (flat-map domain protection).
    for row in &geometry.terminal_rows {
        match row {
            PlanRow::Lin { ca, cb, c0 } => {
                asm.ineq.push(lin_row(&layout, n, n + 1, ca, cb, *c0, None, &y0));
            }
            PlanRow::Cone { ga, gb, g, ca, cb, c0 } => {
                asm.soc.push(cone_block(&layout, n, n + 1, ga, gb, g, ca, cb, *c0, None, &y0));
            }
        }
    }

    // Assemble the conic problem: zero cone, nonnegative cone, SOC blocks.
    let n_eq = asm.eq.len();
    let n_ineq = asm.ineq.len();
    let soc_rows: usize = asm.soc.iter().map(Vec::len).sum();
    let total_rows = n_eq + n_ineq + soc_rows;
    let mut a = DMatrix::zeros(total_rows, nv);
    let mut b = DVector::zeros(total_rows);
    let mut cones = Vec::new();
    let mut r = 0;
    for row in asm.eq.iter().chain(asm.ineq.iter()).chain(asm.soc.iter().flatten()) {
        for (c, v) in &row.coeffs {
            a[(r, *c)] += *v;
        }
        b[r] = row.b;
        r += 1;
    }
    cones.push(Cone::Zero(n_eq));
    if n_ineq > 0 {
        cones.push(Cone::Nonneg(n_ineq));
    }
    for block in &asm.soc {
        cones.push(Cone::Soc(block.len()));
    }

    let mut q = DVector::zeros(nv);
    for (j, (_, _, c)) in reps.iter().enumerate() {
        q[layout.lambda0 + j] = *c;
    }
    for s in 0..layout.n_sigma {
        q[layout.sigma0 + s] = 1.0;
    }

    let problem = ConicProblem { p: None, q, a, b, cones };
    let sol = solver::solve_conic(&problem)?;
    match sol.status {
        SolveStatus::PrimalInfeasible => {
            return Err(LmpcError::Infeasible(
                "no output plan satisfies the tightened rows with a stored terminal window".into(),
            ))
        }
        s if !s.is_ok() => {
            return Err(LmpcError::SolverFailure(format!("conic status {s:?}")));
        }
        _ => {}
    }

    // Clean multipliers and rebuild the plan from them exactly.
    let mut lam = DVector::zeros(kreps);
    for j in 0..kreps {
        lam[j] = sol.x[layout.lambda0 + j].max(0.0);
    }
    let mass = lam.sum();
    if (mass - 1.0).abs() > 1e-4 {
        return Err(LmpcError::SolverFailure(format!("multiplier mass {mass:.6} far from one")));
    }
    lam /= mass;

    let mut outputs: Vec<DVector<f64>> = Vec::with_capacity(n + 2);
    outputs.push(y0.clone());
    for k in 1..=n + 1 {
        outputs.push(DVector::from_fn(m, |c, _| sol.x[layout.y(k, c)]));
    }
    (anchor.project)(&mut outputs[1]);
    let mut blend = DVector::zeros(2 * m);
    for (j, (_, wv, _)) in reps.iter().enumerate() {
        if lam[j] != 0.0 {
            blend += lam[j] * wv;
        }
    }
    for c in 0..m {
        outputs[n][c] = blend[c];
        outputs[n + 1][c] = blend[m + c];
    }

    let windows: Vec<OutputWindow> = (0..=n)
        .map(|k| OutputWindow::from_outputs(&[outputs[k].clone(), outputs[k + 1].clone()]))
        .collect::<Result<_, _>>()?;
    let lifteds: Vec<LiftedOutput> = (0..n)
        .map(|k| lifted_from(&windows[k], &outputs[k + 2]))
        .collect();
    let nominal_states: Vec<DVector<f64>> = windows
        .iter()
        .map(|w| model.reconstruct_state(w))
        .collect::<Result<_, _>>()
        .map_err(|e| LmpcError::SolverFailure(format!("plan left the flat-map domain: {e}")))?;
    let nominal_inputs: Vec<DVector<f64>> = lifteds
        .iter()
        .map(|l| model.reconstruct_input(l))
        .collect::<Result<_, _>>()
        .map_err(|e| LmpcError::SolverFailure(format!("plan left the flat-map domain: {e}")))?;
    let stage_costs: Vec<f64> = lifteds.iter().map(|l| cost.eval(l)).collect();

    // Exact objective and multipliers over the full store.
    let mut terminal_multipliers = DVector::zeros(store.len());
    let mut terminal_value = 0.0;
    for (j, (idx, _, c)) in reps.iter().enumerate() {
        terminal_multipliers[*idx] += lam[j];
        terminal_value += lam[j] * c;
    }
    let objective: f64 = stage_costs.iter().sum::<f64>() + terminal_value;

    // Post-solve certificates.
    let anchor_err = (&nominal_states[0] - x_bar_init).amax();
    if anchor_err > PLAN_RESIDUAL_TOL {
        return Err(LmpcError::SolverFailure(format!(
            "first planned window reconstructs the anchor only to {anchor_err:.3e}"
        )));
    }
    for k in 0..n {
        let pred = model.step(&nominal_states[k], &nominal_inputs[k]);
        let res = (&pred - &nominal_states[k + 1]).amax();
        if res > PLAN_RESIDUAL_TOL {
            return Err(LmpcError::SolverFailure(format!(
                "plan dynamic-consistency residual {res:.3e} at stage {k}"
            )));
        }
    }
    for (k, x) in nominal_states.iter().enumerate() {
        if !tight.x_bar.contains(x, POST_TOL) {
            return Err(LmpcError::SolverFailure(format!(
                "planned nominal state {k} leaves the tightened state box"
            )));
        }
    }
    for (k, u) in nominal_inputs.iter().enumerate() {
        if !tight.u_bar.contains(u, POST_TOL) {
            return Err(LmpcError::SolverFailure(format!(
                "planned nominal input {k} leaves the tightened input box"
            )));
        }
    }
    let info = detect_informative_bounds(model);
    for l in &lifteds {
        let (lo, hi) = model.bounding_eval(l)?;
        for i in 0..model.n {
            if !info.lower[i] && !info.upper[i] {
                continue;
            }
            if lo[i] < tight.x_bar.lb[i] - POST_TOL || hi[i] > tight.x_bar.ub[i] + POST_TOL {
                return Err(LmpcError::SolverFailure(format!(
                    "stage bounding interval leaves the state box in component {i}"
                )));
            }
        }
        for i in 0..model.m_in {
            if !info.lower[model.n + i] && !info.upper[model.n + i] {
                continue;
            }
            if lo[model.n + i] < tight.u_bar.lb[i] - POST_TOL
                || hi[model.n + i] > tight.u_bar.ub[i] + POST_TOL
            {
                return Err(LmpcError::SolverFailure(format!(
                    "stage bounding interval leaves the input box in component {i}"
                )));
            }
        }
    }

    let terminal_window = windows[n].clone();
    Ok(MpcSolution {
        outputs,
        windows,
        nominal_states,
        nominal_inputs,
        stage_costs,
        terminal_window,
        terminal_multipliers,
        terminal_value,
        objective,
        solve_millis: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Trailing streak of states within the settle distance of the goal box.
fn settled(states: &[DVector<f64>], goal: &AxisBox) -> bool {
    states.len() >= SETTLE_STEPS
        && states
            .iter()
            .rev()
            .take(SETTLE_STEPS)
            .all(|x| box_distance(goal, x) < SETTLE_DIST)
}

/// Run one closed-loop iteration of the tube policy until the true state
/// settles in the goal region (a `SETTLE_STEPS`-long streak within
/// `SETTLE_DIST`), recording everything needed for storage and analysis.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration(
    task: &SystemTask,
    geometry: &PlanGeometry,
    cost: &StageCost,
    store: &SafeSetStore,
    tight: &TightenedConstraints,
    invariant: &InvariantSet,
    policy: &ErrorPolicy,
    cfg: &LmpcConfig,
    plant: &mut dyn FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    iteration: usize,
) -> Result<IterationRecord, LmpcError> {
    let model = &task.model;
    let x_start = cfg.start_state();
    let mut record = IterationRecord {
        iteration,
        true_states: vec![x_start.clone()],
        true_inputs: Vec::new(),
        disturbances: Vec::new(),
        nominal_states: vec![x_start.clone()],
        nominal_inputs: Vec::new(),
        windows: Vec::new(),
        step_objectives: Vec::new(),
        solve_millis: Vec::new(),
        support_iteration: iteration,
        tightened_iteration: tight.iteration,
    };
    let mut x = x_start.clone();
    let mut x_bar = x_start;
    loop {
        if settled(&record.true_states, &task.limits.goal_box) {
            return Ok(record);
        }
        let t = record.true_inputs.len();
        if t >= cfg.step_cap {
            return Err(LmpcError::StepCapExceeded(cfg.step_cap));
        }
        let sol = solve_mpc(model, geometry, cost, &x, &x_bar, store, tight, invariant, cfg.horizon)
            .map_err(|e| match e {
                LmpcError::Infeasible(detail) => {
                    LmpcError::InfeasibleMpc { iteration, time: t, detail }
                }
                other => other,
            })?;
        let u_bar = sol.nominal_inputs[0].clone();
        let u = apply_policy(policy, &u_bar, &x, &x_bar);
        if !task.limits.u_limits.contains(&u, 1e-9) {
            return Err(LmpcError::Certification(format!(
                "applied input leaves the input limits at step {t}"
            )));
        }
        let d = plant(&x, &u);
        let x_next = model.step(&x, &u) + &d;
        let x_bar_next = sol.nominal_states[1].clone();
        let err = &x_next - &x_bar_next;
        if !invariant.contains(&err, TUBE_TOL) {
            let miss = invariant.rpi_box.violation(&err);
            return Err(LmpcError::Certification(format!(
                "closed-loop error leaves the invariant tube at step {} (box excess {miss:.3e})",
                t + 1
            )));
        }
        if !task.limits.x_limits.contains(&x_next, 1e-9) {
            return Err(LmpcError::Certification(format!(
                "true state leaves the state limits at step {}",
                t + 1
            )));
        }
        record.true_inputs.push(u);
        record.disturbances.push(d);
        record.nominal_inputs.push(u_bar);
        record.windows.push(sol.windows[0].clone());
        record.step_objectives.push(sol.objective);
        record.solve_millis.push(sol.solve_millis);
        record.true_states.push(x_next.clone());
        record.nominal_states.push(x_bar_next.clone());
        x = x_next;
        x_bar = x_bar_next;
    }
}

/// Record the seed iteration: two rollouts of a given state-feedback
/// controller from the start state — an undisturbed one that must settle in
/// the goal region (the safe-set seed) and a disturbed one providing the
/// first transition data.  See [`IterationRecord`] for the pairing caveat.
pub fn record_seed(
    task: &SystemTask,
    controller: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    plant: &mut dyn FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    x_start: &DVector<f64>,
    step_cap: usize,
) -> Result<IterationRecord, LmpcError> {
    let model = &task.model;
    let goal = &task.limits.goal_box;
    let mut nominal_states = vec![x_start.clone()];
    let mut nominal_inputs = Vec::new();
    while !settled(&nominal_states, goal) {
        if nominal_inputs.len() >= step_cap {
            return Err(LmpcError::StepCapExceeded(step_cap));
        }
        let x = nominal_states.last().unwrap().clone();
        let u = controller(&x);
        nominal_states.push(model.step(&x, &u));
        nominal_inputs.push(u);
    }
    let mut true_states = vec![x_start.clone()];
    let mut true_inputs = Vec::new();
    let mut disturbances = Vec::new();
    while !settled(&true_states, goal) && true_inputs.len() < step_cap {
        let x = true_states.last().unwrap().clone();
        let u = controller(&x);
        let d = plant(&x, &u);
        true_states.push(model.step(&x, &u) + &d);
        disturbances.push(d);
        true_inputs.push(u);
    }
    let outputs: Vec<DVector<f64>> = nominal_states.iter().map(|x| model.output(x)).collect();
    let windows = (0..outputs.len().saturating_sub(1))
        .map(|t| OutputWindow::from_outputs(&[outputs[t].clone(), outputs[t + 1].clone()]))
        .collect::<Result<_, _>>()?;
    Ok(IterationRecord {
        iteration: 0,
        true_states,
        true_inputs,
        disturbances,
        nominal_states,
        nominal_inputs,
        windows,
        step_objectives: Vec::new(),
        solve_millis: Vec::new(),
        support_iteration: 0,
        tightened_iteration: 0,
    })
}

/// Transition data of a record's realized trajectory.
fn transitions_of(model: &SystemModel, rec: &IterationRecord) -> Vec<TransitionDatum> {
    (0..rec.true_inputs.len())
        .map(|t| {
            TransitionDatum::from_step(
                model,
                &rec.true_states[t],
                &rec.true_inputs[t],
                &rec.true_states[t + 1],
                rec.iteration,
                t,
            )
        })
        .collect()
}

fn box_inside(inner: &AxisBox, outer: &AxisBox, tol: f64) -> bool {
    (0..inner.dim()).all(|i| inner.lb[i] >= outer.lb[i] - tol && inner.ub[i] <= outer.ub[i] + tol)
}

fn box_hull(a: &AxisBox, b: &AxisBox) -> AxisBox {
    AxisBox {
        lb: DVector::from_fn(a.dim(), |i, _| a.lb[i].min(b.lb[i])),
        ub: DVector::from_fn(a.dim(), |i, _| a.ub[i].max(b.ub[i])),
    }
}

fn widen_about_center(b: &AxisBox, factor: f64) -> AxisBox {
    let c = b.center();
    let h = b.half_widths() * factor;
    AxisBox { lb: &c - &h, ub: &c + &h }
}

/// Check that `prev` is robust positively invariant for `e+ = A_cl e + d`,
/// `d` over the vertices of `d_poly`, via facet support functions.
fn still_invariant(
    prev: &InvariantSet,
    a_cl: &DMatrix<f64>,
    d_poly: &crate::geometry::VPolytope,
    tol: f64,
) -> Result<bool, LmpcError> {
    let mapped = prev.zonotope.linear_map(a_cl)?;
    for (dir, off) in &prev.facets {
        for sign in [1.0, -1.0] {
            let d = dir * sign;
            let bound = d.dot(&prev.zonotope.center) + off;
            let d_support =
                d_poly.vertices.iter().map(|v| d.dot(v)).fold(f64::NEG_INFINITY, f64::max);
            if mapped.support(&d) + d_support > bound + tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Synthesize the iteration's remainder bound and error invariant by a short
/// fixed point on the error box: the remainder is sampled over the current
/// box, the invariant recomputed, and the box grown until it covers the
/// certified set (so the sampled bound is valid on it).
#[allow(clippy::too_many_arguments)]
fn synthesize_tube(
    model: &SystemModel,
    policy: &ErrorPolicy,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bases: &[(DVector<f64>, DVector<f64>)],
    limits: &TaskLimits,
    cfg: &LmpcConfig,
    support: &SupportEstimate,
    e_box_init: &AxisBox,
) -> Result<(AxisBox, InvariantSet), LmpcError> {
    let spread_x = AxisBox::symmetric(&DVector::from_row_slice(&cfg.base_spread_x));
    let spread_u = AxisBox::symmetric(&DVector::from_row_slice(&cfg.base_spread_u));
    let mut e_box = e_box_init.clone();
    let mut last_gap = String::new();
    for _ in 0..cfg.remainder_rounds {
        let w = tube_remainder_box(
            model,
            &policy.k,
            a,
            b,
            bases,
            &spread_x,
            &spread_u,
            &limits.x_limits,
            &limits.u_limits,
            &e_box,
            cfg.remainder_samples,
            cfg.remainder_margin,
            cfg.sampling_seed,
        );
        let d_bar = combined_disturbance(&support.ellipsoid, &w)?;
        let inv = compute_rpi(a, b, &policy.k, &d_bar, cfg.rpi_horizon_cap)?;
        if box_inside(&inv.rpi_box, &e_box, 1e-12) {
            return Ok((w, inv));
        }
        last_gap = format!(
            "certified box {:?} exceeds the sampled error box {:?}",
            inv.rpi_box, e_box
        );
        e_box = widen_about_center(&box_hull(&e_box, &inv.rpi_box), 1.05);
    }
    Err(LmpcError::TubeDiverged(format!(
        "error box did not close within {} rounds: {last_gap}",
        cfg.remainder_rounds
    )))
}

/// Optionally re-link stored costs-to-go across iterations: a stored tuple
/// may adopt `stage + interpolated cost of its successor window` when that is
/// cheaper, connecting trajectories through the stored hull.  Each update is
/// justified by an executable continuation, so values remain valid upper
/// bounds.  Off by default.
fn relink_costs(store: &SafeSetStore) -> Result<SafeSetStore, LmpcError> {
    let mut out = store.clone();
    for _ in 0..2 {
        let snapshot = out.clone();
        for i in 0..out.windows.len() {
            let Ok(succ) = out.windows[i].successor_window() else { continue };
            let Ok(bv) = crate::safe_set::barycentric_cost(&snapshot, &succ) else { continue };
            let candidate = out.windows[i].stage + bv.value;
            if candidate < out.windows[i].cost_to_go - 1e-12 {
                out.windows[i].cost_to_go = candidate;
            }
        }
    }
    Ok(out)
}

/// Run the full algorithm: validate the seeding assumptions, then per
/// iteration estimate the disturbance support from all data, synthesize the
/// error tube, tighten the constraint boxes, run the closed loop, and insert
/// the recorded trajectory into the safe set.
pub fn run_algorithm(
    task: &SystemTask,
    cfg: &LmpcConfig,
    seed: &IterationRecord,
    plant: &mut dyn FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
) -> Result<AlgorithmRun, LmpcError> {
    let model = &task.model;
    cfg.validate(model)?;
    let limits = &task.limits;

    // Seeding assumption on the recorded behavior: the undisturbed rollout
    // settles in the goal region without leaving the limits.
    if seed.iteration != 0 {
        return Err(LmpcError::Config("seed record must carry iteration 0".into()));
    }
    if !settled(&seed.nominal_states, &limits.goal_box) {
        return Err(LmpcError::AssumptionViolated(
            5,
            "seed rollout does not settle in the goal region".into(),
        ));
    }
    for (t, x) in seed.nominal_states.iter().enumerate() {
        if !limits.x_limits.contains(x, 1e-9) {
            return Err(LmpcError::AssumptionViolated(
                5,
                format!("seed state leaves the limits at step {t}"),
            ));
        }
    }
    for (t, u) in seed.nominal_inputs.iter().enumerate() {
        if !limits.u_limits.contains(u, 1e-9) {
            return Err(LmpcError::AssumptionViolated(
                5,
                format!("seed input leaves the limits at step {t}"),
            ));
        }
    }
    // Seeding assumption on the data: enough transitions to estimate the
    // structure constants and the first support.
    let mut data = transitions_of(model, seed);
    if data.len() < 2 {
        return Err(LmpcError::AssumptionViolated(
            6,
            format!("{} recorded transitions, need at least 2", data.len()),
        ));
    }

    let x_ref = DVector::from_row_slice(&cfg.lin_ref_x);
    let u_ref = DVector::from_row_slice(&cfg.lin_ref_u);
    let q_lqr = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.q_lqr));
    let r_lqr = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.r_lqr));
    let (a, b, policy) = linearize_and_gain(model, &x_ref, &u_ref, &q_lqr, &r_lqr)?;
    let a_cl = &a + &b * &policy.k;

    let (envelope_x, envelope_u) = cfg.envelope_boxes()?;
    let mut run = AlgorithmRun {
        iterations: vec![seed.clone()],
        supports: Vec::new(),
        invariants: Vec::new(),
        tightenings: Vec::new(),
        remainders: Vec::new(),
        constants: Vec::new(),
        store: SafeSetStore::new(GoalSpec::new(
            limits.goal_box.clone(),
            limits.goal_box.clone(),
            cfg.u_nom_box()?,
            detect_informative_bounds(model),
        )?),
        goal: GoalSpec::new(
            limits.goal_box.clone(),
            limits.goal_box.clone(),
            cfg.u_nom_box()?,
            detect_informative_bounds(model),
        )?,
        policy,
        a,
        b,
        initial_costs: Vec::new(),
    };
    let mut cost: Option<StageCost> = None;
    let mut geometry: Option<PlanGeometry> = None;

    for j in 1..=cfg.max_iters {
        // Structure constants and support estimate from all data so far.
        let (l_est, g_est) = estimate_constants(&data)?;
        run.constants.push((l_est, g_est));
        let qc = lipschitz_qc(l_est, g_est, model.n, model.m_in);
        let (qx, qu) = sproc_boxes(model, cfg, &data);
        let support =
            build_support_sdp(&data, &[qc], &qx, &qu, run.supports.last())?;

        // Error tube: remainder fixed point, then monotone fallback keeping
        // the previous invariant when the fresh one fails to nest.
        let bases: Vec<(DVector<f64>, DVector<f64>)> = run
            .iterations
            .iter()
            .flat_map(|r| {
                (0..r.nominal_inputs.len())
                    .map(|t| (r.nominal_states[t].clone(), r.nominal_inputs[t].clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let e_init = AxisBox::symmetric(&DVector::from_row_slice(&cfg.error_guess));
        let (mut w_box, mut inv) = synthesize_tube(
            model, &run.policy, &run.a, &run.b, &bases, limits, cfg, &support, &e_init,
        )?;
        if let Some(prev) = run.invariants.last() {
            if !box_inside(&inv.rpi_box, &prev.rpi_box, 1e-9) {
                // Re-bound the remainder over the previous set and verify the
                // previous invariant still absorbs the refreshed disturbance.
                let cover = widen_about_center(&box_hull(&e_init, &prev.rpi_box), 1.02);
                let spread_x = AxisBox::symmetric(&DVector::from_row_slice(&cfg.base_spread_x));
                let spread_u = AxisBox::symmetric(&DVector::from_row_slice(&cfg.base_spread_u));
                let w2 = tube_remainder_box(
                    model,
                    &run.policy.k,
                    &run.a,
                    &run.b,
                    &bases,
                    &spread_x,
                    &spread_u,
                    &limits.x_limits,
                    &limits.u_limits,
                    &cover,
                    cfg.remainder_samples,
                    cfg.remainder_margin,
                    cfg.sampling_seed,
                );
                let d2 = combined_disturbance(&support.ellipsoid, &w2)?;
                if !still_invariant(prev, &a_cl, &d2, 1e-9)? {
                    return Err(LmpcError::TubeDiverged(format!(
                        "iteration {j}: refreshed error set fails to nest and the previous set is no longer invariant"
                    )));
                }
                w_box = w2;
                inv = prev.clone();
            }
        }
        inv.iteration = j;

        // Tightened boxes, growing from the previous iteration's.
        let (prev_x, prev_u) = match run.tightenings.last() {
            Some(t) => (t.x_bar.clone(), t.u_bar.clone()),
            None => (envelope_x.clone(), envelope_u.clone()),
        };
        let tight = solve_tightening(
            &prev_x,
            &prev_u,
            &inv,
            model,
            &limits.x_limits,
            &limits.u_limits,
            cfg.grid_density,
            j,
        )?;

        if j == 1 {
            // Freeze the goal spec: the nominal goal box is the target inset
            // by the first error box, so stage costs are comparable across
            // iterations (later error boxes are nested inside the first).
            let x_goal_bar = box_pontryagin_diff(&limits.goal_box, &inv.rpi_box).map_err(|e| {
                LmpcError::TubeDiverged(format!("error box does not fit inside the goal box: {e}"))
            })?;
            let goal = GoalSpec::new(
                limits.goal_box.clone(),
                x_goal_bar,
                cfg.u_nom_box()?,
                detect_informative_bounds(model),
            )?;
            goal.check_margin(&inv.rpi_box)?;
            let stage = (task.stage_cost)(&goal);
            let geom = (task.plan_geometry)(&goal);
            let store = SafeSetStore::new(goal.clone());
            let bundle = TrajectoryBundle {
                nominal_states: seed.nominal_states.clone(),
                nominal_inputs: seed.nominal_inputs.clone(),
                true_states: seed.nominal_states.clone(),
                true_inputs: seed.nominal_inputs.clone(),
                iteration: 0,
            };
            let validation = InsertValidation { invariant: &inv, constraints: &tight };
            let store = insert_iteration(&store, &bundle, model, &stage, &validation)
                .map_err(|e| {
                    LmpcError::AssumptionViolated(
                        5,
                        format!("seed rollout fails the first iteration's certificates: {e}"),
                    )
                })?;
            run.initial_costs.push(
                store
                    .iteration_initial_cost(0)
                    .ok_or_else(|| LmpcError::Config("seed insert left no rows".into()))?,
            );
            run.store = if cfg.prune_store { prune(&store)? } else { store };
            run.goal = goal;
            cost = Some(stage);
            geometry = Some(geom);
        } else {
            run.goal.check_margin(&inv.rpi_box)?;
        }
        let cost_ref = cost.as_ref().expect("stage cost initialized at iteration 1");
        let geom_ref = geometry.as_ref().expect("geometry initialized at iteration 1");

        let record = run_iteration(
            task, geom_ref, cost_ref, &run.store, &tight, &inv, &run.policy, cfg, plant, j,
        )?;

        let bundle = TrajectoryBundle {
            nominal_states: record.nominal_states.clone(),
            nominal_inputs: record.nominal_inputs.clone(),
            true_states: record.true_states.clone(),
            true_inputs: record.true_inputs.clone(),
            iteration: j,
        };
        let validation = InsertValidation { invariant: &inv, constraints: &tight };
        let mut store = insert_iteration(&run.store, &bundle, model, cost_ref, &validation)?;
        run.initial_costs.push(
            store
                .iteration_initial_cost(j)
                .ok_or_else(|| LmpcError::Config(format!("iteration {j} insert left no rows")))?,
        );
        if cfg.relink_stored_costs {
            store = relink_costs(&store)?;
        }
        if cfg.prune_store {
            store = prune(&store)?;
        }
        run.store = store;

        data.extend(transitions_of(model, &record));
        run.iterations.push(record);
        run.supports.push(support);
        run.invariants.push(inv);
        run.tightenings.push(tight);
        run.remainders.push(w_box);
    }
    Ok(run)
}

///// S-procedure boxes for the support program: the hull of recorded transition
/// points expanded by the configured operational margin, clipped against
/// nothing (points may sit outside the nominal limits while learning).  The
/// quadratic constraint only localizes the disturbance near data, so
/// certifying over the full task boxes would inflate the support by the
/// constraint radius at the farthest corner and defeat the tube.
fn sproc_boxes(
    model: &SystemModel,
    cfg: &LmpcConfig,
    data: &[TransitionDatum],
) -> (AxisBox, AxisBox) {
    let first = &data[0].q;
    let mut qx = AxisBox::new(first.rows(0, model.n).into_owned(), first.rows(0, model.n).into_owned())
        .expect("point box");
    let mut qu = AxisBox::new(
        first.rows(model.n, model.m_in).into_owned(),
        first.rows(model.n, model.m_in).into_owned(),
    )
    .expect("point box");
    for t in data.iter().skip(1) {
        for i in 0..model.n {
            qx.lb[i] = qx.lb[i].min(t.q[i]);
            qx.ub[i] = qx.ub[i].max(t.q[i]);
        }
        for i in 0..model.m_in {
            qu.lb[i] = qu.lb[i].min(t.q[model.n + i]);
            qu.ub[i] = qu.ub[i].max(t.q[model.n + i]);
        }
    }
    for i in 0..model.n {
        qx.lb[i] -= cfg.support_margin_x[i];
        qx.ub[i] += cfg.support_margin_x[i];
    }
    for i in 0..model.m_in {
        qu.lb[i] -= cfg.support_margin_u[i];
        qu.ub[i] += cfg.support_margin_u[i];
    }
    (qx, qu)
}
