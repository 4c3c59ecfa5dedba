//! Iterative robust learning MPC for difference-flat systems with unmodeled
//! additive dynamics.
//!
//! The pipeline alternates between closed-loop data collection and offline set
//! construction:
//!
//! 1. [`uncertainty`] — estimate an ellipsoidal support for the unmodeled
//!    dynamics from transition data via a semidefinite program.
//! 2. [`error_invariant`] — synthesize an ancillary feedback gain and a robust
//!    positively invariant error set for the estimated disturbance.
//! 3. [`tightening`] — tighten state/input boxes so nominal plans plus tube
//!    errors stay feasible, restricted to states reachable through the flat
//!    output parametrization.
//! 4. [`safe_set`] — store lifted output trajectories with costs-to-go and
//!    evaluate the convex terminal set / Barycentric terminal cost.
//! 5. [`lmpc`] — the receding-horizon controller and the iteration driver.
//!
//! [`flat_system`] carries the system description (dynamics plus flat maps),
//! [`geometry`] the set primitives, and [`solver`] the conic / NLP layer the
//! rest of the crate runs on. [`bicycle`] instantiates everything for a
//! kinematic bicycle tracking a curvy road in the Frenet frame.

pub mod bicycle;
pub mod error_invariant;
pub mod flat_system;
pub mod geometry;
pub mod lmpc;
pub mod safe_set;
pub mod solver;
pub mod store;
pub mod tightening;
pub mod uncertainty;

pub use flat_system::{LiftedOutput, OutputWindow, SystemModel};
pub use geometry::{AxisBox, Ellipsoid, VPolytope};
pub use lmpc::{
    AlgorithmRun, IterationRecord, LmpcConfig, LmpcError, MpcSolution, SystemTask, TaskLimits,
};
pub use solver::{ConicProblem, ConicSolution, Cone, NlpProblem, NlpSolution};
