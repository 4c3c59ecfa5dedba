//! Kinematic bicycle in the Frenet frame of a curvy reference path.
//!
//! State `(s, e_y, e_ψ)`: progress along the path, lateral offset, heading
//! error. Inputs `(v, δ)`: speed and steering angle, both direct. The outputs
//! `(s, e_y)` make the Euler-discretized model difference flat with window
//! length 2: two consecutive outputs pin the heading, three pin both inputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::flat_system::{FlatError, LiftedOutput, OutputWindow, SystemModel, MIN_PROGRESS, MIN_SPEED};
use crate::geometry::AxisBox;
use crate::lmpc::{
    FirstStepAnchor, LmpcError, PlanGeometry, PlanRow, SystemTask, TaskLimits, TERMINAL_GAP_FLOOR,
};
use crate::safe_set::{GoalSpec, StageCost};

/// Lower bound of the curvature factor `1 − e_y·C(s)` over the state box.
pub const Q_LO: f64 = 31.0 / 40.0;
/// Upper bound of the curvature factor over the state box.
pub const Q_HI: f64 = 49.0 / 40.0;

/// Geometry, limits and task constants for the bicycle demo.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Sample time [s].
    pub dt: f64,
    /// Wheelbase [m].
    pub wheelbase: f64,
    /// State box: `s ∈ [s_min, s_max]`, `e_y ∈ ±e_y_max`, `e_ψ ∈ ±e_psi_max`.
    pub s_min: f64,
    pub s_max: f64,
    pub e_y_max: f64,
    pub e_psi_max: f64,
    /// Input box: `v ∈ [0, v_max]`, `δ ∈ ±delta_max`.
    pub v_max: f64,
    pub delta_max: f64,
    /// Task: reach `s >= goal_s`.
    pub goal_s: f64,
    /// Initial state `(0, 1, 0)`.
    pub x_start: [f64; 3],
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            dt: 0.2,
            wheelbase: 4.0,
            s_min: -2.0,
            s_max: 60.0,
            e_y_max: 4.5,
            e_psi_max: std::f64::consts::FRAC_PI_3,
            v_max: 18.0,
            delta_max: std::f64::consts::FRAC_PI_2,
            goal_s: 40.0,
            x_start: [0.0, 1.0, 0.0],
        }
    }
}

impl BicycleParams {
    /// Path curvature `C(s) = atan(100 − s²/2) / (10π)` — an S-bend with an
    /// inflection at `s = √200`.
    pub fn curvature(&self, s: f64) -> f64 {
        (100.0 - 0.5 * s * s).atan() / (10.0 * std::f64::consts::PI)
    }

    pub fn curvature_deriv(&self, s: f64) -> f64 {
        let w = 100.0 - 0.5 * s * s;
        (-s) / ((1.0 + w * w) * 10.0 * std::f64::consts::PI)
    }

    pub fn state_box(&self) -> AxisBox {
        AxisBox::from_slices(
            &[self.s_min, -self.e_y_max, -self.e_psi_max],
            &[self.s_max, self.e_y_max, self.e_psi_max],
        )
        .expect("state box")
    }

    pub fn input_box(&self) -> AxisBox {
        AxisBox::from_slices(&[0.0, -self.delta_max], &[self.v_max, self.delta_max])
            .expect("input box")
    }

    /// Goal region: the state box restricted to `s >= goal_s`.
    pub fn goal_box(&self) -> AxisBox {
        let mut b = self.state_box();
        b.lb[0] = self.goal_s;
        b
    }

    pub fn start_state(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x_start)
    }

    /// Euclidean distance to the goal region (zero inside).
    pub fn goal_distance(&self, x: &DVector<f64>) -> f64 {
        let b = self.goal_box();
        let mut d2 = 0.0;
        for i in 0..3 {
            let ex = (b.lb[i] - x[i]).max(x[i] - b.ub[i]).max(0.0);
            d2 += ex * ex;
        }
        d2.sqrt()
    }
}

/// Build the flat [`SystemModel`] for the bicycle.
pub fn bicycle_model(params: BicycleParams) -> SystemModel {
    let p = params;
    let dt = p.dt;
    let wheelbase = p.wheelbase;

    let f = {
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
            let (s, ey, epsi) = (x[0], x[1], x[2]);
            let (v, delta) = (u[0], u[1]);
            let c = p.curvature(s);
            let q = 1.0 - ey * c;
            let sdot = v * epsi.cos() / q;
            DVector::from_row_slice(&[
                s + dt * sdot,
                ey + dt * v * epsi.sin(),
                epsi + dt * (v * delta.tan() / wheelbase - sdot * c),
            ])
        })
    };

    let h = Arc::new(|x: &DVector<f64>| DVector::from_row_slice(&[x[0], x[1]]));

    let fx = {
        Arc::new(move |w: &OutputWindow| -> Result<DVector<f64>, FlatError> {
            let (s0, e0) = (w.0[(0, 0)], w.0[(1, 0)]);
            let (s1, e1) = (w.0[(0, 1)], w.0[(1, 1)]);
            let ds = s1 - s0;
            if ds < MIN_PROGRESS {
                return Err(FlatError::Domain(format!("progress {ds:.3e} per step")));
            }
            let q = 1.0 - e0 * p.curvature(s0);
            if q <= 0.0 {
                return Err(FlatError::Domain("curvature factor not positive".into()));
            }
            let epsi = ((e1 - e0) / (q * ds)).atan();
            Ok(DVector::from_row_slice(&[s0, e0, epsi]))
        })
    };

    let fu = {
        let fx = fx.clone();
        Arc::new(move |l: &LiftedOutput| -> Result<DVector<f64>, FlatError> {
            let w0 = l.window();
            let w1 = l.next_window();
            let x0 = fx(&w0)?;
            let x1 = fx(&w1)?;
            let (s0, e0) = (l.0[(0, 0)], l.0[(1, 0)]);
            let (s1, e1) = (l.0[(0, 1)], l.0[(1, 1)]);
            let ds = s1 - s0;
            let de = e1 - e0;
            let q = 1.0 - e0 * p.curvature(s0);
            let v = (q * ds).hypot(de) / dt;
            if v < MIN_SPEED {
                return Err(FlatError::Domain(format!("speed {v:.3e}")));
            }
            let depsi = x1[2] - x0[2];
            let delta = (wheelbase / (dt * v) * (depsi + ds * p.curvature(s0))).atan();
            Ok(DVector::from_row_slice(&[v, delta]))
        })
    };

    let bounds_state = {
        Arc::new(move |w: &OutputWindow| -> Result<(DVector<f64>, DVector<f64>), FlatError> {
            let (s0, e0) = (w.0[(0, 0)], w.0[(1, 0)]);
            let ds = w.0[(0, 1)] - s0;
            let de = w.0[(1, 1)] - e0;
            if ds < MIN_PROGRESS {
                return Err(FlatError::Domain(format!("progress {ds:.3e} per step")));
            }
            let a1 = de / (Q_LO * ds);
            let a2 = de / (Q_HI * ds);
            let lo = DVector::from_row_slice(&[s0, e0, a1.min(a2).atan()]);
            let hi = DVector::from_row_slice(&[s0, e0, a1.max(a2).atan()]);
            Ok((lo, hi))
        })
    };

    let bounds_input = {
        Arc::new(move |l: &LiftedOutput| -> Result<(DVector<f64>, DVector<f64>), FlatError> {
            let ds = l.0[(0, 1)] - l.0[(0, 0)];
            let de = l.0[(1, 1)] - l.0[(1, 0)];
            if ds < MIN_PROGRESS {
                return Err(FlatError::Domain(format!("progress {ds:.3e} per step")));
            }
            // Speed: ‖(q·Δs, Δe_y)‖/dt is monotone in the curvature factor,
            // so the interval endpoints bound it; the lower endpoint drops
            // the lateral term, staying quasiconcave (linear).
            let v_lo = Q_LO * ds / dt;
            let v_hi = (Q_HI * ds).hypot(de) / dt;
            // Steering: the reconstruction is an atan, so ±π/2 are the only
            // bounds valid over the whole domain.
            let d_max = std::f64::consts::FRAC_PI_2;
            let lo = DVector::from_row_slice(&[v_lo, -d_max]);
            let hi = DVector::from_row_slice(&[v_hi, d_max]);
            Ok((lo, hi))
        })
    };

    let f_jac = {
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
            let (s, ey, epsi) = (x[0], x[1], x[2]);
            let (v, delta) = (u[0], u[1]);
            let c = p.curvature(s);
            let cp = p.curvature_deriv(s);
            let q = 1.0 - ey * c;
            let (sin_e, cos_e) = epsi.sin_cos();
            let mut a = DMatrix::identity(3, 3);
            a[(0, 0)] += dt * v * cos_e * ey * cp / (q * q);
            a[(0, 1)] = dt * v * cos_e * c / (q * q);
            a[(0, 2)] = -dt * v * sin_e / q;
            a[(1, 2)] = dt * v * cos_e;
            a[(2, 0)] = -dt * v * cos_e * cp / (q * q);
            a[(2, 1)] = -dt * v * cos_e * c * c / (q * q);
            a[(2, 2)] += dt * v * sin_e * c / q;
            let mut b = DMatrix::zeros(3, 2);
            b[(0, 0)] = dt * cos_e / q;
            b[(1, 0)] = dt * sin_e;
            b[(2, 0)] = dt * (delta.tan() / p.wheelbase - cos_e * c / q);
            b[(2, 1)] = dt * v / (p.wheelbase * delta.cos().powi(2));
            (a, b)
        })
    };

    SystemModel {
        n: 3,
        m_in: 2,
        m_out: 2,
        r: 2,
        dt,
        f,
        h,
        fx,
        fu,
        bounds_state,
        bounds_input,
        f_jac: Some(f_jac),
    }
}

/// Generative model of the unmodeled dynamics: a smooth field with a known
/// Lipschitz constant plus bounded per-step noise, seeded for repeatability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceOracle {
    /// Lipschitz constant of the smooth part over `(x, u)`.
    pub l_true: f64,
    /// Radius of the noise ball.
    pub gamma_true: f64,
    pub seed: u64,
    #[serde(skip)]
    rng: Option<ChaCha12Rng>,
}

impl DisturbanceOracle {
    pub fn new(l_true: f64, gamma_true: f64, seed: u64) -> Self {
        Self { l_true, gamma_true, seed, rng: None }
    }

    /// Smooth component; rows are `(L/√3)·sin(aᵢᵀz)` with unit `aᵢ`, so the
    /// spectral norm of the Jacobian never exceeds `L`.
    pub fn smooth(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let amp = self.l_true / 3f64.sqrt();
        let z = [x[0], x[1], x[2], u[0], u[1]];
        let dirs = [
            [0.62, 0.50, 0.35, 0.45, 0.19],
            [0.11, 0.78, 0.22, 0.33, 0.48],
            [0.40, 0.15, 0.71, 0.25, 0.51],
        ];
        DVector::from_fn(3, |i, _| {
            let d = dirs[i];
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let arg: f64 = d.iter().zip(z.iter()).map(|(a, b)| a / norm * b).sum();
            amp * arg.sin()
        })
    }

    /// One realized disturbance (smooth part plus a fresh noise draw).
    pub fn draw(&mut self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if self.rng.is_none() {
            self.rng = Some(ChaCha12Rng::seed_from_u64(self.seed));
        }
        let rng = self.rng.as_mut().unwrap();
        let mut w = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(rand::distr::StandardUniform) * 2.0 - 1.0);
        let norm = w.norm();
        if norm > 1e-12 {
            let radius = self.gamma_true * rng.random::<f64>().cbrt();
            w *= radius / norm;
        }
        self.smooth(x, u) + w
    }
}

/// Conservative centerline-tracking controller used to record iteration 0:
/// constant cruise speed, curvature feedforward and a lateral/heading PD —
/// a pure-pursuit surrogate that stays well inside the input box.
pub fn seed_controller(p: &BicycleParams, x: &DVector<f64>) -> DVector<f64> {
    let (s, ey, epsi) = (x[0], x[1], x[2]);
    let v = 9.0f64;
    let c = p.curvature(s);
    let q = 1.0 - ey * c;
    let ff = (p.wheelbase * epsi.cos() * c / q).atan();
    let fb = -0.9 * epsi - (0.45 * ey / v.max(1.0)).atan();
    let delta = (ff + fb).clamp(-p.delta_max + 0.1, p.delta_max - 0.1);
    DVector::from_row_slice(&[v, delta])
}

/// Convex stage cost measuring violation of the goal-region conditions for
/// the bicycle.  Position terms are linear in the window entries, the speed
/// ceiling reuses the Euclidean form of the speed bound, and the heading
/// conditions are rewritten as linear inequalities: `atan(Δe/(QΔs)) ≤ b`
/// becomes `Δe ≤ tan(b)·Q_b·Δs` with the binding curvature factor `Q_b`
/// picked by the sign of `tan(b)`, which has the same zero set and stays
/// well defined at zero forward step.  Components with constant bounds
/// (steering) are excluded as uninformative.  Every term is convex, so the
/// hinge sum is convex on lifted outputs and vanishes exactly on the goal
/// conditions.
pub fn goal_stage_cost(p: &BicycleParams, goal: &GoalSpec) -> StageCost {
    let dt = p.dt;
    let lg = goal.x_goal_bar.lb.clone();
    let ug = goal.x_goal_bar.ub.clone();
    let lnv = goal.u_nom.lb[0];
    let unv = goal.u_nom.ub[0];
    let info = goal.informative.clone();
    StageCost::new(Arc::new(move |l: &LiftedOutput| {
        let y = &l.0;
        let (s0, e0) = (y[(0, 0)], y[(1, 0)]);
        let ds1 = y[(0, 1)] - s0;
        let de1 = y[(1, 1)] - e0;
        let mut t = Vec::new();
        if info.lower[0] {
            t.push(lg[0] - s0);
        }
        if info.upper[0] {
            t.push(s0 - ug[0]);
        }
        if info.lower[1] {
            t.push(lg[1] - e0);
        }
        if info.upper[1] {
            t.push(e0 - ug[1]);
        }
        if info.upper[2] {
            let tu = ug[2].tan();
            let qb = if tu >= 0.0 { Q_LO } else { Q_HI };
            t.push(de1 - tu * qb * ds1);
        }
        if info.lower[2] {
            let tl = lg[2].tan();
            let qb = if tl <= 0.0 { Q_LO } else { Q_HI };
            t.push(tl * qb * ds1 - de1);
        }
        if info.lower[3] {
            t.push(lnv - Q_LO * ds1 / dt);
        }
        if info.upper[3] {
            t.push((Q_HI * ds1).hypot(de1) / dt - unv);
        }
        DVector::from_vec(t)
    }))
}

fn v2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_row_slice(&[a, b])
}

/// Linear heading row `Δe ≤ tan(bound)·Q_b·Δs` (upper) or its mirrored lower
/// form, with the curvature factor picked by the sign of the tangent so the
/// row is conservative over the whole state box and matches the stage cost's
/// heading terms exactly.
fn heading_row(bound_tan: f64, upper: bool) -> PlanRow {
    let qb = if upper {
        if bound_tan >= 0.0 { Q_LO } else { Q_HI }
    } else if bound_tan <= 0.0 {
        Q_LO
    } else {
        Q_HI
    };
    let t = bound_tan * qb;
    if upper {
        // de1 - t*ds1 <= 0.
        PlanRow::Lin { ca: v2(t, -1.0), cb: v2(-t, 1.0), c0: 0.0 }
    } else {
        // t*ds1 - de1 <= 0.
        PlanRow::Lin { ca: v2(-t, 1.0), cb: v2(t, -1.0), c0: 0.0 }
    }
}

/// Second-order-cone speed row `‖(Q_HI·Δs, Δe)‖/dt ≤ ceiling`.
fn speed_cone(dt: f64, ceiling: f64) -> PlanRow {
    PlanRow::Cone {
        ga: DMatrix::from_row_slice(2, 2, &[-Q_HI / dt, 0.0, 0.0, -1.0 / dt]),
        gb: DMatrix::from_row_slice(2, 2, &[Q_HI / dt, 0.0, 0.0, 1.0 / dt]),
        g: v2(0.0, 0.0),
        ca: v2(0.0, 0.0),
        cb: v2(0.0, 0.0),
        c0: ceiling,
    }
}

/// Convex planner geometry for the bicycle.
///
/// Hard stage rows confine a window's bounding intervals to the tightened
/// boxes: the position components bind the window's first output directly,
/// the heading conditions take the same linearized form as the stage cost,
/// and the speed interval gives one linear floor row and one second-order
/// cone ceiling row.  Hinge rows restate [`goal_stage_cost`] term by term so
/// the planner objective is that cost exactly.  The anchor pins the first
/// output to the nominal state's output and restricts the second output to
/// the ray consistent with the nominal heading — an affine constraint once
/// the anchor state is fixed — so the first planned window reconstructs the
/// anchor state to machine precision.
pub fn bicycle_plan_geometry(p: &BicycleParams, goal: &GoalSpec) -> PlanGeometry {
    let dt = p.dt;
    let stage_rows = Arc::new(move |tight: &crate::tightening::TightenedConstraints| {
        let xb = &tight.x_bar;
        let ub = &tight.u_bar;
        assert!(
            xb.ub[2] < std::f64::consts::FRAC_PI_2 && xb.lb[2] > -std::f64::consts::FRAC_PI_2,
            "tightened heading bounds must stay below a quarter turn"
        );
        vec![
            // Position box on the window's first output.
            PlanRow::Lin { ca: v2(-1.0, 0.0), cb: v2(0.0, 0.0), c0: xb.lb[0] },
            PlanRow::Lin { ca: v2(1.0, 0.0), cb: v2(0.0, 0.0), c0: -xb.ub[0] },
            PlanRow::Lin { ca: v2(0.0, -1.0), cb: v2(0.0, 0.0), c0: xb.lb[1] },
            PlanRow::Lin { ca: v2(0.0, 1.0), cb: v2(0.0, 0.0), c0: -xb.ub[1] },
            heading_row(xb.ub[2].tan(), true),
            heading_row(xb.lb[2].tan(), false),
            // Speed floor: lb ≤ Q_LO·Δs/dt.
            PlanRow::Lin { ca: v2(Q_LO / dt, 0.0), cb: v2(-Q_LO / dt, 0.0), c0: ub.lb[0] },
            speed_cone(dt, ub.ub[0]),
        ]
    });

    let lg = goal.x_goal_bar.lb.clone();
    let ug = goal.x_goal_bar.ub.clone();
    let (lnv, unv) = (goal.u_nom.lb[0], goal.u_nom.ub[0]);
    let info = goal.informative.clone();
    let mut hinge_rows = Vec::new();
    if info.lower[0] {
        hinge_rows.push(PlanRow::Lin { ca: v2(-1.0, 0.0), cb: v2(0.0, 0.0), c0: lg[0] });
    }
    if info.upper[0] {
        hinge_rows.push(PlanRow::Lin { ca: v2(1.0, 0.0), cb: v2(0.0, 0.0), c0: -ug[0] });
    }
    if info.lower[1] {
        hinge_rows.push(PlanRow::Lin { ca: v2(0.0, -1.0), cb: v2(0.0, 0.0), c0: lg[1] });
    }
    if info.upper[1] {
        hinge_rows.push(PlanRow::Lin { ca: v2(0.0, 1.0), cb: v2(0.0, 0.0), c0: -ug[1] });
    }
    if info.upper[2] {
        hinge_rows.push(heading_row(ug[2].tan(), true));
    }
    if info.lower[2] {
        hinge_rows.push(heading_row(lg[2].tan(), false));
    }
    if info.lower[3] {
        hinge_rows.push(PlanRow::Lin {
            ca: v2(Q_LO / dt, 0.0),
            cb: v2(-Q_LO / dt, 0.0),
            c0: lnv,
        });
    }
    if info.upper[3] {
        hinge_rows.push(speed_cone(dt, unv));
    }

    // Terminal window: keep a positive forward gap so the flat maps stay
    // defined on it (hull mixtures can otherwise collapse onto rest points).
    let terminal_rows = vec![PlanRow::Lin {
        ca: v2(1.0, 0.0),
        cb: v2(-1.0, 0.0),
        c0: TERMINAL_GAP_FLOOR,
    }];

    let pa = *p;
    let anchor = Arc::new(move |x_bar: &DVector<f64>| -> Result<FirstStepAnchor, LmpcError> {
        let (s, e, psi) = (x_bar[0], x_bar[1], x_bar[2]);
        if psi.abs() >= std::f64::consts::FRAC_PI_2 - 1e-9 {
            return Err(LmpcError::Precondition(format!(
                "anchor heading {psi:.4} leaves the ray pinning undefined"
            )));
        }
        let qf = 1.0 - e * pa.curvature(s);
        if qf <= 1e-9 {
            return Err(LmpcError::Precondition(format!(
                "curvature factor {qf:.4} not positive at the anchor"
            )));
        }
        let slope = psi.tan() * qf;
        let (s0, e0) = (s, e);
        Ok(FirstStepAnchor {
            first_output: v2(s, e),
            // (e1 - e0) - slope·(s1 - s0) = 0.
            equalities: vec![PlanRow::Lin {
                ca: v2(slope, -1.0),
                cb: v2(-slope, 1.0),
                c0: 0.0,
            }],
            project: Arc::new(move |y1: &mut DVector<f64>| {
                y1[1] = e0 + slope * (y1[0] - s0);
            }),
        })
    });

    PlanGeometry { stage_rows, hinge_rows, terminal_rows, anchor }
}

/// The bicycle bundled as a planning task: model, limits and the builders
/// for the stage cost and planner geometry.
pub fn bicycle_task(params: BicycleParams) -> SystemTask {
    let p = params;
    SystemTask {
        model: bicycle_model(p),
        limits: TaskLimits {
            x_limits: p.state_box(),
            u_limits: p.input_box(),
            goal_box: p.goal_box(),
        },
        stage_cost: Arc::new(move |goal: &GoalSpec| goal_stage_cost(&p, goal)),
        plan_geometry: Arc::new(move |goal: &GoalSpec| bicycle_plan_geometry(&p, goal)),
    }
}
