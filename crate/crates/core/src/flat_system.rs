//! Difference-flat system descriptions.
//!
//! A system is difference flat when a window of `R` consecutive outputs
//! determines the state and `R+1` consecutive outputs determine the input:
//!
//! ```text
//!   x_t = Fx(y_t, ..., y_{t+R-1})        u_t = Fu(y_t, ..., y_{t+R})
//! ```
//!
//! so nominal planning can happen entirely in output space. Each flat map
//! comes with componentwise lower/upper bounding functions, quasiconcave /
//! quasiconvex respectively, which is what makes convex combinations of
//! stored output windows certifiably feasible (the interval-hull property the
//! safe set is built on).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum forward progress per step accepted by the flat maps.
pub const MIN_PROGRESS: f64 = 1e-6;
/// Minimum speed accepted by the input reconstruction.
pub const MIN_SPEED: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FlatError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("outside flat-map domain: {0}")]
    Domain(String),
}

/// `m × R` matrix of consecutive outputs; column `k` is output `y_{t+k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputWindow(pub DMatrix<f64>);

/// `m × (R+1)` matrix of consecutive outputs; one column longer than a
/// window, enough to reconstruct the input applied at the window's start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedOutput(pub DMatrix<f64>);

impl OutputWindow {
    pub fn output_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    pub fn col(&self, k: usize) -> DVector<f64> {
        self.0.column(k).clone_owned()
    }

    pub fn from_outputs(outputs: &[DVector<f64>]) -> Result<Self, FlatError> {
        if outputs.is_empty() {
            return Err(FlatError::Shape("empty output list".into()));
        }
        let m = outputs[0].len();
        if outputs.iter().any(|y| y.len() != m) {
            return Err(FlatError::Shape("ragged output list".into()));
        }
        let mut mat = DMatrix::zeros(m, outputs.len());
        for (k, y) in outputs.iter().enumerate() {
            mat.set_column(k, y);
        }
        Ok(Self(mat))
    }

    /// Drop the first column and append `next` — the one-step forward shift.
    pub fn forward_shift(&self, next: &DVector<f64>) -> Result<Self, FlatError> {
        shift_forward(&self.0, next).map(Self)
    }

    /// Prepend `prev` and drop the last column — the one-step backward shift.
    pub fn backward_shift(&self, prev: &DVector<f64>) -> Result<Self, FlatError> {
        shift_backward(&self.0, prev).map(Self)
    }

    /// Column-major flattening, the coordinates used for hull membership.
    pub fn as_flat(&self) -> DVector<f64> {
        DVector::from_column_slice(self.0.as_slice())
    }

    pub fn from_flat(v: &DVector<f64>, m: usize, r: usize) -> Result<Self, FlatError> {
        if v.len() != m * r {
            return Err(FlatError::Shape(format!("{} entries for {}x{}", v.len(), m, r)));
        }
        Ok(Self(DMatrix::from_column_slice(m, r, v.as_slice())))
    }
}

impl LiftedOutput {
    pub fn output_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn from_outputs(outputs: &[DVector<f64>]) -> Result<Self, FlatError> {
        OutputWindow::from_outputs(outputs).map(|w| Self(w.0))
    }

    /// The leading `R`-column window.
    pub fn window(&self) -> OutputWindow {
        let r = self.0.ncols() - 1;
        OutputWindow(self.0.columns(0, r).clone_owned())
    }

    /// The trailing `R`-column window (the successor state's window).
    pub fn next_window(&self) -> OutputWindow {
        let r = self.0.ncols() - 1;
        OutputWindow(self.0.columns(1, r).clone_owned())
    }

    pub fn last_output(&self) -> DVector<f64> {
        self.0.column(self.0.ncols() - 1).clone_owned()
    }

    pub fn col(&self, k: usize) -> DVector<f64> {
        self.0.column(k).clone_owned()
    }

    pub fn forward_shift(&self, next: &DVector<f64>) -> Result<Self, FlatError> {
        shift_forward(&self.0, next).map(Self)
    }

    pub fn backward_shift(&self, prev: &DVector<f64>) -> Result<Self, FlatError> {
        shift_backward(&self.0, prev).map(Self)
    }

    pub fn from_window(window: &OutputWindow, next: &DVector<f64>) -> Result<Self, FlatError> {
        let mut cols: Vec<DVector<f64>> = (0..window.len()).map(|k| window.col(k)).collect();
        cols.push(next.clone());
        Self::from_outputs(&cols)
    }
}

fn shift_forward(m: &DMatrix<f64>, next: &DVector<f64>) -> Result<DMatrix<f64>, FlatError> {
    if next.len() != m.nrows() {
        return Err(FlatError::Shape("shift output dimension".into()));
    }
    let cols = m.ncols();
    let mut out = DMatrix::zeros(m.nrows(), cols);
    for k in 1..cols {
        out.set_column(k - 1, &m.column(k));
    }
    out.set_column(cols - 1, next);
    Ok(out)
}

fn shift_backward(m: &DMatrix<f64>, prev: &DVector<f64>) -> Result<DMatrix<f64>, FlatError> {
    if prev.len() != m.nrows() {
        return Err(FlatError::Shape("shift output dimension".into()));
    }
    let cols = m.ncols();
    let mut out = DMatrix::zeros(m.nrows(), cols);
    out.set_column(0, prev);
    for k in 0..cols - 1 {
        out.set_column(k + 1, &m.column(k));
    }
    Ok(out)
}

type DynFn<I, O> = Arc<dyn Fn(&I) -> O + Send + Sync>;
type Dyn2Fn<I1, I2, O> = Arc<dyn Fn(&I1, &I2) -> O + Send + Sync>;
/// Componentwise (lower, upper) bounding map over a lifted object.
type BoundsFn<I> = DynFn<I, Result<(DVector<f64>, DVector<f64>), FlatError>>;

/// A difference-flat system: discrete dynamics, output map, flat
/// reconstruction maps and their componentwise bounding functions.
#[derive(Clone)]
pub struct SystemModel {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m_in: usize,
    /// Output dimension.
    pub m_out: usize,
    /// Window length: outputs needed to reconstruct the state.
    pub r: usize,
    /// Sample time.
    pub dt: f64,
    /// Nominal dynamics `x⁺ = f(x, u)`.
    pub f: Dyn2Fn<DVector<f64>, DVector<f64>, DVector<f64>>,
    /// Output map `y = h(x)`.
    pub h: DynFn<DVector<f64>, DVector<f64>>,
    /// State from an output window.
    pub fx: DynFn<OutputWindow, Result<DVector<f64>, FlatError>>,
    /// Input from a lifted output.
    pub fu: DynFn<LiftedOutput, Result<DVector<f64>, FlatError>>,
    /// Componentwise (lower, upper) bounds on `Fx` over a window;
    /// lower components quasiconcave, upper components quasiconvex.
    pub bounds_state: BoundsFn<OutputWindow>,
    /// Componentwise (lower, upper) bounds on `Fu` over a lifted output.
    pub bounds_input: BoundsFn<LiftedOutput>,
    /// Dynamics Jacobians `(∂f/∂x, ∂f/∂u)`; `None` falls back to central
    /// finite differences where a consumer needs them.
    #[allow(clippy::type_complexity)]
    pub f_jac: Option<Dyn2Fn<DVector<f64>, DVector<f64>, (DMatrix<f64>, DMatrix<f64>)>>,
}

impl SystemModel {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(x, u)
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }

    pub fn reconstruct_state(&self, window: &OutputWindow) -> Result<DVector<f64>, FlatError> {
        if window.len() != self.r || window.output_dim() != self.m_out {
            return Err(FlatError::Shape(format!(
                "window {}x{}, expected {}x{}",
                window.output_dim(),
                window.len(),
                self.m_out,
                self.r
            )));
        }
        (self.fx)(window)
    }

    pub fn reconstruct_input(&self, lifted: &LiftedOutput) -> Result<DVector<f64>, FlatError> {
        if lifted.0.ncols() != self.r + 1 || lifted.output_dim() != self.m_out {
            return Err(FlatError::Shape(format!(
                "lifted output {}x{}, expected {}x{}",
                lifted.output_dim(),
                lifted.0.ncols(),
                self.m_out,
                self.r + 1
            )));
        }
        (self.fu)(lifted)
    }

    /// Stacked `(lower, upper)` bounds on `(Fx, Fu)` over a lifted output;
    /// the first `n` components bound the state, the last `m` the input.
    pub fn bounding_eval(
        &self,
        lifted: &LiftedOutput,
    ) -> Result<(DVector<f64>, DVector<f64>), FlatError> {
        let (xl, xu) = (self.bounds_state)(&lifted.window())?;
        let (ul, uu) = (self.bounds_input)(lifted)?;
        let mut lo = DVector::zeros(self.n + self.m_in);
        let mut hi = DVector::zeros(self.n + self.m_in);
        lo.rows_mut(0, self.n).copy_from(&xl);
        lo.rows_mut(self.n, self.m_in).copy_from(&ul);
        hi.rows_mut(0, self.n).copy_from(&xu);
        hi.rows_mut(self.n, self.m_in).copy_from(&uu);
        Ok((lo, hi))
    }

    /// Dynamics Jacobians, analytic when provided, otherwise central
    /// differences with the given step.
    pub fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        fd_step: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        if let Some(j) = &self.f_jac {
            return j(x, u);
        }
        let n = self.n;
        let m = self.m_in;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += fd_step;
            xm[i] -= fd_step;
            let col = (self.step(&xp, u) - self.step(&xm, u)) / (2.0 * fd_step);
            a.set_column(i, &col);
        }
        for i in 0..m {
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += fd_step;
            um[i] -= fd_step;
            let col = (self.step(x, &up) - self.step(x, &um)) / (2.0 * fd_step);
            b.set_column(i, &col);
        }
        (a, b)
    }

    /// Roll the nominal dynamics forward under an input sequence.
    pub fn rollout(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(x0.clone());
        for u in inputs {
            let next = self.step(xs.last().unwrap(), u);
            xs.push(next);
        }
        xs
    }
}
