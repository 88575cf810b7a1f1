//! Mesh constraints: arclength equidistribution and the uniform mesh.
//!
//! The adaptive strategy ties the interior node positions to the field by
//! requiring all cells to carry equal amounts of the monitor density
//! `rho = sqrt(1 + alpha^2 phi_X^2)`. For a piecewise-linear field the
//! content of cell `i` is `theta_i = sqrt(delta_i^2 + alpha^2 dy_i^2)` with
//! `dy_i = y_{i+1} - y_i`, and equidistribution is imposed on the squares:
//!
//! ```text
//!   g_m = (delta_m^2 + alpha^2 dy_m^2) - (delta_{m-1}^2 + alpha^2 dy_{m-1}^2),
//!   m = 1..N.
//! ```
//!
//! Squaring keeps the same zero set (contents are positive) and makes each
//! `g_m` quadratic, so the constraint Hessians are constant. That is what
//! the integrators need: the velocity-level constraint `d/dt g = Dg(q) u`
//! and its derivative rows `H g_m u` reuse one stencil routine below.
//!
//! The uniform variant pins every interior cell to the reference width; it
//! is linear, so all curvature terms vanish. Both produce `N` constraints
//! for the `N` interior positions, which is what closes the semi-discrete
//! Euler-Lagrange equations into a solvable DAE.

use crate::error::{Error, Result};
use crate::semidiscrete::{Cells, DofState};
use crate::solver::{inf_norm, Banded};

/// Which mesh rule ties node positions to the field.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    /// Equal squared monitor content `delta^2 + alpha^2 dy^2` in all cells.
    Arclength { alpha: f64 },
    /// Equal cell widths (fixed reference mesh expressed as a constraint).
    Uniform,
}

/// Sparse constraint Jacobian (or any same-shaped row family): row `m`
/// touches only nodes `m-1, m, m+1`, stored as a 6-entry stencil in the
/// order `(y_{m-1}, X_{m-1}, y_m, X_m, y_{m+1}, X_{m+1})`.
#[derive(Debug, Clone)]
pub struct ConstraintJacobian {
    rows: Vec<[f64; 6]>,
}

impl ConstraintJacobian {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[[f64; 6]] {
        &self.rows
    }

    /// Global interior DOF index for slot `s` of row `r` (both 0-based), or
    /// `None` if that slot touches a clamped boundary node.
    #[inline]
    pub fn dof(r: usize, s: usize, n: usize) -> Option<usize> {
        let node = r + s / 2; // = (m - 1) + s/2 for constraint m = r + 1
        let comp = s % 2;
        if node >= 1 && node <= n {
            Some(2 * (node - 1) + comp)
        } else {
            None
        }
    }

    /// Visits every stored entry as `(row, interior_dof, value)`.
    pub fn for_each_entry(&self, mut f: impl FnMut(usize, usize, f64)) {
        let n = self.rows.len();
        for (r, row) in self.rows.iter().enumerate() {
            for (s, &v) in row.iter().enumerate() {
                if let Some(dof) = Self::dof(r, s, n) {
                    f(r, dof, v);
                }
            }
        }
    }

    /// `Dg v` for an interleaved interior vector `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.rows.len();
        assert_eq!(v.len(), 2 * n);
        let mut out = vec![0.0; n];
        self.for_each_entry(|r, dof, val| out[r] += val * v[dof]);
        out
    }

    /// `Dg^T lambda` as an interleaved interior vector.
    pub fn apply_transpose(&self, lambda: &[f64]) -> Vec<f64> {
        let n = self.rows.len();
        assert_eq!(lambda.len(), n);
        let mut out = vec![0.0; 2 * n];
        self.for_each_entry(|r, dof, val| out[dof] += val * lambda[r]);
        out
    }
}

/// Shared stencil: because the arclength residual is quadratic, both the
/// Jacobian rows (from cell data `dX_i = delta_i`, `dy_i`) and the rows of
/// `H g_m u` (from velocity differences across each cell) have the form
/// produced here.
fn arclength_rows(alpha: f64, dy: &[f64], dx: &[f64]) -> Vec<[f64; 6]> {
    let ncell = dx.len();
    let n = ncell - 1;
    let a2 = alpha * alpha;
    (1..=n)
        .map(|m| {
            [
                2.0 * a2 * dy[m - 1],
                2.0 * dx[m - 1],
                -2.0 * a2 * (dy[m] + dy[m - 1]),
                -2.0 * (dx[m] + dx[m - 1]),
                2.0 * a2 * dy[m],
                2.0 * dx[m],
            ]
        })
        .collect()
}

/// Differences of an interleaved interior vector across each cell, with
/// zero boundary values: returns `(dy, dX)` of length `N+1`.
fn cell_differences(u: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let val = |k: usize, c: usize| -> f64 {
        if k >= 1 && k <= n {
            u[2 * (k - 1) + c]
        } else {
            0.0
        }
    };
    let dy = (0..=n).map(|i| val(i + 1, 0) - val(i, 0)).collect();
    let dx = (0..=n).map(|i| val(i + 1, 1) - val(i, 1)).collect();
    (dy, dx)
}

impl ConstraintSet {
    /// Residual `g(q)`, length `N`.
    pub fn evaluate(&self, state: &DofState, cells: &Cells) -> Vec<f64> {
        let n = state.n();
        match *self {
            ConstraintSet::Arclength { alpha } => {
                let a2 = alpha * alpha;
                let content: Vec<f64> = (0..=n)
                    .map(|i| {
                        let dy = cells.gamma[i] * cells.delta[i];
                        cells.delta[i] * cells.delta[i] + a2 * dy * dy
                    })
                    .collect();
                (1..=n).map(|m| content[m] - content[m - 1]).collect()
            }
            ConstraintSet::Uniform => {
                let dx = state.dx();
                (1..=n).map(|m| cells.delta[m] / dx - 1.0).collect()
            }
        }
    }

    /// Jacobian `Dg(q)` in stencil form.
    pub fn jacobian(&self, state: &DofState, cells: &Cells) -> ConstraintJacobian {
        let n = state.n();
        match *self {
            ConstraintSet::Arclength { alpha } => {
                let dy: Vec<f64> =
                    (0..=n).map(|i| cells.gamma[i] * cells.delta[i]).collect();
                ConstraintJacobian { rows: arclength_rows(alpha, &dy, &cells.delta) }
            }
            ConstraintSet::Uniform => {
                let dx = state.dx();
                let rows = (1..=n)
                    .map(|_| [0.0, 0.0, 0.0, -1.0 / dx, 0.0, 1.0 / dx])
                    .collect();
                ConstraintJacobian { rows }
            }
        }
    }

    /// Rows of `H g_m u`, i.e. the time derivative of the Jacobian along a
    /// tangent `u`. Same stencil shape as [`ConstraintSet::jacobian`];
    /// identically zero for the linear uniform constraint.
    pub fn jacobian_dot(&self, state: &DofState, u: &[f64]) -> ConstraintJacobian {
        let n = state.n();
        match *self {
            ConstraintSet::Arclength { alpha } => {
                let (dy, dx) = cell_differences(u, n);
                ConstraintJacobian { rows: arclength_rows(alpha, &dy, &dx) }
            }
            ConstraintSet::Uniform => {
                ConstraintJacobian { rows: vec![[0.0; 6]; n] }
            }
        }
    }

    /// Curvature contraction `sum_m w_m H g_m u` as an interleaved interior
    /// vector: the constraint-curvature force of the augmented Lagrangian.
    pub fn hessian_weighted(&self, state: &DofState, w: &[f64], u: &[f64]) -> Vec<f64> {
        // Hg is symmetric, so contracting the jacobian_dot rows with w from
        // the left gives sum_m w_m Hg_m u directly.
        self.jacobian_dot(state, u).apply_transpose(w)
    }

    /// Acceleration-level right-hand side `h_m = -u^T H g_m u`: with it,
    /// `Dg(q) qddot = h` is the second time derivative of the constraint.
    pub fn acceleration_rhs(&self, state: &DofState, u: &[f64]) -> Vec<f64> {
        let jd = self.jacobian_dot(state, u);
        jd.apply(u).iter().map(|v| -v).collect()
    }

    /// The matrix `sum_m w_m H g_m` assembled in banded form (bandwidths 3).
    /// Same operator as [`ConstraintSet::hessian_weighted`]; the integrators
    /// need its entries for Jacobian assembly, not just its action.
    pub fn hessian_contraction(&self, state: &DofState, w: &[f64]) -> Banded {
        let n = state.n();
        assert_eq!(w.len(), n);
        let mut out = Banded::zeros(2 * n, 3, 3);
        if let ConstraintSet::Arclength { alpha } = *self {
            let a2 = alpha * alpha;
            // Constraint m contributes +w_m on cell m, -w_m on cell m-1, so
            // cell i carries the combined weight w_i - w_{i+1}.
            let wm = |m: usize| if (1..=n).contains(&m) { w[m - 1] } else { 0.0 };
            for i in 0..=n {
                let s = wm(i) - wm(i + 1);
                if s == 0.0 {
                    continue;
                }
                // Cell quadratic form: 2 a^2 (y_r - y_l)^2 + 2 (X_r - X_l)^2.
                for (comp, fac) in [(0usize, 2.0 * a2 * s), (1usize, 2.0 * s)] {
                    let dof = |k: usize| -> Option<usize> {
                        ((1..=n).contains(&k)).then(|| 2 * (k - 1) + comp)
                    };
                    let (l, r) = (dof(i), dof(i + 1));
                    if let Some(l) = l {
                        out.add(l, l, fac);
                    }
                    if let Some(r) = r {
                        out.add(r, r, fac);
                    }
                    if let (Some(l), Some(r)) = (l, r) {
                        out.add(l, r, -fac);
                        out.add(r, l, -fac);
                    }
                }
            }
        }
        out
    }

    /// True if the constraint is linear in `q` (no curvature terms).
    pub fn is_linear(&self) -> bool {
        matches!(self, ConstraintSet::Uniform)
    }
}

/// Solves `g(y, X) = 0` for the interior positions at fixed field values,
/// starting from the positions in `state`.
///
/// Damped Newton on the `N x N` tridiagonal position block of the Jacobian;
/// steps are backtracked until the mesh stays strictly monotone with a
/// `1e-3 dx` margin. Used for the endpoint mesh update of the
/// control-theoretic integrator and (under a homotopy) for initialization.
pub fn solve_positions(
    constraint: &ConstraintSet,
    state: &DofState,
    floor_frac: f64,
) -> Result<DofState> {
    let n = state.n();
    let dx = state.dx();
    let floor = floor_frac * dx;
    let mut st = state.clone();
    let mut history = Vec::new();
    let scale = match constraint {
        // Natural residual size: squared contents are O((monitor content)^2).
        ConstraintSet::Arclength { alpha } => {
            let c = state.cells_with_floor(f64::NEG_INFINITY)?;
            (0..=n)
                .map(|i| {
                    let dy = c.gamma[i] * c.delta[i];
                    c.delta[i] * c.delta[i] + alpha * alpha * dy * dy
                })
                .fold(1e-300, f64::max)
        }
        ConstraintSet::Uniform => 1.0,
    };
    let tol = 1e-12 * scale.max(1e-12);

    let monotone = |x: &[f64]| x.windows(2).all(|w| w[1] - w[0] > floor);

    for iter in 0..60 {
        let cells = st.cells_with_floor(floor)?;
        let g = constraint.evaluate(&st, &cells);
        let rnorm = inf_norm(&g);
        history.push(rnorm);
        if rnorm <= tol {
            return Ok(st);
        }
        // Position block of the Jacobian: slots 1, 3, 5 of each stencil row.
        let jac = constraint.jacobian(&st, &cells);
        let mut a = Banded::zeros(n, 1, 1);
        for (r, row) in jac.rows().iter().enumerate() {
            for (s, v) in [(1usize, row[1]), (3, row[3]), (5, row[5])] {
                let node = r + s / 2;
                if node >= 1 && node <= n {
                    a.add(r, node - 1, v);
                }
            }
        }
        let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let piv = a.factorize()?;
        a.solve_factored(&piv, &mut rhs);
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "position solve step".into() });
        }

        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut x = st.x().to_vec();
            for k in 1..=n {
                x[k] += lambda * rhs[k - 1];
            }
            if monotone(&x) {
                let trial = DofState::from_arrays(st.y().to_vec(), x);
                let tc = trial.cells_with_floor(floor)?;
                let tnorm = inf_norm(&constraint.evaluate(&trial, &tc));
                if tnorm < rnorm || lambda < 1e-6 {
                    st = trial;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter + 1,
                residual: rnorm,
                history,
            });
        }
    }
    let residual = *history.last().unwrap();
    Err(Error::NoConvergence { iterations: 60, residual, history })
}
