//! Lagrange-multiplier moving-mesh integrator (index-3 formulation).
//!
//! Here mesh and field are treated on equal footing: the full constrained
//! Euler-Lagrange system is discretized with multipliers, so the discrete
//! flow is symplectic on the constraint manifold and conserves the discrete
//! energy up to bounded oscillation even on an adaptive mesh.
//!
//! The moving-mesh mass matrix `M(q)` degenerates wherever adjacent cells
//! have equal slope, so formulations that invert `M` break down. The cure
//! used throughout this module is a slack augmentation: extend the
//! configuration to `Q = (q, r)` with Lagrangian
//!
//! ```text
//!   L^A(Q, Qdot) = L_N(q, qdot) + rdot^T Dg(q) qdot,
//! ```
//!
//! and constraints `G(Q) = (g(q), r) = 0`. The Legendre transform then
//! involves the bordered matrix
//!
//! ```text
//!   MM(q) = [ M(q)   Dg(q)^T ]
//!           [ Dg(q)  0       ]
//! ```
//!
//! which stays invertible as long as `Dg` has full rank and `M` is positive
//! on the nullspace of `Dg`, precisely the situation at the slope-degenerate
//! configurations. On the manifold `r = 0` the augmentation is inert: the
//! slack velocities and momenta vanish (to solver tolerance) and the `q`
//! dynamics is the original constrained system.
//!
//! Two discretizations are provided: a trapezoidal discrete Lagrangian
//! (second order, SHAKE-like, solves for the new configuration and a
//! multiplier) and Lobatto IIIA-IIIB partitioned pairs with separate stage
//! coefficients for configurations and momenta (two or three stages). Both
//! are symmetric and hence exactly time-reversible.

use crate::constraints::{ConstraintJacobian, ConstraintSet};
use crate::error::{Error, Result};
use crate::fieldtheory::Density;
use crate::semidiscrete::{
    assemble_mass_matrix, discrete_energy, force, ix, iy, kinetic_gradient, kinetic_hessian,
    mass_apply, mass_apply_jacobian, potential_gradient, potential_hessian, Cells, DofState,
};
use crate::solver::{newton_solve, Banded, NewtonOptions, NonlinearSystem};
use crate::tableau::PartitionedTableau;

/// Options of the multiplier stepper.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LmOptions {
    pub newton: NewtonOptions,
    /// Mesh-crossing floor as a fraction of the reference spacing.
    pub floor_frac: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { newton: NewtonOptions::default(), floor_frac: 1e-10 }
    }
}

/// Which discrete Lagrangian the multiplier strategy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmMethod {
    /// Trapezoidal discrete Lagrangian, order two.
    Trapezoidal,
    /// Lobatto IIIA-IIIB pair with the given number of stages (2 or 3).
    Lobatto(usize),
}

/// One point of the multiplier evolution. Momenta are primary; velocities
/// and multipliers are consistent derived data kept for diagnostics.
#[derive(Debug, Clone)]
pub struct LmState {
    pub t: f64,
    pub state: DofState,
    /// Conjugate momenta of all DOFs, interleaved, length `2N`.
    pub p: Vec<f64>,
    /// Slack momenta, length `N`; zero up to solver tolerance.
    pub p_r: Vec<f64>,
    /// Velocity from the bordered solve, length `2N`.
    pub u: Vec<f64>,
    /// Slack velocity, length `N`; zero up to solver tolerance.
    pub w: Vec<f64>,
    /// Slack positions, length `N`; zero up to solver tolerance.
    pub r: Vec<f64>,
    /// Net slack-multiplier impulse density of the most recent step
    /// (quadrature-weighted stage combination), length `N`. Round-off-sized
    /// whenever the slack sector stays exactly at zero; zero for the
    /// trapezoidal scheme, which has no slack block.
    pub mu: Vec<f64>,
    /// Most recent constraint multiplier estimate, force units, length `N`.
    pub lambda: Vec<f64>,
}

impl LmState {
    pub fn energy(&self, density: &dyn Density) -> Result<f64> {
        let cells = self.state.cells()?;
        Ok(discrete_energy(&self.state, &cells, &self.u, density))
    }
}

/// Assembles the bordered matrix `[[M, Dg^T], [Dg, 0]]` in banded form with
/// node-major slots `(u_y, u_X, w)` per node (bandwidths 5).
fn assemble_bordered(state: &DofState, cells: &Cells, constraint: &ConstraintSet) -> Banded {
    let n = state.n();
    let m = assemble_mass_matrix(state, cells);
    let dg = constraint.jacobian(state, cells);
    let mut a = Banded::zeros(3 * n, 5, 5);
    let vmap = |dof: usize| 3 * (dof / 2) + dof % 2; // interleaved DOF -> slot
    for k in 1..=n {
        for comp in 0..2 {
            let dof = 2 * (k - 1) + comp;
            let row = vmap(dof);
            for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                for c2 in 0..2 {
                    let dof2 = 2 * (mm - 1) + c2;
                    a.add(row, vmap(dof2), m.get(dof, dof2));
                }
            }
        }
    }
    dg.for_each_entry(|r, dof, v| {
        a.add(3 * r + 2, vmap(dof), v); // constraint row
        a.add(vmap(dof), 3 * r + 2, v); // transposed block
    });
    a
}

/// Solves the bordered system for `(top; bottom) = (p-like 2N; constraint N)`
/// right-hand sides, returning the `q`-part and the border part.
pub fn solve_bordered(
    state: &DofState,
    cells: &Cells,
    constraint: &ConstraintSet,
    top: &[f64],
    bottom: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = state.n();
    assert_eq!(top.len(), 2 * n);
    assert_eq!(bottom.len(), n);
    let mut a = assemble_bordered(state, cells, constraint);
    let mut rhs = vec![0.0; 3 * n];
    for dof in 0..2 * n {
        rhs[3 * (dof / 2) + dof % 2] = top[dof];
    }
    for k in 0..n {
        rhs[3 * k + 2] = bottom[k];
    }
    let piv = a.factorize().map_err(|e| match e {
        Error::SingularMatrix { column } => Error::SingularKkt {
            detail: format!("bordered mass matrix singular at column {column}"),
        },
        other => other,
    })?;
    a.solve_factored(&piv, &mut rhs);
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "bordered solve".into() });
    }
    let mut q = vec![0.0; 2 * n];
    let mut border = vec![0.0; n];
    for dof in 0..2 * n {
        q[dof] = rhs[3 * (dof / 2) + dof % 2];
    }
    for k in 0..n {
        border[k] = rhs[3 * k + 2];
    }
    Ok((q, border))
}

/// Velocity and slack velocity from momenta: the augmented Legendre
/// transform `MM(q) (u, w) = (p, p_r)`. Works where `M` alone is singular.
pub fn velocity_from_momentum(
    state: &DofState,
    constraint: &ConstraintSet,
    p: &[f64],
    p_r: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cells = state.cells()?;
    solve_bordered(state, &cells, constraint, p, p_r)
}

/// Consistent accelerations and multipliers at a phase point:
/// `M qddot + Dg^T lambda = f(q, u)` with `Dg qddot = -u^T Hg u`.
pub fn consistent_accelerations(
    state: &DofState,
    u: &[f64],
    density: &dyn Density,
    constraint: &ConstraintSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cells = state.cells()?;
    let f = force(state, &cells, u, density);
    let h = constraint.acceleration_rhs(state, u);
    solve_bordered(state, &cells, constraint, &f, &h)
}

/// Smallest singular value of the bordered matrix, by inverse power
/// iteration on its LU factors. Returns zero if the matrix is exactly
/// singular at the factorization's working precision.
pub fn bordered_sigma_min(
    state: &DofState,
    cells: &Cells,
    constraint: &ConstraintSet,
) -> Result<f64> {
    let n3 = 3 * state.n();
    let a = assemble_bordered(state, cells, constraint);
    let mut lu = a.clone();
    let piv = match lu.factorize() {
        Ok(p) => p,
        Err(Error::SingularMatrix { .. }) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    // The matrix is symmetric, so the smallest singular value is the
    // smallest eigenvalue magnitude. Inverse iteration drives the vector
    // there; the Rayleigh quotient squares the eigenvector error and turns
    // the slow linear tail into fast convergence of the estimate.
    let mut z: Vec<f64> = (0..n3).map(|i| if i % 2 == 0 { 1.0 } else { -0.7 }).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = norm(&z);
    z.iter_mut().for_each(|v| *v /= s);
    let mut sigma = f64::INFINITY;
    for _ in 0..200 {
        lu.solve_factored(&piv, &mut z);
        let s = norm(&z);
        if !s.is_finite() {
            return Ok(0.0);
        }
        z.iter_mut().for_each(|v| *v /= s);
        let mut az = vec![0.0; n3];
        a.mul_vec(&z, &mut az);
        let next = z.iter().zip(&az).map(|(a, b)| a * b).sum::<f64>().abs();
        if (next - sigma).abs() <= 1e-13 * next.abs() {
            return Ok(next);
        }
        sigma = next;
    }
    Ok(sigma)
}

/// Builds an `LmState` from a configuration and a consistent velocity
/// (slack velocity zero): momenta via the augmented Legendre transform,
/// multipliers from the consistent-acceleration solve.
pub fn lm_state(
    t: f64,
    state: DofState,
    u: Vec<f64>,
    density: &dyn Density,
    constraint: &ConstraintSet,
) -> Result<LmState> {
    let cells = state.cells()?;
    let p = mass_apply(&state, &cells, &u);
    let p_r = constraint.jacobian(&state, &cells).apply(&u);
    let (_, lambda) = consistent_accelerations(&state, &u, density, constraint)?;
    let n = state.n();
    Ok(LmState {
        t,
        state,
        p,
        p_r,
        u,
        w: vec![0.0; n],
        r: vec![0.0; n],
        mu: vec![0.0; n],
        lambda,
    })
}

// ---------------------------------------------------------------------------
// Trapezoidal discrete Lagrangian
// ---------------------------------------------------------------------------

struct TrapezoidSystem<'a> {
    density: &'a dyn Density,
    constraint: &'a ConstraintSet,
    dt: f64,
    n: usize,
    base: &'a DofState,
    cells0: Cells,
    p: &'a [f64],
    floor: f64,
    geo_err: Option<Error>,
}

impl TrapezoidSystem<'_> {
    /// Unknown slots per node: `(y1, X1, lambda)`.
    #[inline]
    fn vi(&self, k: usize, slot: usize) -> usize {
        3 * (k - 1) + slot
    }

    fn unpack(&mut self, z: &[f64]) -> Option<(DofState, Vec<f64>)> {
        let mut y = self.base.y().to_vec();
        let mut x = self.base.x().to_vec();
        for k in 1..=self.n {
            y[k] = z[self.vi(k, 0)];
            x[k] = z[self.vi(k, 1)];
        }
        let state = DofState::from_arrays(y, x);
        if let Err(e) = state.cells_with_floor(self.floor) {
            self.geo_err = Some(e);
            return None;
        }
        let v: Vec<f64> = (0..2 * self.n)
            .map(|dof| {
                let k = dof / 2 + 1;
                let new = z[self.vi(k, dof % 2)];
                let old = if dof % 2 == 0 { self.base.y()[k] } else { self.base.x()[k] };
                (new - old) / self.dt
            })
            .collect();
        Some((state, v))
    }
}

impl NonlinearSystem for TrapezoidSystem<'_> {
    fn dim(&self) -> usize {
        3 * self.n
    }

    fn bandwidths(&self) -> (usize, usize) {
        (5, 5)
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) {
        let Some((state1, v)) = self.unpack(z) else {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        };
        let cells1 = state1.cells_with_floor(self.floor).expect("validated");
        let half = 0.5 * self.dt;
        let kg0 = kinetic_gradient(self.base, &self.cells0, &v);
        let pg0 = potential_gradient(self.base, &self.cells0, self.density);
        let m0v = mass_apply(self.base, &self.cells0, &v);
        let m1v = mass_apply(&state1, &cells1, &v);
        let lam: Vec<f64> = (1..=self.n).map(|k| z[self.vi(k, 2)]).collect();
        let dgt = self.constraint.jacobian(self.base, &self.cells0).apply_transpose(&lam);
        let g1 = self.constraint.evaluate(&state1, &cells1);
        for dof in 0..2 * self.n {
            let d1 = half * (kg0[dof] - pg0[dof]) - 0.5 * (m0v[dof] + m1v[dof]);
            let k = dof / 2 + 1;
            out[self.vi(k, dof % 2)] = self.p[dof] + d1 - dgt[dof];
        }
        for k in 1..=self.n {
            out[self.vi(k, 2)] = g1[k - 1];
        }
    }

    fn jacobian(&mut self, z: &[f64], jac: &mut Banded) {
        let Some((state1, v)) = self.unpack(z) else {
            return;
        };
        let cells1 = state1.cells_with_floor(self.floor).expect("validated");
        let m0 = assemble_mass_matrix(self.base, &self.cells0);
        let m1 = assemble_mass_matrix(&state1, &cells1);
        let dmu0 = mass_apply_jacobian(self.base, &self.cells0, &v);
        let dmu1 = mass_apply_jacobian(&state1, &cells1, &v);
        let dg0 = self.constraint.jacobian(self.base, &self.cells0);
        let dg1 = self.constraint.jacobian(&state1, &cells1);
        let n = self.n;
        for dof in 0..2 * n {
            let k = dof / 2 + 1;
            let row = self.vi(k, dof % 2);
            for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                for c2 in 0..2 {
                    let dof2 = 2 * (mm - 1) + c2;
                    // d v / d q1 = I / dt inside both v-dependent terms.
                    let val = 0.5 * dmu0.get(dof2, dof)
                        - 0.5 * dmu1.get(dof, dof2)
                        - 0.5 * (m0.get(dof, dof2) + m1.get(dof, dof2)) / self.dt;
                    jac.add(row, self.vi(mm, c2), val);
                }
            }
        }
        dg0.for_each_entry(|r, dof, val| {
            let k = dof / 2 + 1;
            jac.add(self.vi(k, dof % 2), self.vi(r + 1, 2), -val);
        });
        dg1.for_each_entry(|r, dof, val| {
            let k = dof / 2 + 1;
            jac.add(self.vi(r + 1, 2), self.vi(k, dof % 2), val);
        });
    }
}

/// One trapezoidal step. Symmetric in `(q0, q1)`, hence reversible under
/// `dt -> -dt`; `dt` must be nonzero.
pub fn lm_step_trapezoidal(
    density: &dyn Density,
    constraint: &ConstraintSet,
    dt: f64,
    from: &LmState,
    opts: &LmOptions,
) -> Result<LmState> {
    assert!(dt != 0.0, "zero step size");
    let n = from.state.n();
    let floor = opts.floor_frac * from.state.dx();
    let cells0 = from.state.cells_with_floor(floor)?;
    let mut sys = TrapezoidSystem {
        density,
        constraint,
        dt,
        n,
        base: &from.state,
        cells0,
        p: &from.p,
        floor,
        geo_err: None,
    };
    // Predictor: free flight along the consistent velocity, previous
    // multiplier scaled back to the step's units.
    let mut z0 = vec![0.0; 3 * n];
    for k in 1..=n {
        z0[3 * (k - 1)] = from.state.y()[k] + dt * from.u[iy(k)];
        z0[3 * (k - 1) + 1] = from.state.x()[k] + dt * from.u[ix(k)];
        // The left-endpoint discrete multiplier carries half a step.
        z0[3 * (k - 1) + 2] = 0.5 * dt * from.lambda[k - 1];
    }
    if !(1..=n + 1).all(|k| {
        let xl = if k == 1 { 0.0 } else { z0[3 * (k - 2) + 1] };
        let xr = if k == n + 1 { from.state.xmax() } else { z0[3 * (k - 1) + 1] };
        xr - xl > sys.floor
    }) {
        for k in 1..=n {
            z0[3 * (k - 1)] = from.state.y()[k];
            z0[3 * (k - 1) + 1] = from.state.x()[k];
        }
    }
    let sol = newton_solve(&mut sys, &z0, &opts.newton).map_err(|e| sys.geo_err.take().unwrap_or(e))?;
    let z = sol.x;
    let (state1, v) = sys.unpack(&z).expect("converged state is valid");
    let cells1 = state1.cells_with_floor(floor)?;
    let half = 0.5 * dt;
    let kg1 = kinetic_gradient(&state1, &cells1, &v);
    let pg1 = potential_gradient(&state1, &cells1, density);
    let m0v = mass_apply(&from.state, &sys.cells0, &v);
    let m1v = mass_apply(&state1, &cells1, &v);
    let raw_p1: Vec<f64> = (0..2 * n)
        .map(|dof| half * (kg1[dof] - pg1[dof]) + 0.5 * (m0v[dof] + m1v[dof]))
        .collect();
    // Project off the constraint-normal momentum component so the stored
    // momentum satisfies the hidden (velocity) constraint. Without this
    // the map is reversible in positions but not in momenta.
    let (u, kappa) = solve_bordered(&state1, &cells1, constraint, &raw_p1, &vec![0.0; n])?;
    let normal = constraint.jacobian(&state1, &cells1).apply_transpose(&kappa);
    let p1: Vec<f64> = raw_p1.iter().zip(&normal).map(|(p, c)| p - c).collect();
    // The projection multiplier covers half a step of constraint impulse
    // at the right endpoint, so 2 kappa / dt estimates lambda(t + dt).
    let lambda: Vec<f64> = kappa.iter().map(|k| 2.0 * k / dt).collect();
    Ok(LmState {
        t: from.t + dt,
        state: state1,
        p: p1,
        p_r: vec![0.0; n],
        u,
        w: vec![0.0; n],
        r: vec![0.0; n],
        mu: vec![0.0; n],
        lambda,
    })
}

// ---------------------------------------------------------------------------
// Lobatto IIIA-IIIB stages on the slack-augmented system
// ---------------------------------------------------------------------------

/// Cached per-stage evaluation data.
struct LobattoStage {
    state: DofState,
    cells: Cells,
    u: Vec<f64>,
}

struct LobattoSystem<'a> {
    density: &'a dyn Density,
    constraint: &'a ConstraintSet,
    tab: &'a PartitionedTableau,
    dt: f64,
    n: usize,
    base: &'a DofState,
    p: &'a [f64],
    p_r: &'a [f64],
    floor: f64,
    geo_err: Option<Error>,
}

impl LobattoSystem<'_> {
    /// Per-node block: for each stage `(U_y, U_X, W, Lambda, Mu)`, then the
    /// endpoint `(u_y, u_X, w)`.
    #[inline]
    fn block(&self) -> usize {
        5 * self.tab.stages() + 3
    }

    #[inline]
    fn sv(&self, k: usize, i: usize, slot: usize) -> usize {
        self.block() * (k - 1) + 5 * i + slot
    }

    #[inline]
    fn ev(&self, k: usize, slot: usize) -> usize {
        self.block() * (k - 1) + 5 * self.tab.stages() + slot
    }

    /// Stage configurations from the stage velocities, plus the endpoint
    /// configuration (equal to the last stage for stiffly accurate pairs).
    fn stage_states(&mut self, z: &[f64]) -> Option<(Vec<LobattoStage>, LobattoStage)> {
        let s = self.tab.stages();
        let n = self.n;
        let mut stages = Vec::with_capacity(s);
        for i in 0..s {
            let mut y = self.base.y().to_vec();
            let mut x = self.base.x().to_vec();
            for k in 1..=n {
                for j in 0..s {
                    y[k] += self.dt * self.tab.a[i][j] * z[self.sv(k, j, 0)];
                    x[k] += self.dt * self.tab.a[i][j] * z[self.sv(k, j, 1)];
                }
            }
            let state = DofState::from_arrays(y, x);
            let cells = match state.cells_with_floor(self.floor) {
                Ok(c) => c,
                Err(e) => {
                    self.geo_err = Some(e);
                    return None;
                }
            };
            let u: Vec<f64> =
                (1..=n).flat_map(|k| [z[self.sv(k, i, 0)], z[self.sv(k, i, 1)]]).collect();
            stages.push(LobattoStage { state, cells, u });
        }
        let mut y = self.base.y().to_vec();
        let mut x = self.base.x().to_vec();
        for k in 1..=n {
            for j in 0..s {
                y[k] += self.dt * self.tab.b[j] * z[self.sv(k, j, 0)];
                x[k] += self.dt * self.tab.b[j] * z[self.sv(k, j, 1)];
            }
        }
        let state = DofState::from_arrays(y, x);
        let cells = match state.cells_with_floor(self.floor) {
            Ok(c) => c,
            Err(e) => {
                self.geo_err = Some(e);
                return None;
            }
        };
        let u: Vec<f64> = (1..=n).flat_map(|k| [z[self.ev(k, 0)], z[self.ev(k, 1)]]).collect();
        let end = LobattoStage { state, cells, u };
        Some((stages, end))
    }

    /// Momentum rate of stage `j`:
    /// `Zdot_q = dL_N/dq + sum_m W_m Hg_m U - Dg^T Lambda`.
    fn zdot_q(&self, st: &LobattoStage, z: &[f64], j: usize) -> Vec<f64> {
        let n = self.n;
        let kg = kinetic_gradient(&st.state, &st.cells, &st.u);
        let pg = potential_gradient(&st.state, &st.cells, self.density);
        let wj: Vec<f64> = (1..=n).map(|k| z[self.sv(k, j, 2)]).collect();
        let lj: Vec<f64> = (1..=n).map(|k| z[self.sv(k, j, 3)]).collect();
        let hgw = self.constraint.hessian_weighted(&st.state, &wj, &st.u);
        let dgt = self.constraint.jacobian(&st.state, &st.cells).apply_transpose(&lj);
        (0..2 * n).map(|dof| kg[dof] - pg[dof] + hgw[dof] - dgt[dof]).collect()
    }
}

impl NonlinearSystem for LobattoSystem<'_> {
    fn dim(&self) -> usize {
        self.block() * self.n
    }

    fn bandwidths(&self) -> (usize, usize) {
        let w = 2 * self.block() - 1;
        (w, w)
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) {
        let Some((stages, end)) = self.stage_states(z) else {
            out.iter_mut().for_each(|v| *v = f64::INFINITY);
            return;
        };
        let s = self.tab.stages();
        let n = self.n;
        let dt = self.dt;
        let zdots: Vec<Vec<f64>> = stages.iter().enumerate().map(|(j, st)| self.zdot_q(st, z, j)).collect();
        for (i, st) in stages.iter().enumerate() {
            // Stage momenta by the momentum tableau.
            let mut pq: Vec<f64> = self.p.to_vec();
            for j in 0..s {
                for dof in 0..2 * n {
                    pq[dof] += dt * self.tab.a_bar[i][j] * zdots[j][dof];
                }
            }
            let mut pr: Vec<f64> = self.p_r.to_vec();
            for j in 0..s {
                for k in 1..=n {
                    pr[k - 1] -= dt * self.tab.a_bar[i][j] * z[self.sv(k, j, 4)];
                }
            }
            let wi: Vec<f64> = (1..=n).map(|k| z[self.sv(k, i, 2)]).collect();
            let mu = mass_apply(&st.state, &st.cells, &st.u);
            let dg = self.constraint.jacobian(&st.state, &st.cells);
            let dgtw = dg.apply_transpose(&wi);
            let dgu = dg.apply(&st.u);
            for k in 1..=n {
                out[self.sv(k, i, 0)] = mu[iy(k)] + dgtw[iy(k)] - pq[iy(k)];
                out[self.sv(k, i, 1)] = mu[ix(k)] + dgtw[ix(k)] - pq[ix(k)];
                out[self.sv(k, i, 2)] = dgu[k - 1] - pr[k - 1];
            }
            if i >= 1 {
                let g = self.constraint.evaluate(&st.state, &st.cells);
                for k in 1..=n {
                    out[self.sv(k, i, 3)] = g[k - 1];
                    // Stage slack (scaled by 1/dt for row balance).
                    let mut r = 0.0;
                    for j in 0..s {
                        r += self.tab.a[i][j] * z[self.sv(k, j, 2)];
                    }
                    out[self.sv(k, i, 4)] = r;
                }
            }
        }
        // Endpoint Legendre transform and hidden constraints.
        let mut pq1: Vec<f64> = self.p.to_vec();
        for j in 0..s {
            for dof in 0..2 * n {
                pq1[dof] += dt * self.tab.b[j] * zdots[j][dof];
            }
        }
        let mut pr1: Vec<f64> = self.p_r.to_vec();
        for j in 0..s {
            for k in 1..=n {
                pr1[k - 1] -= dt * self.tab.b[j] * z[self.sv(k, j, 4)];
            }
        }
        let wend: Vec<f64> = (1..=n).map(|k| z[self.ev(k, 2)]).collect();
        let mu = mass_apply(&end.state, &end.cells, &end.u);
        let dg = self.constraint.jacobian(&end.state, &end.cells);
        let dgtw = dg.apply_transpose(&wend);
        let dgu = dg.apply(&end.u);
        for k in 1..=n {
            out[self.ev(k, 0)] = mu[iy(k)] + dgtw[iy(k)] - pq1[iy(k)];
            out[self.ev(k, 1)] = mu[ix(k)] + dgtw[ix(k)] - pq1[ix(k)];
            out[self.ev(k, 2)] = dgu[k - 1] - pr1[k - 1];
            // Hidden constraints live in the unused first-stage slots.
            out[self.sv(k, 0, 3)] = dgu[k - 1];
            out[self.sv(k, 0, 4)] = wend[k - 1];
        }
    }

    fn jacobian(&mut self, z: &[f64], jac: &mut Banded) {
        let Some((stages, end)) = self.stage_states(z) else {
            return;
        };
        let s = self.tab.stages();
        let n = self.n;
        let dt = self.dt;

        // Per-stage derivative kernels.
        struct Kernels {
            m: Banded,
            dmu: Banded,
            hq: Banded,
            hgw: Banded,
            hgl: Banded,
            dg: ConstraintJacobian,
            hgu: ConstraintJacobian,
        }
        let make = |st: &LobattoStage, w: &[f64], lam: &[f64], cons: &ConstraintSet, dens: &dyn Density| {
            let m = assemble_mass_matrix(&st.state, &st.cells);
            let dmu = mass_apply_jacobian(&st.state, &st.cells, &st.u);
            let mut hq = kinetic_hessian(&st.state, &st.cells, &st.u);
            let ph = potential_hessian(&st.state, &st.cells, dens);
            for k in 1..=n {
                for comp in 0..2 {
                    let dof = 2 * (k - 1) + comp;
                    for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                        for c2 in 0..2 {
                            let dof2 = 2 * (mm - 1) + c2;
                            let v = hq.get(dof, dof2) - ph.get(dof, dof2);
                            hq.set(dof, dof2, v);
                        }
                    }
                }
            }
            let hgw = cons.hessian_contraction(&st.state, w);
            let hgl = cons.hessian_contraction(&st.state, lam);
            let dg = cons.jacobian(&st.state, &st.cells);
            let hgu = cons.jacobian_dot(&st.state, &st.u);
            Kernels { m, dmu, hq, hgw, hgl, dg, hgu }
        };
        let kers: Vec<Kernels> = stages
            .iter()
            .enumerate()
            .map(|(j, st)| {
                let wj: Vec<f64> = (1..=n).map(|k| z[self.sv(k, j, 2)]).collect();
                let lj: Vec<f64> = (1..=n).map(|k| z[self.sv(k, j, 3)]).collect();
                make(st, &wj, &lj, self.constraint, self.density)
            })
            .collect();
        let wend: Vec<f64> = (1..=n).map(|k| z[self.ev(k, 2)]).collect();
        let kend = make(&end, &wend, &vec![0.0; n], self.constraint, self.density);

        // Scatters d(Zdot_q^j)[row_dof] / d(stage-j unknowns and chained
        // stage velocities) times `weight` into Jacobian row `row`.
        let zdot_chain = |jac: &mut Banded, row: usize, row_dof: usize, j: usize, weight: f64, slf: &Self| {
            let ker = &kers[j];
            let k = row_dof / 2 + 1;
            for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                for c2 in 0..2 {
                    let dof2 = 2 * (mm - 1) + c2;
                    // Direct velocity dependence of dL/dq and the curvature
                    // force, plus the chain through the stage position.
                    let direct = ker.dmu.get(dof2, row_dof) + ker.hgw.get(row_dof, dof2);
                    let chain = ker.hq.get(row_dof, dof2) - ker.hgl.get(row_dof, dof2);
                    for jj in 0..s {
                        let v = if jj == j { direct } else { 0.0 }
                            + dt * slf.tab.a[j][jj] * chain;
                        if v != 0.0 {
                            jac.add(row, slf.sv(mm, jj, c2), weight * v);
                        }
                    }
                }
            }
            // d/dW: columns of Hg_l U^j; d/dLambda: -Dg^T columns.
            for (rows, slot, sign) in [(&ker.hgu, 2usize, 1.0), (&ker.dg, 3usize, -1.0)] {
                for (r, row6) in rows.rows().iter().enumerate() {
                    for (s6, &val) in row6.iter().enumerate() {
                        if let Some(dof) = ConstraintJacobian::dof(r, s6, n) {
                            if dof == row_dof {
                                jac.add(row, slf.sv(r + 1, j, slot), weight * sign * val);
                            }
                        }
                    }
                }
            }
        };

        for (i, st) in stages.iter().enumerate() {
            let ker = &kers[i];
            let _ = st;
            for k in 1..=n {
                for comp in 0..2 {
                    let dof = 2 * (k - 1) + comp;
                    let row = self.sv(k, i, comp);
                    // Direct terms of M U + Dg^T W.
                    for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                        for c2 in 0..2 {
                            let dof2 = 2 * (mm - 1) + c2;
                            jac.add(row, self.sv(mm, i, c2), ker.m.get(dof, dof2));
                            let chain = ker.dmu.get(dof, dof2) + ker.hgw.get(dof, dof2);
                            for jj in 0..s {
                                jac.add(row, self.sv(mm, jj, c2), dt * self.tab.a[i][jj] * chain);
                            }
                        }
                    }
                    for (r, row6) in ker.dg.rows().iter().enumerate() {
                        for (s6, &val) in row6.iter().enumerate() {
                            if ConstraintJacobian::dof(r, s6, n) == Some(dof) {
                                jac.add(row, self.sv(r + 1, i, 2), val);
                            }
                        }
                    }
                    // Momentum quadrature chain.
                    for j in 0..s {
                        let w = -dt * self.tab.a_bar[i][j];
                        if w != 0.0 {
                            zdot_chain(jac, row, dof, j, w, self);
                        }
                    }
                }
                // Slack Legendre row: Dg U - P_r.
                let row = self.sv(k, i, 2);
                for (rows, vel_slot) in [(&ker.dg, true), (&ker.hgu, false)] {
                    let r = k - 1;
                    for (s6, &val) in rows.rows()[r].iter().enumerate() {
                        if let Some(dof) = ConstraintJacobian::dof(r, s6, n) {
                            let (mm, c2) = (dof / 2 + 1, dof % 2);
                            if vel_slot {
                                jac.add(row, self.sv(mm, i, c2), val);
                            } else {
                                for jj in 0..s {
                                    jac.add(row, self.sv(mm, jj, c2), dt * self.tab.a[i][jj] * val);
                                }
                            }
                        }
                    }
                }
                for j in 0..s {
                    jac.add(row, self.sv(k, j, 4), dt * self.tab.a_bar[i][j]);
                }
                if i >= 1 {
                    // Stage constraint rows.
                    let row_g = self.sv(k, i, 3);
                    let r = k - 1;
                    for (s6, &val) in ker.dg.rows()[r].iter().enumerate() {
                        if let Some(dof) = ConstraintJacobian::dof(r, s6, n) {
                            let (mm, c2) = (dof / 2 + 1, dof % 2);
                            for jj in 0..s {
                                jac.add(row_g, self.sv(mm, jj, c2), dt * self.tab.a[i][jj] * val);
                            }
                        }
                    }
                    let row_r = self.sv(k, i, 4);
                    for j in 0..s {
                        jac.add(row_r, self.sv(k, j, 2), self.tab.a[i][j]);
                    }
                }
            }
        }

        // Endpoint rows.
        for k in 1..=n {
            for comp in 0..2 {
                let dof = 2 * (k - 1) + comp;
                let row = self.ev(k, comp);
                for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                    for c2 in 0..2 {
                        let dof2 = 2 * (mm - 1) + c2;
                        jac.add(row, self.ev(mm, c2), kend.m.get(dof, dof2));
                        let chain = kend.dmu.get(dof, dof2) + kend.hgw.get(dof, dof2);
                        for jj in 0..s {
                            jac.add(row, self.sv(mm, jj, c2), dt * self.tab.b[jj] * chain);
                        }
                    }
                }
                for (r, row6) in kend.dg.rows().iter().enumerate() {
                    for (s6, &val) in row6.iter().enumerate() {
                        if ConstraintJacobian::dof(r, s6, n) == Some(dof) {
                            jac.add(row, self.ev(r + 1, 2), val);
                        }
                    }
                }
                for j in 0..s {
                    let w = -dt * self.tab.b[j];
                    if w != 0.0 {
                        zdot_chain(jac, row, dof, j, w, self);
                    }
                }
            }
            // Endpoint slack Legendre and the two hidden rows.
            let r = k - 1;
            for (row, with_p) in [(self.ev(k, 2), true), (self.sv(k, 0, 3), false)] {
                for (rows, vel_slot) in [(&kend.dg, true), (&kend.hgu, false)] {
                    for (s6, &val) in rows.rows()[r].iter().enumerate() {
                        if let Some(dof) = ConstraintJacobian::dof(r, s6, n) {
                            let (mm, c2) = (dof / 2 + 1, dof % 2);
                            if vel_slot {
                                jac.add(row, self.ev(mm, c2), val);
                            } else {
                                for jj in 0..s {
                                    jac.add(row, self.sv(mm, jj, c2), dt * self.tab.b[jj] * val);
                                }
                            }
                        }
                    }
                }
                if with_p {
                    for j in 0..s {
                        jac.add(row, self.sv(k, j, 4), dt * self.tab.b[j]);
                    }
                }
            }
            jac.add(self.sv(k, 0, 4), self.ev(k, 2), 1.0);
        }
    }
}

/// One step of the Lobatto IIIA-IIIB discretization of the slack-augmented
/// system. Requires a pair with an explicit first stage and stiff accuracy
/// (the two- and three-stage Lobatto pairs). `dt` must be nonzero.
pub fn lm_step_lobatto(
    density: &dyn Density,
    constraint: &ConstraintSet,
    tab: &PartitionedTableau,
    dt: f64,
    from: &LmState,
    opts: &LmOptions,
) -> Result<LmState> {
    assert!(dt != 0.0, "zero step size");
    if !tab.explicit_first_stage() || !tab.stiffly_accurate() {
        return Err(Error::Config(format!(
            "tableau {} lacks the Lobatto structure required by the multiplier stepper",
            tab.name
        )));
    }
    let n = from.state.n();
    let s = tab.stages();
    let floor = opts.floor_frac * from.state.dx();
    let mut sys = LobattoSystem {
        density,
        constraint,
        tab,
        dt,
        n,
        base: &from.state,
        p: &from.p,
        p_r: &from.p_r,
        floor,
        geo_err: None,
    };
    let mut z0 = vec![0.0; sys.block() * n];
    for k in 1..=n {
        for i in 0..s {
            z0[sys.sv(k, i, 0)] = from.u[iy(k)];
            z0[sys.sv(k, i, 1)] = from.u[ix(k)];
            z0[sys.sv(k, i, 3)] = from.lambda[k - 1];
        }
        z0[sys.ev(k, 0)] = from.u[iy(k)];
        z0[sys.ev(k, 1)] = from.u[ix(k)];
    }
    let sol = newton_solve(&mut sys, &z0, &opts.newton).map_err(|e| sys.geo_err.take().unwrap_or(e))?;
    let z = sol.x;
    let (stages, end) = sys.stage_states(&z).expect("converged state is valid");
    let zdots: Vec<Vec<f64>> = stages.iter().enumerate().map(|(j, st)| sys.zdot_q(st, &z, j)).collect();
    let mut p = from.p.to_vec();
    for j in 0..s {
        for dof in 0..2 * n {
            p[dof] += dt * tab.b[j] * zdots[j][dof];
        }
    }
    let mut p_r = from.p_r.to_vec();
    for j in 0..s {
        for k in 1..=n {
            p_r[k - 1] -= dt * tab.b[j] * z[sys.sv(k, j, 4)];
        }
    }
    let u: Vec<f64> = (1..=n).flat_map(|k| [z[sys.ev(k, 0)], z[sys.ev(k, 1)]]).collect();
    let w: Vec<f64> = (1..=n).map(|k| z[sys.ev(k, 2)]).collect();
    // Endpoint slack positions from the stage quadrature; the last stage
    // constraint pins them to solver tolerance.
    let r: Vec<f64> = (1..=n)
        .map(|k| dt * (0..s).map(|j| tab.b[j] * z[sys.sv(k, j, 2)]).sum::<f64>())
        .collect();
    // Report the last stage constraint multiplier (collocation value at
    // t + dt). For the slack multiplier the quadrature average is the
    // meaningful output: individual stages sample a function that is only
    // zero to discretization order, while the b-weighted combination is the
    // net slack impulse density of the step, which the endpoint conditions
    // pin to round-off (it is what keeps the slack momentum at zero).
    let lambda: Vec<f64> = (1..=n).map(|k| z[sys.sv(k, s - 1, 3)]).collect();
    let mu: Vec<f64> = (1..=n)
        .map(|k| (0..s).map(|j| tab.b[j] * z[sys.sv(k, j, 4)]).sum())
        .collect();
    Ok(LmState { t: from.t + dt, state: end.state, p, p_r, u, w, r, mu, lambda })
}

/// One step with the selected method.
pub fn lm_step(
    density: &dyn Density,
    constraint: &ConstraintSet,
    method: LmMethod,
    dt: f64,
    from: &LmState,
    opts: &LmOptions,
) -> Result<LmState> {
    match method {
        LmMethod::Trapezoidal => lm_step_trapezoidal(density, constraint, dt, from, opts),
        LmMethod::Lobatto(2) => {
            lm_step_lobatto(density, constraint, &PartitionedTableau::lobatto2(), dt, from, opts)
        }
        LmMethod::Lobatto(3) => {
            lm_step_lobatto(density, constraint, &PartitionedTableau::lobatto3(), dt, from, opts)
        }
        LmMethod::Lobatto(s) => Err(Error::Config(format!("unsupported Lobatto stage count {s}"))),
    }
}

/// Integrates `nsteps` steps, invoking `sink` after each accepted step.
pub fn lm_integrate(
    density: &dyn Density,
    constraint: &ConstraintSet,
    method: LmMethod,
    dt: f64,
    nsteps: usize,
    init: LmState,
    opts: &LmOptions,
    mut sink: impl FnMut(&LmState),
) -> Result<LmState> {
    let mut cur = init;
    for step in 0..nsteps {
        cur = lm_step(density, constraint, method, dt, &cur, opts).map_err(|e| Error::StepFailed {
            step: step + 1,
            t: cur.t,
            source: Box::new(e),
        })?;
        sink(&cur);
    }
    Ok(cur)
}
