//! Control-theoretic moving-mesh integrator (index-1 formulation).
//!
//! Only the field values keep conjugate momenta here. The mesh positions
//! and velocities are treated like controls: they are determined at every
//! stage by the position constraint `g(Y, Q) = 0` together with its time
//! derivative `Dg(Y, Q) (Ydot, Qdot) = 0`, which closes the system at
//! differentiation index one. A partitioned Runge-Kutta discretization of
//! the remaining Euler-Lagrange equations
//!
//! ```text
//!   p = [M(q) u]_y-rows,      pdot = d L_N / d y,
//! ```
//!
//! gives, per stage `i` and interior node, four unknowns
//! `(Ydot_i, Pdot_i, Q_i, Qdot_i)` and four equations (momentum definition,
//! force balance, position constraint, velocity constraint). The stage
//! system is solved by a damped Newton iteration with an analytic banded
//! Jacobian; with node-major unknown ordering the bandwidth is `8 s - 1`
//! for `s` stages, independent of `N`.
//!
//! After the stages, the endpoint field values and momenta follow from the
//! quadrature weights and the endpoint mesh is re-solved from
//! `g(y^{n+1}, X) = 0`, so the constraint holds exactly at every output
//! point rather than drifting.

use crate::constraints::{ConstraintJacobian, ConstraintSet};
use crate::error::{Error, Result};
use crate::fieldtheory::Density;
use crate::semidiscrete::{
    assemble_mass_matrix, discrete_energy, ix, iy, kinetic_gradient, kinetic_hessian,
    mass_apply, mass_apply_jacobian, potential_gradient, potential_hessian, DofState,
};
use crate::solver::{newton_solve, Banded, NewtonOptions, NonlinearSystem};
use crate::tableau::PartitionedTableau;

/// Options of the control-theoretic stepper.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CtOptions {
    pub newton: NewtonOptions,
    /// Mesh-crossing floor as a fraction of the reference spacing.
    pub floor_frac: f64,
}

impl Default for CtOptions {
    fn default() -> Self {
        CtOptions { newton: NewtonOptions::default(), floor_frac: 1e-10 }
    }
}

/// One point of the control-theoretic evolution: configuration, field
/// momenta, and the consistent full velocity (kept for diagnostics and as
/// the next stage predictor).
#[derive(Debug, Clone)]
pub struct CtState {
    pub t: f64,
    pub state: DofState,
    /// Conjugate momenta of the field values, length `N`.
    pub p: Vec<f64>,
    /// Interleaved `(ydot, Xdot)` consistent with `p` and the constraint.
    pub u: Vec<f64>,
}

impl CtState {
    pub fn energy(&self, density: &dyn Density) -> Result<f64> {
        let cells = self.state.cells()?;
        Ok(discrete_energy(&self.state, &cells, &self.u, density))
    }
}

/// Field momenta `p = [M(q) u]_y` for a full interleaved velocity.
pub fn momentum_from_velocity(state: &DofState, u: &[f64]) -> Result<Vec<f64>> {
    let cells = state.cells()?;
    let mu = mass_apply(state, &cells, u);
    Ok((1..=state.n()).map(|k| mu[iy(k)]).collect())
}

/// Solves the linear system
///
/// ```text
///   [M(q) u]_y-rows = p,      Dg(q) u = 0
/// ```
///
/// for the full interleaved velocity `u`. Nonsingularity of this `2N x 2N`
/// matrix is exactly the index-1 condition of the formulation.
pub fn velocity_from_momentum(
    state: &DofState,
    constraint: &ConstraintSet,
    p: &[f64],
) -> Result<Vec<f64>> {
    let n = state.n();
    assert_eq!(p.len(), n);
    let cells = state.cells()?;
    let m = assemble_mass_matrix(state, &cells);
    let dg = constraint.jacobian(state, &cells);
    let mut a = Banded::zeros(2 * n, 3, 3);
    let mut rhs = vec![0.0; 2 * n];
    for k in 1..=n {
        let row = iy(k); // momentum row of node k
        for dof in band_cols(k, n) {
            a.add(row, dof, m.get(iy(k), dof));
        }
        rhs[row] = p[k - 1];
    }
    dg.for_each_entry(|r, dof, v| a.add(ix(r + 1), dof, v));
    let piv = a.factorize().map_err(|e| match e {
        Error::SingularMatrix { column } => Error::SingularKkt {
            detail: format!("velocity recovery matrix singular at column {column}"),
        },
        other => other,
    })?;
    a.solve_factored(&piv, &mut rhs);
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "velocity recovery".into() });
    }
    Ok(rhs)
}

/// Interior DOF indices of nodes `k-1, k, k+1` clipped to the interior.
fn band_cols(k: usize, n: usize) -> impl Iterator<Item = usize> {
    let lo = k.saturating_sub(1).max(1);
    let hi = (k + 1).min(n);
    (lo..=hi).flat_map(|m| [iy(m), ix(m)])
}

/// Builds a `CtState` from a configuration and field momenta.
pub fn ct_state(t: f64, state: DofState, p: Vec<f64>, constraint: &ConstraintSet) -> Result<CtState> {
    let u = velocity_from_momentum(&state, constraint, &p)?;
    Ok(CtState { t, state, p, u })
}

/// Per-stage quantities cached between residual and Jacobian calls.
struct StageEval {
    state: DofState,
    u: Vec<f64>,
}

struct CtSystem<'a> {
    density: &'a dyn Density,
    constraint: &'a ConstraintSet,
    tab: &'a PartitionedTableau,
    dt: f64,
    n: usize,
    base: &'a DofState,
    pn: &'a [f64],
    floor: f64,
    /// Geometry failure seen during the last residual evaluation, for
    /// better diagnostics than a bare non-finite report.
    geo_err: Option<Error>,
}

impl CtSystem<'_> {
    /// Unknown (and equation) index: node `k` (1-based), stage `i`
    /// (0-based), slot `0..4` = `(Ydot, Pdot, Q, Qdot)` for unknowns and
    /// `(momentum, force, position constraint, velocity constraint)` for
    /// equations.
    #[inline]
    fn vi(&self, k: usize, i: usize, slot: usize) -> usize {
        4 * self.tab.stages() * (k - 1) + 4 * i + slot
    }

    fn stages(&mut self, z: &[f64]) -> Option<Vec<StageEval>> {
        let s = self.tab.stages();
        let n = self.n;
        let mut out = Vec::with_capacity(s);
        for i in 0..s {
            let mut y = self.base.y().to_vec();
            let mut x = self.base.x().to_vec();
            for k in 1..=n {
                let mut yk = self.base.y()[k];
                for j in 0..s {
                    yk += self.dt * self.tab.a[i][j] * z[self.vi(k, j, 0)];
                }
                y[k] = yk;
                x[k] = z[self.vi(k, i, 2)];
            }
            let state = DofState::from_arrays(y, x);
            if let Err(e) = state.cells_with_floor(self.floor) {
                self.geo_err = Some(e);
                return None;
            }
            let u: Vec<f64> = (1..=n).flat_map(|k| [z[self.vi(k, i, 0)], z[self.vi(k, i, 3)]]).collect();
            out.push(StageEval { state, u });
        }
        Some(out)
    }

    /// Stage momentum `P_i` of node `k`.
    fn stage_p(&self, z: &[f64], k: usize, i: usize) -> f64 {
        let mut p = self.pn[k - 1];
        for j in 0..self.tab.stages() {
            p += self.dt * self.tab.a_bar[i][j] * z[self.vi(k, j, 1)];
        }
        p
    }
}

impl NonlinearSystem for CtSystem<'_> {
    fn dim(&self) -> usize {
        4 * self.tab.stages() * self.n
    }

    fn bandwidths(&self) -> (usize, usize) {
        let w = 8 * self.tab.stages() - 1;
        (w, w)
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) {
        let Some(stages) = self.stages(z) else {
            out.iter_mut().for_each(|v| *v = f64::INFINITY);
            return;
        };
        let n = self.n;
        for (i, st) in stages.iter().enumerate() {
            let cells = st.state.cells_with_floor(self.floor).expect("validated in stages()");
            let mu = mass_apply(&st.state, &cells, &st.u);
            let kg = kinetic_gradient(&st.state, &cells, &st.u);
            let pg = potential_gradient(&st.state, &cells, self.density);
            let g = self.constraint.evaluate(&st.state, &cells);
            let dg = self.constraint.jacobian(&st.state, &cells).apply(&st.u);
            for k in 1..=n {
                out[self.vi(k, i, 0)] = mu[iy(k)] - self.stage_p(z, k, i);
                out[self.vi(k, i, 1)] = z[self.vi(k, i, 1)] - (kg[iy(k)] - pg[iy(k)]);
                out[self.vi(k, i, 2)] = g[k - 1];
                out[self.vi(k, i, 3)] = dg[k - 1];
            }
        }
    }

    fn jacobian(&mut self, z: &[f64], jac: &mut Banded) {
        let Some(stages) = self.stages(z) else {
            return; // residual already reported the failure
        };
        let n = self.n;
        let s = self.tab.stages();
        let dt = self.dt;
        for (i, st) in stages.iter().enumerate() {
            let cells = st.state.cells_with_floor(self.floor).expect("validated in stages()");
            let m = assemble_mass_matrix(&st.state, &cells);
            let dmu = mass_apply_jacobian(&st.state, &cells, &st.u);
            let mut hq = kinetic_hessian(&st.state, &cells, &st.u);
            let ph = potential_hessian(&st.state, &cells, self.density);
            for k in 1..=n {
                for dof in band_cols(k, n) {
                    let v = hq.get(iy(k), dof) - ph.get(iy(k), dof);
                    hq.set(iy(k), dof, v);
                }
            }
            let dg = self.constraint.jacobian(&st.state, &cells);
            let hgu = self.constraint.jacobian_dot(&st.state, &st.u);

            for k in 1..=n {
                let r_mom = self.vi(k, i, 0);
                let r_force = self.vi(k, i, 1);
                // Momentum rows: direct velocity dependence, direct mesh
                // dependence, field dependence through the stage update,
                // and the quadrature of Pdot.
                for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                    jac.add(r_mom, self.vi(mm, i, 0), m.get(iy(k), iy(mm)));
                    jac.add(r_mom, self.vi(mm, i, 3), m.get(iy(k), ix(mm)));
                    jac.add(r_mom, self.vi(mm, i, 2), dmu.get(iy(k), ix(mm)));
                    jac.add(r_force, self.vi(mm, i, 0), -dmu.get(iy(mm), iy(k)));
                    jac.add(r_force, self.vi(mm, i, 3), -dmu.get(ix(mm), iy(k)));
                    jac.add(r_force, self.vi(mm, i, 2), -hq.get(iy(k), ix(mm)));
                    for j in 0..s {
                        jac.add(r_mom, self.vi(mm, j, 0), dt * self.tab.a[i][j] * dmu.get(iy(k), iy(mm)));
                        jac.add(r_force, self.vi(mm, j, 0), -dt * self.tab.a[i][j] * hq.get(iy(k), iy(mm)));
                    }
                }
                for j in 0..s {
                    jac.add(r_mom, self.vi(k, j, 1), -dt * self.tab.a_bar[i][j]);
                }
                jac.add(r_force, self.vi(k, i, 1), 1.0);
            }
            // Constraint rows from the two stencil families.
            for (rows, is_dot) in [(dg.rows(), false), (hgu.rows(), true)] {
                for (r, row) in rows.iter().enumerate() {
                    let kq = r + 1; // constraint index = node index
                    for (slot6, &val) in row.iter().enumerate() {
                        let Some(dof) = ConstraintJacobian::dof(r, slot6, n) else {
                            continue;
                        };
                        let node = dof / 2 + 1;
                        let is_y = dof % 2 == 0;
                        match (is_dot, is_y) {
                            (false, true) => {
                                // g depends on Y: chain through the stage update.
                                for j in 0..s {
                                    jac.add(self.vi(kq, i, 2), self.vi(node, j, 0), dt * self.tab.a[i][j] * val);
                                }
                                // Dg u: direct Ydot slot of the velocity rows.
                                jac.add(self.vi(kq, i, 3), self.vi(node, i, 0), val);
                            }
                            (false, false) => {
                                jac.add(self.vi(kq, i, 2), self.vi(node, i, 2), val);
                                jac.add(self.vi(kq, i, 3), self.vi(node, i, 3), val);
                            }
                            (true, true) => {
                                for j in 0..s {
                                    jac.add(self.vi(kq, i, 3), self.vi(node, j, 0), dt * self.tab.a[i][j] * val);
                                }
                            }
                            (true, false) => {
                                jac.add(self.vi(kq, i, 3), self.vi(node, i, 2), val);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Converged internal data of one step, for consumers that re-solve the
/// field subsystem against the same mesh motion.
#[derive(Debug, Clone)]
pub struct CtStepTrace {
    /// Stage configurations at the solution.
    pub stage_states: Vec<DofState>,
    /// Stage velocities at the solution, interleaved.
    pub stage_u: Vec<Vec<f64>>,
    /// Endpoint mesh after the position re-solve, full array.
    pub end_x: Vec<f64>,
}

/// One step of the control-theoretic integrator. `dt` may be negative
/// (symmetric pairs are exactly reversible that way); it must be nonzero.
pub fn ct_step(
    density: &dyn Density,
    constraint: &ConstraintSet,
    tab: &PartitionedTableau,
    dt: f64,
    from: &CtState,
    opts: &CtOptions,
) -> Result<CtState> {
    Ok(ct_step_traced(density, constraint, tab, dt, from, opts)?.0)
}

/// [`ct_step`] that also returns the converged stage data.
pub fn ct_step_traced(
    density: &dyn Density,
    constraint: &ConstraintSet,
    tab: &PartitionedTableau,
    dt: f64,
    from: &CtState,
    opts: &CtOptions,
) -> Result<(CtState, CtStepTrace)> {
    assert!(dt != 0.0, "zero step size");
    let n = from.state.n();
    assert_eq!(from.p.len(), n);
    let s = tab.stages();
    let floor = opts.floor_frac * from.state.dx();

    // Predictor: freeze the consistent velocity, advect the mesh along c.
    let base_cells = from.state.cells_with_floor(floor)?;
    let kg = kinetic_gradient(&from.state, &base_cells, &from.u);
    let pg = potential_gradient(&from.state, &base_cells, self_density_ref(density));
    let mut z0 = vec![0.0; 4 * s * n];
    let mut sys = CtSystem {
        density,
        constraint,
        tab,
        dt,
        n,
        base: &from.state,
        pn: &from.p,
        floor,
        geo_err: None,
    };
    for i in 0..s {
        // Mesh prediction must stay monotone or Newton cannot start.
        let mut x: Vec<f64> = (1..=n)
            .map(|k| from.state.x()[k] + tab.c[i] * dt * from.u[ix(k)])
            .collect();
        let monotone = x.windows(2).all(|w| w[1] > w[0])
            && x[0] > floor
            && from.state.xmax() - x[n - 1] > floor;
        if !monotone {
            x = from.state.x()[1..=n].to_vec();
        }
        for k in 1..=n {
            z0[sys.vi(k, i, 0)] = from.u[iy(k)];
            z0[sys.vi(k, i, 1)] = kg[iy(k)] - pg[iy(k)];
            z0[sys.vi(k, i, 2)] = x[k - 1];
            z0[sys.vi(k, i, 3)] = from.u[ix(k)];
        }
    }

    let sol = newton_solve(&mut sys, &z0, &opts.newton).map_err(|e| sys.geo_err.take().unwrap_or(e))?;
    let z = sol.x;

    let mut y = from.state.y().to_vec();
    let mut p = from.p.clone();
    for k in 1..=n {
        for j in 0..s {
            y[k] += dt * tab.b[j] * z[sys.vi(k, j, 0)];
            p[k - 1] += dt * tab.b_bar[j] * z[sys.vi(k, j, 1)];
        }
    }
    // Endpoint mesh: re-solve the position constraint at the new field.
    // Guess: weight-averaged mesh motion, else the last stage mesh, else
    // the previous mesh.
    let mut guesses: Vec<Vec<f64>> = Vec::new();
    let mut xw = from.state.x().to_vec();
    for k in 1..=n {
        for j in 0..s {
            xw[k] += dt * tab.b[j] * z[sys.vi(k, j, 3)];
        }
    }
    guesses.push(xw);
    if tab.stiffly_accurate() {
        let mut xs = from.state.x().to_vec();
        for k in 1..=n {
            xs[k] = z[sys.vi(k, s - 1, 2)];
        }
        guesses.push(xs);
    }
    guesses.push(from.state.x().to_vec());
    let mut solved: Option<DofState> = None;
    let mut last_err: Option<Error> = None;
    for guess in guesses {
        if !guess.windows(2).all(|w| w[1] - w[0] > floor) {
            continue;
        }
        let cand = DofState::from_arrays(y.clone(), guess);
        match crate::constraints::solve_positions(constraint, &cand, opts.floor_frac) {
            Ok(stt) => {
                solved = Some(stt);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let state = solved.ok_or_else(|| {
        last_err.unwrap_or(Error::NoConvergence { iterations: 0, residual: f64::NAN, history: vec![] })
    })?;

    let stages = sys.stages(&z).expect("converged state is valid");
    let trace = CtStepTrace {
        stage_states: stages.iter().map(|st| st.state.clone()).collect(),
        stage_u: stages.iter().map(|st| st.u.clone()).collect(),
        end_x: state.x().to_vec(),
    };
    let u = velocity_from_momentum(&state, constraint, &p)?;
    Ok((CtState { t: from.t + dt, state, p, u }, trace))
}

// Trait-object identity helper: keeps the call sites above uniform.
fn self_density_ref(d: &dyn Density) -> &dyn Density {
    d
}

/// Integrates `nsteps` steps, invoking `sink` after each accepted step.
/// Failures are tagged with the step index and time at which they occurred.
pub fn ct_integrate(
    density: &dyn Density,
    constraint: &ConstraintSet,
    tab: &PartitionedTableau,
    dt: f64,
    nsteps: usize,
    init: CtState,
    opts: &CtOptions,
    mut sink: impl FnMut(&CtState),
) -> Result<CtState> {
    let mut cur = init;
    for step in 0..nsteps {
        cur = ct_step(density, constraint, tab, dt, &cur, opts).map_err(|e| Error::StepFailed {
            step: step + 1,
            t: cur.t,
            source: Box::new(e),
        })?;
        sink(&cur);
    }
    Ok(cur)
}

/// Fixed-mesh counterpart: the same partitioned Runge-Kutta discretization
/// of the field-only system on a frozen mesh (no constraint, `Xdot = 0`).
/// With the uniform constraint, [`ct_step`] must reproduce this map exactly;
/// that equivalence is the correctness anchor of the whole stage system.
pub fn ct_step_frozen_mesh(
    density: &dyn Density,
    tab: &PartitionedTableau,
    dt: f64,
    from: &CtState,
    opts: &CtOptions,
) -> Result<CtState> {
    assert!(dt != 0.0, "zero step size");
    let n = from.state.n();
    let s = tab.stages();
    let floor = opts.floor_frac * from.state.dx();
    let mut sys = FrozenSystem {
        density,
        tab,
        dt,
        n,
        base: &from.state,
        pn: &from.p,
        floor,
        prescribed: None,
        geo_err: None,
    };
    let base_cells = from.state.cells_with_floor(floor)?;
    let kg = kinetic_gradient(&from.state, &base_cells, &from.u);
    let pg = potential_gradient(&from.state, &base_cells, density);
    let mut z0 = vec![0.0; 2 * s * n];
    for i in 0..s {
        for k in 1..=n {
            z0[sys.vi(k, i, 0)] = from.u[iy(k)];
            z0[sys.vi(k, i, 1)] = kg[iy(k)] - pg[iy(k)];
        }
    }
    let sol = newton_solve(&mut sys, &z0, &opts.newton).map_err(|e| sys.geo_err.take().unwrap_or(e))?;
    let z = sol.x;
    let mut y = from.state.y().to_vec();
    let mut p = from.p.clone();
    for k in 1..=n {
        for j in 0..s {
            y[k] += dt * tab.b[j] * z[sys.vi(k, j, 0)];
            p[k - 1] += dt * tab.b_bar[j] * z[sys.vi(k, j, 1)];
        }
    }
    let state = DofState::from_arrays(y, from.state.x().to_vec());
    // Field velocity from the momenta on the fixed mesh; mesh velocity zero.
    let cells = state.cells_with_floor(floor)?;
    let m = assemble_mass_matrix(&state, &cells);
    let mut a = Banded::zeros(n, 1, 1);
    for k in 1..=n {
        for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
            a.add(k - 1, mm - 1, m.get(iy(k), iy(mm)));
        }
    }
    let mut ydot = p.clone();
    let piv = a.factorize()?;
    a.solve_factored(&piv, &mut ydot);
    let u: Vec<f64> = (1..=n).flat_map(|k| [ydot[k - 1], 0.0]).collect();
    Ok(CtState { t: from.t + dt, state, p, u })
}

/// Re-solves one step of the field subsystem alone, with the mesh motion
/// (stage configurations and stage mesh rates) prescribed from a converged
/// step trace. The full stepper's field result must coincide with this
/// partitioned Runge-Kutta map whenever the trace comes from the same
/// starting point, which is the structural claim behind the index-1
/// formulation. Returns the endpoint field values (full array) and field
/// momenta.
pub fn ct_step_prescribed_mesh(
    density: &dyn Density,
    tab: &PartitionedTableau,
    dt: f64,
    from: &CtState,
    trace: &CtStepTrace,
    opts: &CtOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    assert!(dt != 0.0, "zero step size");
    let n = from.state.n();
    let s = tab.stages();
    assert_eq!(trace.stage_states.len(), s);
    assert_eq!(trace.stage_u.len(), s);
    let floor = opts.floor_frac * from.state.dx();
    let mut sys = FrozenSystem {
        density,
        tab,
        dt,
        n,
        base: &from.state,
        pn: &from.p,
        floor,
        prescribed: Some((&trace.stage_states, &trace.stage_u)),
        geo_err: None,
    };
    let base_cells = from.state.cells_with_floor(floor)?;
    let kg = kinetic_gradient(&from.state, &base_cells, &from.u);
    let pg = potential_gradient(&from.state, &base_cells, density);
    let mut z0 = vec![0.0; 2 * s * n];
    for i in 0..s {
        for k in 1..=n {
            z0[sys.vi(k, i, 0)] = from.u[iy(k)];
            z0[sys.vi(k, i, 1)] = kg[iy(k)] - pg[iy(k)];
        }
    }
    let sol = newton_solve(&mut sys, &z0, &opts.newton).map_err(|e| sys.geo_err.take().unwrap_or(e))?;
    let z = sol.x;
    let mut y = from.state.y().to_vec();
    let mut p = from.p.clone();
    for k in 1..=n {
        for j in 0..s {
            y[k] += dt * tab.b[j] * z[sys.vi(k, j, 0)];
            p[k - 1] += dt * tab.b_bar[j] * z[sys.vi(k, j, 1)];
        }
    }
    Ok((y, p))
}

struct FrozenSystem<'a> {
    density: &'a dyn Density,
    tab: &'a PartitionedTableau,
    dt: f64,
    n: usize,
    base: &'a DofState,
    pn: &'a [f64],
    floor: f64,
    /// Per-stage mesh configurations and mesh velocities to run the field
    /// subsystem against; the base mesh at rest when absent.
    prescribed: Option<(&'a [DofState], &'a [Vec<f64>])>,
    geo_err: Option<Error>,
}

impl FrozenSystem<'_> {
    #[inline]
    fn vi(&self, k: usize, i: usize, slot: usize) -> usize {
        2 * self.tab.stages() * (k - 1) + 2 * i + slot
    }

    fn stages(&mut self, z: &[f64]) -> Option<Vec<StageEval>> {
        let s = self.tab.stages();
        let n = self.n;
        let mut out = Vec::with_capacity(s);
        for i in 0..s {
            let mut y = self.base.y().to_vec();
            for k in 1..=n {
                for j in 0..s {
                    y[k] += self.dt * self.tab.a[i][j] * z[self.vi(k, j, 0)];
                }
            }
            let x = match self.prescribed {
                Some((sx, _)) => sx[i].x().to_vec(),
                None => self.base.x().to_vec(),
            };
            let state = DofState::from_arrays(y, x);
            if let Err(e) = state.cells_with_floor(self.floor) {
                self.geo_err = Some(e);
                return None;
            }
            let u: Vec<f64> = (1..=n)
                .flat_map(|k| {
                    let xdot = match self.prescribed {
                        Some((_, su)) => su[i][ix(k)],
                        None => 0.0,
                    };
                    [z[self.vi(k, i, 0)], xdot]
                })
                .collect();
            out.push(StageEval { state, u });
        }
        Some(out)
    }
}

impl NonlinearSystem for FrozenSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.tab.stages() * self.n
    }

    fn bandwidths(&self) -> (usize, usize) {
        let w = 4 * self.tab.stages() - 1;
        (w, w)
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) {
        let Some(stages) = self.stages(z) else {
            out.iter_mut().for_each(|v| *v = f64::INFINITY);
            return;
        };
        let n = self.n;
        for (i, st) in stages.iter().enumerate() {
            let cells = st.state.cells_with_floor(self.floor).expect("validated");
            let mu = mass_apply(&st.state, &cells, &st.u);
            let kg = kinetic_gradient(&st.state, &cells, &st.u);
            let pg = potential_gradient(&st.state, &cells, self.density);
            for k in 1..=n {
                let mut p = self.pn[k - 1];
                for j in 0..self.tab.stages() {
                    p += self.dt * self.tab.a_bar[i][j] * z[self.vi(k, j, 1)];
                }
                out[self.vi(k, i, 0)] = mu[iy(k)] - p;
                out[self.vi(k, i, 1)] = z[self.vi(k, i, 1)] - (kg[iy(k)] - pg[iy(k)]);
            }
        }
    }

    fn jacobian(&mut self, z: &[f64], jac: &mut Banded) {
        let Some(stages) = self.stages(z) else {
            return;
        };
        let n = self.n;
        let s = self.tab.stages();
        let dt = self.dt;
        for (i, st) in stages.iter().enumerate() {
            let cells = st.state.cells_with_floor(self.floor).expect("validated");
            let m = assemble_mass_matrix(&st.state, &cells);
            let dmu = mass_apply_jacobian(&st.state, &cells, &st.u);
            let hq = kinetic_hessian(&st.state, &cells, &st.u);
            let ph = potential_hessian(&st.state, &cells, self.density);
            for k in 1..=n {
                let r_mom = self.vi(k, i, 0);
                let r_force = self.vi(k, i, 1);
                for mm in k.saturating_sub(1).max(1)..=(k + 1).min(n) {
                    jac.add(r_mom, self.vi(mm, i, 0), m.get(iy(k), iy(mm)));
                    jac.add(r_force, self.vi(mm, i, 0), -dmu.get(iy(mm), iy(k)));
                    for j in 0..s {
                        let hv = hq.get(iy(k), iy(mm)) - ph.get(iy(k), iy(mm));
                        jac.add(r_mom, self.vi(mm, j, 0), dt * self.tab.a[i][j] * dmu.get(iy(k), iy(mm)));
                        jac.add(r_force, self.vi(mm, j, 0), -dt * self.tab.a[i][j] * hv);
                    }
                }
                for j in 0..s {
                    jac.add(r_mom, self.vi(k, j, 1), -dt * self.tab.a_bar[i][j]);
                }
                jac.add(r_force, self.vi(k, i, 1), 1.0);
            }
        }
    }
}
