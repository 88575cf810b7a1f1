//! Initial data construction: mesh, field, velocities, and full phase
//! points for either integration strategy.
//!
//! A cold start has to place the nodes *and* sample the field at the same
//! time. Equidistributing an adaptive monitor against a field that stays
//! frozen at uniform samples is typically infeasible (the frozen samples
//! fix a lower bound on the total monitor content that can exceed the
//! domain budget), so the solve here slaves the field to the profile:
//! whenever a node moves, its field value follows `a(X)`. A short homotopy
//! in the adaptivity strength walks from the uniform mesh (always feasible)
//! to the requested monitor, which converges from arbitrary profiles
//! without any manual mesh seeding.

use crate::constraints::{ConstraintJacobian, ConstraintSet};
use crate::error::{Error, Result};
use crate::fieldtheory::Density;
use crate::integrator_ct::{ct_state, momentum_from_velocity, CtState};
use crate::integrator_lm::{lm_state, LmState};
use crate::semidiscrete::{ix, iy, DofState, MeshConfig};
use crate::solver::{newton_solve, Banded, NewtonOptions, NonlinearSystem};

/// Continuum initial data `phi(x, 0) = value(x)`, `phi_t(x, 0) = rate(x)`.
/// The slope is used to couple node motion to field motion; when absent it
/// is taken by central differences.
pub struct InitialProfile<'a> {
    pub value: &'a (dyn Fn(f64) -> f64 + Sync),
    pub slope: Option<&'a (dyn Fn(f64) -> f64 + Sync)>,
    pub rate: &'a (dyn Fn(f64) -> f64 + Sync),
}

impl InitialProfile<'_> {
    pub fn slope_at(&self, x: f64) -> f64 {
        match self.slope {
            Some(s) => s(x),
            None => {
                let h = 1e-6 * (1.0 + x.abs());
                ((self.value)(x + h) - (self.value)(x - h)) / (2.0 * h)
            }
        }
    }
}

/// Options of the initial-data solves.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InitOptions {
    pub newton: NewtonOptions,
    /// Homotopy stages walking the adaptivity strength up from zero.
    pub stages: usize,
    /// Mesh-crossing floor as a fraction of the reference spacing.
    pub floor_frac: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        let mut newton = NewtonOptions::default();
        newton.max_iters = 80;
        InitOptions { newton, stages: 10, floor_frac: 1e-8 }
    }
}

/// Node positions as the unknowns; the field follows the profile.
struct SlavedSystem<'a> {
    profile: &'a InitialProfile<'a>,
    constraint: ConstraintSet,
    mesh: &'a MeshConfig,
    floor: f64,
}

impl SlavedSystem<'_> {
    fn build_state(&self, xs: &[f64]) -> DofState {
        let n = self.mesh.n;
        let mut x = Vec::with_capacity(n + 2);
        let mut y = Vec::with_capacity(n + 2);
        x.push(0.0);
        y.push(self.mesh.y_left);
        for &xi in xs {
            x.push(xi);
            y.push((self.profile.value)(xi));
        }
        x.push(self.mesh.xmax);
        y.push(self.mesh.y_right);
        DofState::from_arrays(y, x)
    }
}

impl NonlinearSystem for SlavedSystem<'_> {
    fn dim(&self) -> usize {
        self.mesh.n
    }

    fn bandwidths(&self) -> (usize, usize) {
        (1, 1)
    }

    fn residual(&mut self, xs: &[f64], out: &mut [f64]) {
        let state = self.build_state(xs);
        match state.cells_with_floor(self.floor) {
            Ok(cells) => {
                let g = self.constraint.evaluate(&state, &cells);
                out.copy_from_slice(&g);
            }
            Err(_) => out.iter_mut().for_each(|v| *v = f64::INFINITY),
        }
    }

    fn jacobian(&mut self, xs: &[f64], jac: &mut Banded) {
        let state = self.build_state(xs);
        let Ok(cells) = state.cells_with_floor(self.floor) else {
            return;
        };
        let dg = self.constraint.jacobian(&state, &cells);
        // Chain rule through the slaving y = a(X): a y-column at node k
        // folds into the X-column scaled by the local slope.
        dg.for_each_entry(|r, dof, val| {
            let k = dof / 2 + 1; // node index 1..=n
            let col = k - 1;
            if dof % 2 == 0 {
                jac.add(r, col, val * self.profile.slope_at(state.x()[k]));
            } else {
                jac.add(r, col, val);
            }
        });
    }
}

/// Places the nodes so the constraint holds with the field slaved to the
/// profile, then samples the field there. Walks the adaptivity strength up
/// from zero (uniform mesh) in `opts.stages` homotopy stages.
pub fn solve_initial_positions(
    profile: &InitialProfile,
    constraint: &ConstraintSet,
    mesh: &MeshConfig,
    opts: &InitOptions,
) -> Result<DofState> {
    let n = mesh.n;
    let mut xs: Vec<f64> = (1..=n).map(|k| k as f64 * mesh.dx()).collect();
    let targets: Vec<ConstraintSet> = match constraint {
        ConstraintSet::Uniform => vec![ConstraintSet::Uniform],
        ConstraintSet::Arclength { alpha } => {
            let d = opts.stages.max(1);
            (1..=d).map(|k| ConstraintSet::Arclength { alpha: alpha * k as f64 / d as f64 }).collect()
        }
    };
    for target in targets {
        let mut sys = SlavedSystem {
            profile,
            constraint: target,
            mesh,
            floor: opts.floor_frac * mesh.dx(),
        };
        let sol = newton_solve(&mut sys, &xs, &opts.newton)?;
        xs = sol.x;
    }
    let sys = SlavedSystem {
        profile,
        constraint: constraint.clone(),
        mesh,
        floor: opts.floor_frac * mesh.dx(),
    };
    let state = sys.build_state(&xs);
    state.cells_with_floor(sys.floor)?;
    Ok(state)
}

/// Node velocities consistent with both the continuum rate and the
/// constraint: `ydot_k = rate(X_k) + slope(X_k) Xdot_k` chains the field
/// motion through the moving node, and `Dg u = 0` keeps the motion tangent
/// to the constraint manifold.
pub fn solve_initial_velocities(
    profile: &InitialProfile,
    state: &DofState,
    constraint: &ConstraintSet,
) -> Result<Vec<f64>> {
    let n = state.n();
    let cells = state.cells()?;
    let dg = constraint.jacobian(state, &cells);
    let mut a = Banded::zeros(2 * n, 3, 3);
    let mut rhs = vec![0.0; 2 * n];
    for k in 1..=n {
        let row = iy(k);
        a.add(row, iy(k), 1.0);
        a.add(row, ix(k), -profile.slope_at(state.x()[k]));
        rhs[row] = (profile.rate)(state.x()[k]);
    }
    for (r, row6) in dg.rows().iter().enumerate() {
        let row = ix(r + 1);
        for (s, &val) in row6.iter().enumerate() {
            if let Some(dof) = ConstraintJacobian::dof(r, s, n) {
                a.add(row, dof, val);
            }
        }
    }
    let piv = a.factorize().map_err(|_| Error::SingularKkt {
        detail: "initial velocity system singular".into(),
    })?;
    a.solve_factored(&piv, &mut rhs);
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "initial velocities".into() });
    }
    Ok(rhs)
}

/// Full initial phase point for the control-theoretic strategy.
pub fn ct_initial_state(
    profile: &InitialProfile,
    constraint: &ConstraintSet,
    mesh: &MeshConfig,
    opts: &InitOptions,
) -> Result<CtState> {
    let state = solve_initial_positions(profile, constraint, mesh, opts)?;
    let u = solve_initial_velocities(profile, &state, constraint)?;
    let p = momentum_from_velocity(&state, &u)?;
    ct_state(0.0, state, p, constraint)
}

/// Full initial phase point for the multiplier strategy.
pub fn lm_initial_state(
    profile: &InitialProfile,
    constraint: &ConstraintSet,
    mesh: &MeshConfig,
    density: &dyn Density,
    opts: &InitOptions,
) -> Result<LmState> {
    let state = solve_initial_positions(profile, constraint, mesh, opts)?;
    let u = solve_initial_velocities(profile, &state, constraint)?;
    lm_state(0.0, state, u, density, constraint)
}
