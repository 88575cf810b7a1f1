//! Moving-mesh linear finite-element semi-discretization.
//!
//! The field `phi` is interpolated linearly between nodes `(X_i, y_i)`,
//! `i = 0..N+1`, with clamped ends: `X_0 = 0`, `X_{N+1} = Xmax` and
//! `y_0, y_{N+1}` fixed boundary values. Both interior nodal values `y_i`
//! and interior node positions `X_i` are configuration variables, stored
//! interleaved as `q = (y_1, X_1, ..., y_N, X_N)`.
//!
//! Inserting the interpolant into the field Lagrangian gives
//! `L_N(q, qdot) = 1/2 qdot^T M(q) qdot - R_N(q)` where the moving-mesh
//! mass matrix `M(q)` is block tridiagonal and the potential `R_N` sums
//! per-cell averages of the spatial density. Everything in this module is
//! assembled cell by cell: on cell `i` (nodes `i`, `i+1`) with width
//! `delta_i = X_{i+1} - X_i` and slope `gamma_i = (y_{i+1} - y_i)/delta_i`,
//! the kinetic energy is
//!
//! ```text
//!   T_i = delta_i/6 (a^2 + a b + b^2),
//!   a = ydot_i - gamma_i Xdot_i,   b = ydot_{i+1} - gamma_i Xdot_{i+1},
//! ```
//!
//! (`a`, `b` are the Eulerian time derivatives of the interpolant at the
//! cell ends) and the potential contribution is `delta_i` times the average
//! of `R` along the interpolant. `M(q)` is singular exactly where adjacent
//! slopes coincide, which is why the index-3 integrator works with a
//! bordered mass matrix; the closed-form determinant here is the oracle for
//! that statement.
//!
//! The implicit integrators need first and second derivatives of all these
//! objects; the per-cell kernels below supply them analytically and are
//! verified against finite differences in the tests.

use crate::error::{Error, Result};
use crate::fieldtheory::Density;
use crate::solver::Banded;

/// Fixed discretization data: `N` interior nodes on `[0, Xmax]` with clamped
/// boundary values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeshConfig {
    pub n: usize,
    pub xmax: f64,
    pub y_left: f64,
    pub y_right: f64,
}

impl MeshConfig {
    /// Reference (uniform) spacing `Xmax/(N+1)`.
    pub fn dx(&self) -> f64 {
        self.xmax / (self.n + 1) as f64
    }
}

/// Nodal configuration: `y` and `X` arrays of length `N+2` including the
/// clamped boundary entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DofState {
    y: Vec<f64>,
    x: Vec<f64>,
}

/// Per-cell widths and slopes.
#[derive(Debug, Clone)]
pub struct Cells {
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Interior DOF index of the field value at node `k` (1-based).
#[inline]
pub fn iy(k: usize) -> usize {
    2 * (k - 1)
}

/// Interior DOF index of the position of node `k` (1-based).
#[inline]
pub fn ix(k: usize) -> usize {
    2 * (k - 1) + 1
}

impl DofState {
    /// Uniform mesh with `y_i = f(X_i)` at interior nodes and clamped ends.
    pub fn sampled_uniform(mesh: &MeshConfig, f: impl Fn(f64) -> f64) -> Self {
        let n = mesh.n;
        let dx = mesh.dx();
        let mut y = Vec::with_capacity(n + 2);
        let mut x = Vec::with_capacity(n + 2);
        y.push(mesh.y_left);
        x.push(0.0);
        for i in 1..=n {
            let xi = i as f64 * dx;
            x.push(xi);
            y.push(f(xi));
        }
        y.push(mesh.y_right);
        x.push(mesh.xmax);
        DofState { y, x }
    }

    /// From full nodal arrays (boundaries included).
    pub fn from_arrays(y: Vec<f64>, x: Vec<f64>) -> Self {
        assert_eq!(y.len(), x.len());
        assert!(y.len() >= 3, "need at least one interior node");
        DofState { y, x }
    }

    pub fn n(&self) -> usize {
        self.y.len() - 2
    }

    pub fn xmax(&self) -> f64 {
        *self.x.last().unwrap()
    }

    pub fn dx(&self) -> f64 {
        self.xmax() / (self.n() + 1) as f64
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Interleaved interior DOF vector `(y_1, X_1, ..., y_N, X_N)`.
    pub fn interior(&self) -> Vec<f64> {
        let n = self.n();
        let mut q = Vec::with_capacity(2 * n);
        for k in 1..=n {
            q.push(self.y[k]);
            q.push(self.x[k]);
        }
        q
    }

    /// Overwrites the interior DOFs from an interleaved vector.
    pub fn set_interior(&mut self, q: &[f64]) {
        let n = self.n();
        assert_eq!(q.len(), 2 * n);
        for k in 1..=n {
            self.y[k] = q[iy(k)];
            self.x[k] = q[ix(k)];
        }
    }

    /// Cell widths and slopes, with the default mesh-crossing floor
    /// `1e-10 dx`.
    pub fn cells(&self) -> Result<Cells> {
        self.cells_with_floor(1e-10 * self.dx())
    }

    /// Cell widths and slopes; errors with [`Error::MeshCrossing`] if any
    /// width is at or below `floor`.
    pub fn cells_with_floor(&self, floor: f64) -> Result<Cells> {
        let ncell = self.x.len() - 1;
        let mut delta = Vec::with_capacity(ncell);
        let mut gamma = Vec::with_capacity(ncell);
        for i in 0..ncell {
            let d = self.x[i + 1] - self.x[i];
            if d <= floor {
                return Err(Error::MeshCrossing { index: i, delta: d, floor });
            }
            delta.push(d);
            gamma.push((self.y[i + 1] - self.y[i]) / d);
        }
        Ok(Cells { delta, gamma })
    }
}

/// Velocity (or any tangent vector) entry for node `k`, component `c`
/// (0 = field, 1 = position); boundary nodes move with velocity zero.
#[inline]
fn tangent(u: &[f64], n: usize, k: usize, c: usize) -> f64 {
    if k >= 1 && k <= n {
        u[2 * (k - 1) + c]
    } else {
        0.0
    }
}

/// Scatters `v` into an interior-DOF slot if node `k` is interior.
#[inline]
fn scatter(out: &mut [f64], n: usize, k: usize, c: usize, v: f64) {
    if k >= 1 && k <= n {
        out[2 * (k - 1) + c] += v;
    }
}

/// Local cell geometry plus chain-rule data for `(gamma, delta)` as
/// functions of the four local positions in order
/// `(y_l, X_l, y_r, X_r)`.
struct CellGeo {
    delta: f64,
    gamma: f64,
    /// d(gamma)/d(pos_a)
    g: [f64; 4],
    /// d(delta)/d(pos_a)
    d: [f64; 4],
}

impl CellGeo {
    fn new(delta: f64, gamma: f64) -> Self {
        let gd = gamma / delta;
        CellGeo {
            delta,
            gamma,
            g: [-1.0 / delta, gd, 1.0 / delta, -gd],
            d: [0.0, -1.0, 0.0, 1.0],
        }
    }

    /// Second derivatives of `gamma` in the local positions.
    fn gamma_hess(&self, a: usize, b: usize) -> f64 {
        let d2 = self.delta * self.delta;
        match (a.min(b), a.max(b)) {
            (0, 1) => -1.0 / d2,          // y_l, X_l
            (0, 3) => 1.0 / d2,           // y_l, X_r
            (1, 2) => 1.0 / d2,           // X_l, y_r
            (2, 3) => -1.0 / d2,          // y_r, X_r
            (1, 1) => 2.0 * self.gamma / d2,
            (1, 3) => -2.0 * self.gamma / d2,
            (3, 3) => 2.0 * self.gamma / d2,
            _ => 0.0,
        }
    }
}

/// Moving-mesh mass matrix `M(q)` as a symmetric banded matrix
/// (`2N x 2N`, bandwidths 3).
pub fn assemble_mass_matrix(state: &DofState, cells: &Cells) -> Banded {
    let n = state.n();
    let mut m = Banded::zeros(2 * n, 3, 3);
    for i in 0..cells.delta.len() {
        let (delta, gamma) = (cells.delta[i], cells.gamma[i]);
        let block = cell_mass_block(delta, gamma);
        let nodes = [i, i, i + 1, i + 1];
        let comps = [0, 1, 0, 1];
        for a in 0..4 {
            if nodes[a] < 1 || nodes[a] > n {
                continue;
            }
            let ra = 2 * (nodes[a] - 1) + comps[a];
            for b in 0..4 {
                if nodes[b] < 1 || nodes[b] > n {
                    continue;
                }
                let cb = 2 * (nodes[b] - 1) + comps[b];
                m.add(ra, cb, block[a][b]);
            }
        }
    }
    m
}

/// 4x4 kinetic block of one cell in local order `(vy_l, vX_l, vy_r, vX_r)`.
fn cell_mass_block(delta: f64, gamma: f64) -> [[f64; 4]; 4] {
    let d3 = delta / 3.0;
    let d6 = delta / 6.0;
    let g = gamma;
    [
        [d3, -g * d3, d6, -g * d6],
        [-g * d3, g * g * d3, -g * d6, g * g * d6],
        [d6, -g * d6, d3, -g * d3],
        [-g * d6, g * g * d6, -g * d3, g * g * d3],
    ]
}

/// `M(q) u` assembled cell by cell (no matrix needed).
pub fn mass_apply(state: &DofState, cells: &Cells, u: &[f64]) -> Vec<f64> {
    let n = state.n();
    assert_eq!(u.len(), 2 * n);
    let mut out = vec![0.0; 2 * n];
    for i in 0..cells.delta.len() {
        let (delta, gamma) = (cells.delta[i], cells.gamma[i]);
        let a = tangent(u, n, i, 0) - gamma * tangent(u, n, i, 1);
        let b = tangent(u, n, i + 1, 0) - gamma * tangent(u, n, i + 1, 1);
        let pl = delta * (2.0 * a + b) / 6.0;
        let pr = delta * (a + 2.0 * b) / 6.0;
        scatter(&mut out, n, i, 0, pl);
        scatter(&mut out, n, i, 1, -gamma * pl);
        scatter(&mut out, n, i + 1, 0, pr);
        scatter(&mut out, n, i + 1, 1, -gamma * pr);
    }
    out
}

/// Kinetic energy `1/2 u^T M(q) u` from the per-cell closed form.
pub fn kinetic_energy(state: &DofState, cells: &Cells, u: &[f64]) -> f64 {
    let n = state.n();
    assert_eq!(u.len(), 2 * n);
    let mut t = 0.0;
    for i in 0..cells.delta.len() {
        let gamma = cells.gamma[i];
        let a = tangent(u, n, i, 0) - gamma * tangent(u, n, i, 1);
        let b = tangent(u, n, i + 1, 0) - gamma * tangent(u, n, i + 1, 1);
        t += cells.delta[i] * (a * a + a * b + b * b) / 6.0;
    }
    t
}

/// Gradient of the kinetic energy in the positions at fixed velocities:
/// `(d/dq_k) 1/2 u^T M(q) u`.
pub fn kinetic_gradient(state: &DofState, cells: &Cells, u: &[f64]) -> Vec<f64> {
    let n = state.n();
    assert_eq!(u.len(), 2 * n);
    let mut out = vec![0.0; 2 * n];
    for i in 0..cells.delta.len() {
        let geo = CellGeo::new(cells.delta[i], cells.gamma[i]);
        let (tg, td) = cell_kinetic_gd(&geo, state.n(), u, i);
        let nodes = [i, i, i + 1, i + 1];
        let comps = [0, 1, 0, 1];
        for a in 0..4 {
            scatter(&mut out, n, nodes[a], comps[a], tg * geo.g[a] + td * geo.d[a]);
        }
    }
    out
}

/// `(dT/dgamma, dT/ddelta)` of one cell at fixed velocities.
fn cell_kinetic_gd(geo: &CellGeo, n: usize, u: &[f64], i: usize) -> (f64, f64) {
    let gamma = geo.gamma;
    let vxl = tangent(u, n, i, 1);
    let vxr = tangent(u, n, i + 1, 1);
    let a = tangent(u, n, i, 0) - gamma * vxl;
    let b = tangent(u, n, i + 1, 0) - gamma * vxr;
    let tg = -geo.delta * ((2.0 * a + b) * vxl + (a + 2.0 * b) * vxr) / 6.0;
    let td = (a * a + a * b + b * b) / 6.0;
    (tg, td)
}

/// Derivative of `M(q) u` in the positions at fixed `u`:
/// `out[k][m] = d (M u)_k / d q_m`, banded with bandwidths 3.
///
/// Note the two roles of this matrix: it is also the mixed second derivative
/// of the kinetic energy, so `d/du_m` of [`kinetic_gradient`] is its
/// transpose.
pub fn mass_apply_jacobian(state: &DofState, cells: &Cells, u: &[f64]) -> Banded {
    let n = state.n();
    assert_eq!(u.len(), 2 * n);
    let mut out = Banded::zeros(2 * n, 3, 3);
    for i in 0..cells.delta.len() {
        let geo = CellGeo::new(cells.delta[i], cells.gamma[i]);
        let local = cell_mass_apply_jacobian(&geo, n, u, i);
        let nodes = [i, i, i + 1, i + 1];
        let comps = [0, 1, 0, 1];
        for r in 0..4 {
            if nodes[r] < 1 || nodes[r] > n {
                continue;
            }
            let gr = 2 * (nodes[r] - 1) + comps[r];
            for c in 0..4 {
                if nodes[c] < 1 || nodes[c] > n {
                    continue;
                }
                out.add(gr, 2 * (nodes[c] - 1) + comps[c], local[r][c]);
            }
        }
    }
    out
}

/// Local `d (M u)/d pos` block: rows are momentum components
/// `(vy_l, vX_l, vy_r, vX_r)`, columns local positions.
fn cell_mass_apply_jacobian(geo: &CellGeo, n: usize, u: &[f64], i: usize) -> [[f64; 4]; 4] {
    let (delta, gamma) = (geo.delta, geo.gamma);
    let vxl = tangent(u, n, i, 1);
    let vxr = tangent(u, n, i + 1, 1);
    let a = tangent(u, n, i, 0) - gamma * vxl;
    let b = tangent(u, n, i + 1, 0) - gamma * vxr;
    let s1 = 2.0 * a + b;
    let s2 = a + 2.0 * b;
    // d/d(gamma) and d/d(delta) of the four momentum components.
    let dg = [
        delta * (-2.0 * vxl - vxr) / 6.0,
        -delta * s1 / 6.0 + gamma * delta * (2.0 * vxl + vxr) / 6.0,
        delta * (-vxl - 2.0 * vxr) / 6.0,
        -delta * s2 / 6.0 + gamma * delta * (vxl + 2.0 * vxr) / 6.0,
    ];
    let dd = [s1 / 6.0, -gamma * s1 / 6.0, s2 / 6.0, -gamma * s2 / 6.0];
    let mut local = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            local[r][c] = dg[r] * geo.g[c] + dd[r] * geo.d[c];
        }
    }
    local
}

/// Position-position Hessian of the kinetic energy at fixed velocities:
/// `out[k][m] = d^2/dq_k dq_m (1/2 u^T M(q) u)`, banded with bandwidths 3.
pub fn kinetic_hessian(state: &DofState, cells: &Cells, u: &[f64]) -> Banded {
    let n = state.n();
    assert_eq!(u.len(), 2 * n);
    let mut out = Banded::zeros(2 * n, 3, 3);
    for i in 0..cells.delta.len() {
        let geo = CellGeo::new(cells.delta[i], cells.gamma[i]);
        let gamma = geo.gamma;
        let vxl = tangent(u, n, i, 1);
        let vxr = tangent(u, n, i + 1, 1);
        let a = tangent(u, n, i, 0) - gamma * vxl;
        let b = tangent(u, n, i + 1, 0) - gamma * vxr;
        let (tg, _td) = cell_kinetic_gd(&geo, n, u, i);
        let tgg = geo.delta * (vxl * vxl + vxl * vxr + vxr * vxr) / 3.0;
        let tgd = -((2.0 * a + b) * vxl + (a + 2.0 * b) * vxr) / 6.0; // = tg/delta
        let nodes = [i, i, i + 1, i + 1];
        let comps = [0, 1, 0, 1];
        for r in 0..4 {
            if nodes[r] < 1 || nodes[r] > n {
                continue;
            }
            let gr = 2 * (nodes[r] - 1) + comps[r];
            for c in 0..4 {
                if nodes[c] < 1 || nodes[c] > n {
                    continue;
                }
                let v = tgg * geo.g[r] * geo.g[c]
                    + tgd * (geo.g[r] * geo.d[c] + geo.g[c] * geo.d[r])
                    + tg * geo.gamma_hess(r, c);
                out.add(gr, 2 * (nodes[c] - 1) + comps[c], v);
            }
        }
    }
    out
}

/// Semi-discrete potential `R_N(q)`: sum over cells of the cell width times
/// the density's average along the linear interpolant.
pub fn potential(state: &DofState, cells: &Cells, density: &dyn Density) -> f64 {
    let mut r = 0.0;
    for i in 0..cells.delta.len() {
        r += cells.delta[i] * density.cell_average(cells.gamma[i], state.y[i], state.y[i + 1]);
    }
    r
}

/// Gradient of [`potential`] in the interior DOFs.
pub fn potential_gradient(state: &DofState, cells: &Cells, density: &dyn Density) -> Vec<f64> {
    let n = state.n();
    let mut out = vec![0.0; 2 * n];
    for i in 0..cells.delta.len() {
        let (delta, gamma) = (cells.delta[i], cells.gamma[i]);
        let (yl, yr) = (state.y[i], state.y[i + 1]);
        let val = density.cell_average(gamma, yl, yr);
        let gr = density.cell_average_grad(gamma, yl, yr);
        scatter(&mut out, n, i, 0, -gr[0] + delta * gr[1]);
        scatter(&mut out, n, i, 1, gamma * gr[0] - val);
        scatter(&mut out, n, i + 1, 0, gr[0] + delta * gr[2]);
        scatter(&mut out, n, i + 1, 1, -gamma * gr[0] + val);
    }
    out
}

/// Hessian of [`potential`] in the interior DOFs, banded with bandwidths 3.
pub fn potential_hessian(state: &DofState, cells: &Cells, density: &dyn Density) -> Banded {
    let n = state.n();
    let mut out = Banded::zeros(2 * n, 3, 3);
    for i in 0..cells.delta.len() {
        let geo = CellGeo::new(cells.delta[i], cells.gamma[i]);
        let (yl, yr) = (state.y[i], state.y[i + 1]);
        let jg = density.cell_average_grad(geo.gamma, yl, yr);
        let jh = density.cell_average_hess(geo.gamma, yl, yr);
        // Differential of the density coordinates (gamma, y_l, y_r) with
        // respect to each local position.
        let c: [[f64; 3]; 4] = [
            [geo.g[0], 1.0, 0.0],
            [geo.g[1], 0.0, 0.0],
            [geo.g[2], 0.0, 1.0],
            [geo.g[3], 0.0, 0.0],
        ];
        let s: Vec<f64> = (0..4)
            .map(|a| jg[0] * c[a][0] + jg[1] * c[a][1] + jg[2] * c[a][2])
            .collect();
        let nodes = [i, i, i + 1, i + 1];
        let comps = [0, 1, 0, 1];
        for r in 0..4 {
            if nodes[r] < 1 || nodes[r] > n {
                continue;
            }
            let grow = 2 * (nodes[r] - 1) + comps[r];
            for cc in 0..4 {
                if nodes[cc] < 1 || nodes[cc] > n {
                    continue;
                }
                let mut chc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        chc += c[r][p] * jh[p][q] * c[cc][q];
                    }
                }
                let v = geo.d[r] * s[cc]
                    + geo.d[cc] * s[r]
                    + geo.delta * (chc + jg[0] * geo.gamma_hess(r, cc));
                out.add(grow, 2 * (nodes[cc] - 1) + comps[cc], v);
            }
        }
    }
    out
}

/// Generalized force of the semi-discrete Euler-Lagrange equations,
/// `M(q) udot = f(q, u)`:
///
/// `f_k = -dR_N/dq_k + 1/2 u^T (dM/dq_k) u - [d(M u)/dq u]_k`.
pub fn force(state: &DofState, cells: &Cells, u: &[f64], density: &dyn Density) -> Vec<f64> {
    let n = state.n();
    let mut f = kinetic_gradient(state, cells, u);
    let dmu = mass_apply_jacobian(state, cells, u);
    let mut dmu_u = vec![0.0; 2 * n];
    dmu.mul_vec(u, &mut dmu_u);
    let pg = potential_gradient(state, cells, density);
    for k in 0..2 * n {
        f[k] -= dmu_u[k] + pg[k];
    }
    f
}

/// Semi-discrete Lagrangian `L_N = 1/2 u^T M(q) u - R_N(q)` by direct
/// per-cell summation.
pub fn semidiscrete_lagrangian(
    state: &DofState,
    cells: &Cells,
    u: &[f64],
    density: &dyn Density,
) -> f64 {
    kinetic_energy(state, cells, u) - potential(state, cells, density)
}

/// Semi-discrete energy `E_N = 1/2 u^T M(q) u + R_N(q)`.
pub fn discrete_energy(state: &DofState, cells: &Cells, u: &[f64], density: &dyn Density) -> f64 {
    kinetic_energy(state, cells, u) + potential(state, cells, density)
}

/// Closed-form determinant of the moving-mesh mass matrix:
///
/// `det M = delta_0 delta_N (prod_{i=1}^{N-1} delta_i^2) / (9 * 12^{N-1})
///          * prod_{i=1}^{N} (gamma_{i-1} - gamma_i)^2`.
///
/// Zero exactly when two adjacent cells have equal slope (locally collinear
/// nodes), the degeneracy that motivates the bordered formulation of the
/// index-3 integrator.
pub fn mass_determinant_formula(cells: &Cells) -> f64 {
    let ncell = cells.delta.len();
    let n = ncell - 1;
    assert!(n >= 1);
    let mut det = cells.delta[0] * cells.delta[n] / 9.0;
    for i in 1..n {
        det *= cells.delta[i] * cells.delta[i] / 12.0;
    }
    for i in 1..=n {
        let dg = cells.gamma[i - 1] - cells.gamma[i];
        det *= dg * dg;
    }
    det
}
