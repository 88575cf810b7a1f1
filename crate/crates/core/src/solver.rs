//! Banded linear algebra and a damped Newton iteration.
//!
//! Every linear system in this crate (mass matrices, constraint Jacobians,
//! stage systems of the integrators) couples each mesh node only to its
//! neighbours, so with node-major unknown ordering all Jacobians are banded
//! with a small, N-independent bandwidth. The LU factorization here uses
//! LAPACK-style band storage with partial pivoting; pivoting can fill at most
//! `kl` extra superdiagonals, which the storage reserves up front.

use crate::error::{Error, Result};

/// Square banded matrix with `kl` subdiagonals and `ku` superdiagonals.
///
/// Storage is column-major with `2*kl + ku + 1` rows per column: the extra
/// `kl` rows hold fill produced by row interchanges during factorization.
/// Entry `(i, j)` lives at `data[j*ldab + (kl + ku + i - j)]`.
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

/// Row-interchange record of a banded LU factorization.
#[derive(Debug, Clone)]
pub struct Pivots {
    ipiv: Vec<usize>,
    sign: f64,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        assert!(n > 0, "empty matrix");
        // A bandwidth of n-1 already covers every entry; clamp so small
        // systems can use the same nominal widths as large ones.
        let kl = kl.min(n - 1);
        let ku = ku.min(n - 1);
        let ldab = 2 * kl + ku + 1;
        Banded { n, kl, ku, ldab, data: vec![0.0; ldab * n] }
    }

    /// Dense matrix as a fully-banded instance (used by the FD Jacobian).
    pub fn dense(n: usize) -> Self {
        Self::zeros(n, n.saturating_sub(1), n.saturating_sub(1))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ldab + self.kl + self.ku + i - j
    }

    /// Entry `(i, j)`; zero outside the stored band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.n && j < self.n);
        if i + self.ku + self.kl < j || j + self.kl < i {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Sets entry `(i, j)`. Panics if the entry is outside the declared band.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            i < self.n && j < self.n && i + self.ku >= j && j + self.kl >= i,
            "entry ({i}, {j}) outside band (kl={}, ku={})",
            self.kl,
            self.ku
        );
        let at = self.idx(i, j);
        self.data[at] = v;
    }

    /// Adds `v` to entry `(i, j)`. Panics if outside the declared band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            i < self.n && j < self.n && i + self.ku >= j && j + self.kl >= i,
            "entry ({i}, {j}) outside band (kl={}, ku={})",
            self.kl,
            self.ku
        );
        let at = self.idx(i, j);
        self.data[at] += v;
    }

    /// Zeroes all stored entries (including pivot fill), keeping the shape.
    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `out = A x`. Only valid before factorization.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(out.len(), self.n);
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let ilo = j.saturating_sub(self.ku);
            let ihi = (j + self.kl).min(self.n - 1);
            let xj = x[j];
            for i in ilo..=ihi {
                out[i] += self.data[self.idx(i, j)] * xj;
            }
        }
    }

    /// In-place LU factorization with partial pivoting.
    ///
    /// On success the storage holds L (unit diagonal implied, multipliers in
    /// the subdiagonal band) and U (diagonal plus `ku + kl` superdiagonals);
    /// use [`Banded::solve_factored`] afterwards. Fails with
    /// [`Error::SingularMatrix`] on an exactly-zero pivot column.
    pub fn factorize(&mut self) -> Result<Pivots> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kv = kl + ku; // effective upper bandwidth with fill
        let mut ipiv = vec![0usize; n];
        let mut sign = 1.0;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // Pivot search in column j, rows j..=j+km.
            let mut p = j;
            let mut pmax = self.data[self.idx(j, j)].abs();
            for i in (j + 1)..=(j + km) {
                let v = self.data[self.idx(i, j)].abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            if pmax == 0.0 || !pmax.is_finite() {
                return Err(Error::SingularMatrix { column: j });
            }
            ipiv[j] = p;
            let jhi = (j + kv).min(n - 1);
            if p != j {
                sign = -sign;
                for col in j..=jhi {
                    let a = self.idx(j, col);
                    let b = self.idx(p, col);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(j, j)];
            for i in (j + 1)..=(j + km) {
                let at = self.idx(i, j);
                let l = self.data[at] / pivot;
                self.data[at] = l;
                if l != 0.0 {
                    for col in (j + 1)..=jhi {
                        let u = self.data[self.idx(j, col)];
                        if u != 0.0 {
                            let t = self.idx(i, col);
                            self.data[t] -= l * u;
                        }
                    }
                }
            }
        }
        Ok(Pivots { ipiv, sign })
    }

    /// Solves `A x = b` in place using a factorization from [`Banded::factorize`].
    pub fn solve_factored(&self, piv: &Pivots, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let kv = self.kl + self.ku;
        // Forward: apply interchanges and L.
        for j in 0..n {
            let p = piv.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != 0.0 {
                let ihi = (j + self.kl).min(n - 1);
                for i in (j + 1)..=ihi {
                    b[i] -= self.data[self.idx(i, j)] * bj;
                }
            }
        }
        // Backward: U x = y.
        for i in (0..n).rev() {
            let jhi = (i + kv).min(n - 1);
            let mut s = b[i];
            for j in (i + 1)..=jhi {
                s -= self.data[self.idx(i, j)] * b[j];
            }
            b[i] = s / self.data[self.idx(i, i)];
        }
    }

    /// Determinant from a completed factorization (product of pivots).
    pub fn det_factored(&self, piv: &Pivots) -> f64 {
        let mut d = piv.sign;
        for i in 0..self.n {
            d *= self.data[self.idx(i, i)];
        }
        d
    }
}

/// One-shot banded solve; consumes the matrix.
pub fn lu_banded_solve(mut a: Banded, b: &[f64]) -> Result<Vec<f64>> {
    let piv = a.factorize()?;
    let mut x = b.to_vec();
    a.solve_factored(&piv, &mut x);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "banded solve".into() });
    }
    Ok(x)
}

/// `max_i |v_i|`.
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Square nonlinear system `F(x) = 0` with a banded Jacobian.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;
    /// `(kl, ku)` of the Jacobian.
    fn bandwidths(&self) -> (usize, usize);
    fn residual(&mut self, x: &[f64], out: &mut [f64]);
    /// Fills `jac` (already zeroed) with the Jacobian at `x`.
    fn jacobian(&mut self, x: &[f64], jac: &mut Banded);
}

/// Damping strategy for the Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    None,
    /// Step halving: accept the first trial that reduces the residual norm,
    /// giving up (and keeping the shortest trial step) after `max_halvings`.
    Halving { max_halvings: usize },
}

/// Newton iteration controls. Fields omitted from a JSON configuration
/// fall back to the defaults.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    /// Convergence when the residual infinity-norm drops below this.
    pub tol_residual: f64,
    /// Convergence when the update infinity-norm drops below this.
    pub tol_step: f64,
    pub max_iters: usize,
    pub damping: Damping,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol_residual: 1e-10,
            tol_step: 1e-12,
            max_iters: 50,
            damping: Damping::Halving { max_halvings: 8 },
        }
    }
}

/// Result of a converged Newton iteration.
#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual infinity-norm after each iteration.
    pub history: Vec<f64>,
}

/// Damped Newton iteration on a banded system.
///
/// Each iteration factors the analytic Jacobian, takes the Newton step with
/// optional halving damping, and checks both residual and step tolerances.
/// Non-finite residuals or iterates abort with [`Error::NonFinite`] rather
/// than silently propagating NaN.
pub fn newton_solve(
    sys: &mut dyn NonlinearSystem,
    x0: &[f64],
    opts: &NewtonOptions,
) -> Result<NewtonSolution> {
    let n = sys.dim();
    assert_eq!(x0.len(), n);
    let (kl, ku) = sys.bandwidths();
    let mut jac = Banded::zeros(n, kl.min(n - 1), ku.min(n - 1));
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut rtrial = vec![0.0; n];
    let mut history = Vec::new();

    sys.residual(&x, &mut r);
    let mut rnorm = inf_norm(&r);
    if !rnorm.is_finite() {
        return Err(Error::NonFinite { context: "initial Newton residual".into() });
    }
    for iter in 0..opts.max_iters {
        if rnorm <= opts.tol_residual {
            return Ok(NewtonSolution { x, iterations: iter, residual_norm: rnorm, history });
        }
        jac.clear();
        sys.jacobian(&x, &mut jac);
        let piv = jac.factorize()?;
        step.copy_from_slice(&r);
        jac.solve_factored(&piv, &mut step);
        if !step.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("Newton step at iteration {iter}") });
        }

        let mut lambda = 1.0;
        let mut accepted = false;
        let halvings = match opts.damping {
            Damping::None => 0,
            Damping::Halving { max_halvings } => max_halvings,
        };
        for _ in 0..=halvings {
            for i in 0..n {
                trial[i] = x[i] - lambda * step[i];
            }
            sys.residual(&trial, &mut rtrial);
            let tnorm = inf_norm(&rtrial);
            if tnorm.is_finite() && (tnorm < rnorm || halvings == 0) {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // No trial reduced the residual; keep the shortest step (it may
            // still be making progress through a shallow valley).
            for i in 0..n {
                trial[i] = x[i] - lambda * 2.0 * step[i];
            }
            sys.residual(&trial, &mut rtrial);
        }
        let tnorm = inf_norm(&rtrial);
        if !tnorm.is_finite() {
            return Err(Error::NonFinite { context: format!("Newton residual at iteration {iter}") });
        }
        x.copy_from_slice(&trial);
        r.copy_from_slice(&rtrial);
        rnorm = tnorm;
        history.push(rnorm);
        if lambda * inf_norm(&step) <= opts.tol_step {
            return Ok(NewtonSolution { x, iterations: iter + 1, residual_norm: rnorm, history });
        }
    }
    if rnorm <= opts.tol_residual {
        let iterations = opts.max_iters;
        return Ok(NewtonSolution { x, iterations, residual_norm: rnorm, history });
    }
    Err(Error::NoConvergence { iterations: opts.max_iters, residual: rnorm, history })
}

/// Central-difference Jacobian of `f` at `x`, returned as a dense matrix in
/// banded storage. Test oracle and fallback only; `step` is scaled per
/// component by `1 + |x_j|`.
pub fn fd_jacobian(
    f: &mut dyn FnMut(&[f64], &mut [f64]),
    x: &[f64],
    dim_out: usize,
    step: f64,
) -> Banded {
    let n = x.len();
    let mut jac = Banded::dense(n.max(dim_out));
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; dim_out];
    let mut fm = vec![0.0; dim_out];
    for j in 0..n {
        let h = step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        f(&xp, &mut fp);
        xp[j] = x[j] - h;
        f(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..dim_out {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    jac
}
