//! Continuum field-theory data: Lagrangian densities and Sine-Gordon
//! reference solutions.
//!
//! The Lagrangians handled by this crate have the first-order form
//! `L = 1/2 phi_t^2 - R(phi_X, phi)` with field energy density
//! `e = 1/2 phi_t^2 + R(phi_X, phi)`. A [`Density`] supplies `R` and its
//! partial derivatives, plus cell averages of `R` along a linear interpolant
//! (the building block of the moving-mesh finite-element potential). The
//! default cell averages use 5-point Gauss-Legendre quadrature; the
//! [`SineGordon`] instance overrides them with closed forms.
//!
//! Verified here against independent oracles:
//! * soliton / two-soliton values and derivatives at fixed points
//!   (high-precision arithmetic, frozen into the tests),
//! * the Sine-Gordon PDE residual of both solutions under central
//!   finite differences,
//! * bounce period `T(25, 0.9) = 13.8378604621786889...`,
//! * kink energies `8/sqrt(1-v^2)` and `16/sqrt(1-v^2)`.

use crate::error::{Error, Result};

/// 5-point Gauss-Legendre nodes and weights on `[-1, 1]`.
pub(crate) const GL5_NODES: [f64; 5] = [
    -0.906179845938664,
    -0.5384693101056831,
    0.0,
    0.5384693101056831,
    0.906179845938664,
];
pub(crate) const GL5_WEIGHTS: [f64; 5] = [
    0.23692688505618908,
    0.47862867049936647,
    0.5688888888888889,
    0.47862867049936647,
    0.23692688505618908,
];

/// Spatial density `R(phi_X, phi)` of a Lagrangian `1/2 phi_t^2 - R`.
///
/// `cell_average*` integrate `R` along the linear interpolant
/// `phi(tau) = y_l + tau (y_r - y_l)`, `tau` in `[0, 1]`, at fixed slope
/// `gamma`; they are what the semi-discrete potential assembly consumes.
/// Implementors only have to provide `r` and its first partials; default
/// cell averages use quadrature, with finite differences (step `1e-6`) for
/// the second derivatives that the implicit solvers want. Closed-form
/// overrides (as in [`SineGordon`]) make those exact.
pub trait Density: Sync {
    fn r(&self, phi_x: f64, phi: f64) -> f64;
    fn dr_dphi_x(&self, phi_x: f64, phi: f64) -> f64;
    fn dr_dphi(&self, phi_x: f64, phi: f64) -> f64;

    /// `integral_0^1 R(gamma, y_l + tau (y_r - y_l)) dtau`.
    fn cell_average(&self, gamma: f64, y_l: f64, y_r: f64) -> f64 {
        let mut acc = 0.0;
        for (x, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            let tau = 0.5 * (x + 1.0);
            acc += 0.5 * w * self.r(gamma, y_l + tau * (y_r - y_l));
        }
        acc
    }

    /// Gradient of [`Density::cell_average`] with respect to `(gamma, y_l, y_r)`.
    fn cell_average_grad(&self, gamma: f64, y_l: f64, y_r: f64) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (x, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            let tau = 0.5 * (x + 1.0);
            let phi = y_l + tau * (y_r - y_l);
            let w = 0.5 * w;
            g[0] += w * self.dr_dphi_x(gamma, phi);
            let dphi = self.dr_dphi(gamma, phi);
            g[1] += w * dphi * (1.0 - tau);
            g[2] += w * dphi * tau;
        }
        g
    }

    /// Symmetric Hessian of [`Density::cell_average`] in `(gamma, y_l, y_r)`,
    /// row-major. The default differentiates the first partials numerically.
    fn cell_average_hess(&self, gamma: f64, y_l: f64, y_r: f64) -> [[f64; 3]; 3] {
        let mut h = [[0.0; 3]; 3];
        for (x, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            let tau = 0.5 * (x + 1.0);
            let phi = y_l + tau * (y_r - y_l);
            let w = 0.5 * w;
            let hx = 1e-6 * (1.0 + gamma.abs());
            let hp = 1e-6 * (1.0 + phi.abs());
            let r11 = (self.dr_dphi_x(gamma + hx, phi) - self.dr_dphi_x(gamma - hx, phi)) / (2.0 * hx);
            let r12 = (self.dr_dphi_x(gamma, phi + hp) - self.dr_dphi_x(gamma, phi - hp)) / (2.0 * hp);
            let r22 = (self.dr_dphi(gamma, phi + hp) - self.dr_dphi(gamma, phi - hp)) / (2.0 * hp);
            h[0][0] += w * r11;
            h[0][1] += w * r12 * (1.0 - tau);
            h[0][2] += w * r12 * tau;
            h[1][1] += w * r22 * (1.0 - tau) * (1.0 - tau);
            h[1][2] += w * r22 * tau * (1.0 - tau);
            h[2][2] += w * r22 * tau * tau;
        }
        h[1][0] = h[0][1];
        h[2][0] = h[0][2];
        h[2][1] = h[1][2];
        h
    }
}

/// Sine-Gordon density `R = 1/2 phi_X^2 + 1 - cos(phi)`, with closed-form
/// cell averages: the mean of `cos` over a linear interpolant is
/// `(sin y_r - sin y_l)/(y_r - y_l)`, evaluated through the stable product
/// form `cos(m) sinc(d/2)` with `m` the midpoint and `d = y_r - y_l`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SineGordon;

/// `sin(x)/x` with the removable singularity filled by its series.
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// `(sin v - sin u)/(v - u)`, the mean of `cos` over `[u, v]`.
pub(crate) fn sin_mean(u: f64, v: f64) -> f64 {
    let d = v - u;
    let m = 0.5 * (u + v);
    m.cos() * sinc(0.5 * d)
}

/// First partials of [`sin_mean`]; series branch below `|v - u| = 1e-3`
/// where the direct quotient forms lose accuracy to cancellation.
pub(crate) fn sin_mean_grad(u: f64, v: f64) -> (f64, f64) {
    let d = v - u;
    let m = 0.5 * (u + v);
    if d.abs() < 1e-3 {
        let (sm, cm) = m.sin_cos();
        let su = -0.5 * sm + cm * d / 12.0 + sm * d * d / 48.0;
        let sv = -0.5 * sm - cm * d / 12.0 + sm * d * d / 48.0;
        (su, sv)
    } else {
        let s = sin_mean(u, v);
        ((s - u.cos()) / d, (v.cos() - s) / d)
    }
}

/// Second partials `(s_uu, s_uv, s_vv)` of [`sin_mean`].
pub(crate) fn sin_mean_hess(u: f64, v: f64) -> (f64, f64, f64) {
    let d = v - u;
    let m = 0.5 * (u + v);
    if d.abs() < 1e-3 {
        let (sm, cm) = m.sin_cos();
        let d2 = d * d;
        let suu = -cm / 3.0 - sm * d / 12.0 + cm * d2 / 60.0;
        let suv = -cm / 6.0 + cm * d2 / 240.0;
        let svv = -cm / 3.0 + sm * d / 12.0 + cm * d2 / 60.0;
        (suu, suv, svv)
    } else {
        let (su, sv) = sin_mean_grad(u, v);
        let suu = (2.0 * su + u.sin()) / d;
        let suv = (sv - su) / d;
        let svv = -(v.sin() + 2.0 * sv) / d;
        (suu, suv, svv)
    }
}

impl Density for SineGordon {
    fn r(&self, phi_x: f64, phi: f64) -> f64 {
        0.5 * phi_x * phi_x + 1.0 - phi.cos()
    }

    fn dr_dphi_x(&self, phi_x: f64, _phi: f64) -> f64 {
        phi_x
    }

    fn dr_dphi(&self, _phi_x: f64, phi: f64) -> f64 {
        phi.sin()
    }

    fn cell_average(&self, gamma: f64, y_l: f64, y_r: f64) -> f64 {
        0.5 * gamma * gamma + 1.0 - sin_mean(y_l, y_r)
    }

    fn cell_average_grad(&self, gamma: f64, y_l: f64, y_r: f64) -> [f64; 3] {
        let (su, sv) = sin_mean_grad(y_l, y_r);
        [gamma, -su, -sv]
    }

    fn cell_average_hess(&self, _gamma: f64, y_l: f64, y_r: f64) -> [[f64; 3]; 3] {
        let (suu, suv, svv) = sin_mean_hess(y_l, y_r);
        [[1.0, 0.0, 0.0], [0.0, -suu, -suv], [0.0, -suv, -svv]]
    }
}

/// Single Sine-Gordon kink `4 arctan exp((X - X0 - v t)/sqrt(1 - v^2))`.
pub fn soliton(x: f64, t: f64, x0: f64, v: f64) -> f64 {
    let s = (1.0 - v * v).sqrt();
    4.0 * ((x - x0 - v * t) / s).exp().atan()
}

/// `d/dX` of [`soliton`]: `(2/s) sech(theta)`.
pub fn soliton_dx(x: f64, t: f64, x0: f64, v: f64) -> f64 {
    let s = (1.0 - v * v).sqrt();
    let theta = (x - x0 - v * t) / s;
    2.0 / (s * theta.cosh())
}

/// `d/dt` of [`soliton`]: `-(2 v/s) sech(theta)`.
pub fn soliton_dt(x: f64, t: f64, x0: f64, v: f64) -> f64 {
    -v * soliton_dx(x, t, x0, v)
}

/// `sinh(a)/cosh(b)` in overflow-safe exponential form.
fn sinh_over_cosh(a: f64, b: f64) -> f64 {
    let (sa, aa) = (a.signum(), a.abs());
    let bb = b.abs();
    sa * (aa - bb).exp() * (1.0 - (-2.0 * aa).exp()) / (1.0 + (-2.0 * bb).exp())
}

/// `cosh(a)/cosh(b)` in overflow-safe exponential form.
fn cosh_over_cosh(a: f64, b: f64) -> f64 {
    let (aa, bb) = (a.abs(), b.abs());
    (aa - bb).exp() * (1.0 + (-2.0 * aa).exp()) / (1.0 + (-2.0 * bb).exp())
}

/// Kink-antikink pair `4 arctan(v sinh(X/s) / cosh(v t/s))`, odd in `X` and
/// even in `t`; describes a collision (bounce) at `t = 0`.
pub fn two_soliton(x: f64, t: f64, v: f64) -> f64 {
    let s = (1.0 - v * v).sqrt();
    4.0 * (v * sinh_over_cosh(x / s, v * t / s)).atan()
}

/// `d/dX` of [`two_soliton`].
pub fn two_soliton_dx(x: f64, t: f64, v: f64) -> f64 {
    let s = (1.0 - v * v).sqrt();
    let f = v * sinh_over_cosh(x / s, v * t / s);
    let fx = v / s * cosh_over_cosh(x / s, v * t / s);
    4.0 * fx / (1.0 + f * f)
}

/// `d/dt` of [`two_soliton`].
pub fn two_soliton_dt(x: f64, t: f64, v: f64) -> f64 {
    let s = (1.0 - v * v).sqrt();
    let (a, b) = (x / s, v * t / s);
    let f = v * sinh_over_cosh(a, b);
    // d/dt of cosh(vt/s)^{-1} brings a factor -(v/s) tanh(b).
    let ft = -v * v / s * b.tanh() * sinh_over_cosh(a, b);
    4.0 * ft / (1.0 + f * f)
}

/// Half-period of the reflected single soliton on `[0, Xmax]`: the positive
/// root `T` of `two_soliton(Xmax/2, T) = pi`, found by bracketing bisection
/// plus a Newton polish to `|residual| <= tol`.
///
/// Requires `v sinh(Xmax/(2 s)) > 1`, otherwise the wall collision never
/// reaches phase `pi` and no bounce time exists.
pub fn find_bounce_time(xmax: f64, v: f64, tol: f64) -> Result<f64> {
    let s = (1.0 - v * v).sqrt();
    let half = 0.5 * xmax;
    if !(v * (half / s).sinh() > 1.0) {
        return Err(Error::Config(format!(
            "no bounce time: v sinh(Xmax/(2 sqrt(1-v^2))) = {:.3e} <= 1",
            v * (half / s).sinh()
        )));
    }
    let r = |t: f64| two_soliton(half, t, v) - std::f64::consts::PI;
    // r(0) > 0 and r is strictly decreasing in t; expand until r(hi) < 0.
    let mut hi = 1.0;
    while r(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::NoConvergence { iterations: 0, residual: r(hi), history: vec![] });
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if r(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..5 {
        let res = r(t);
        if res.abs() <= tol {
            break;
        }
        t -= res / two_soliton_dt(half, t, v);
    }
    if r(t).abs() > tol {
        return Err(Error::NoConvergence { iterations: 85, residual: r(t), history: vec![] });
    }
    Ok(t)
}

/// Reference solution for a single soliton bouncing between reflecting walls
/// of `[0, Xmax]`: phase-shifted restrictions of the two-soliton solution,
/// glued with period `4 T`. `tbounce` is the output of [`find_bounce_time`].
///
/// The gluing error and the mismatch with the single soliton at `t = 0` are
/// of the order of the neglected image tails, about `1e-12` for
/// `Xmax = 25, v = 0.9`.
pub fn nearly_exact_bounce(x: f64, t: f64, xmax: f64, v: f64, tbounce: f64) -> f64 {
    let period = 4.0 * tbounce;
    let tau = t.rem_euclid(period);
    if tau < 2.0 * tbounce {
        two_soliton(x - xmax, tau - tbounce, v) + 2.0 * std::f64::consts::PI
    } else {
        two_soliton(x, tau - 3.0 * tbounce, v)
    }
}

/// Field energy `integral_0^Xmax [1/2 phi_t^2 + R(phi_X, phi)] dX` of the
/// configuration `(profile, profile_t)`, by composite 5-point Gauss-Legendre
/// quadrature on `nquad` uniform panels. `phi_X` is taken from `profile` by
/// central differences (step `1e-5`), accurate to ~1e-8 here.
pub fn continuum_energy(
    profile: impl Fn(f64) -> f64,
    profile_t: impl Fn(f64) -> f64,
    density: &dyn Density,
    xmax: f64,
    nquad: usize,
) -> f64 {
    assert!(nquad > 0 && xmax > 0.0);
    let h = xmax / nquad as f64;
    let fd = 1e-5;
    let mut acc = 0.0;
    for p in 0..nquad {
        let mid = (p as f64 + 0.5) * h;
        for (xn, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            let x = mid + 0.5 * h * xn;
            let phi_t = profile_t(x);
            let phi_x = (profile(x + fd) - profile(x - fd)) / (2.0 * fd);
            acc += 0.5 * h * w * (0.5 * phi_t * phi_t + density.r(phi_x, profile(x)));
        }
    }
    acc
}

/// Energy of a single kink travelling at `v = 0.9`: `8 / sqrt(1 - v^2)`.
pub const E_KINK: f64 = 18.35325870964494;

/// Energy of the symmetric kink-antikink pair with `v = 0.9`: twice the
/// single-kink value.
pub const E_PAIR: f64 = 36.70651741928988;
