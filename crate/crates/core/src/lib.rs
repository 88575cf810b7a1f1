//! Moving-mesh (r-adaptive) variational integrators for (1+1)-dimensional
//! scalar Lagrangian field theories, with a Sine-Gordon test bed.
//!
//! A field `phi(X, t)` on a fixed interval is semi-discretized with linear
//! finite elements on a *moving* mesh: both the nodal field values `y_i(t)`
//! and the interior node positions `X_i(t)` are dynamical degrees of freedom.
//! Mesh motion is steered by an equidistribution constraint (arclength by
//! default), and the constrained dynamics are integrated with symplectic
//! partitioned Runge-Kutta methods in two formulations:
//!
//! * [`integrator_ct`] treats the mesh as a control: the constraint is
//!   enforced at every internal stage of the partitioned Runge-Kutta method
//!   and the mesh velocities are determined by the differentiated constraint
//!   (an index-1 differential-algebraic system).
//! * [`integrator_lm`] keeps the mesh variational: the constraint enters the
//!   Euler-Lagrange equations through Lagrange multipliers (an index-3
//!   system). Because the moving-mesh mass matrix can become singular, the
//!   Lobatto IIIA-IIIB path integrates a slack-augmented Lagrangian whose
//!   bordered (KKT) mass matrix stays invertible.
//!
//! [`fieldtheory`] supplies continuum data (Lagrangian densities, Sine-Gordon
//! soliton solutions and reference bounces), [`semidiscrete`] the moving-mesh
//! finite-element machinery, [`constraints`] the mesh equidistribution
//! constraints, [`init`] consistent initial data, and [`harness`] experiment
//! drivers (single-soliton convergence, two-soliton energy conservation)
//! with CSV/JSON output consumed by the `mmvi` command-line tool.

pub mod constraints;
pub mod error;
pub mod fieldtheory;
pub mod harness;
pub mod init;
pub mod integrator_ct;
pub mod integrator_lm;
pub mod semidiscrete;
pub mod solver;
pub mod tableau;

pub use error::Error;
