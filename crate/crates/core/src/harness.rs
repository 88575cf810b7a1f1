//! Experiment harness: named problems, strategy dispatch, diagnostics
//! recording, error norms against near-exact references, convergence
//! studies, and the CSV/JSON output formats of the command-line tool.

use std::time::Instant;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::fieldtheory::{
    find_bounce_time, nearly_exact_bounce, soliton, soliton_dt, soliton_dx, two_soliton,
    two_soliton_dt, two_soliton_dx, SineGordon,
};
use crate::init::{ct_initial_state, lm_initial_state, InitOptions, InitialProfile};
use crate::integrator_ct::{ct_integrate, CtOptions};
use crate::integrator_lm::{bordered_sigma_min, lm_integrate, LmMethod, LmOptions};
use crate::semidiscrete::{discrete_energy, DofState, MeshConfig};
use crate::solver::{inf_norm, NewtonOptions};
use crate::tableau::PartitionedTableau;

/// Named initial-value problems on `[0, Xmax]` with vacuum Dirichlet data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    /// One kink travelling right and reflecting off the far wall.
    SingleSoliton,
    /// Symmetric kink-kink bounce centered in the domain.
    TwoSoliton,
}

/// Which formulation advances the coupled field-mesh system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Index-1 form: mesh positions follow the constraint, field momenta
    /// are the only evolved momenta.
    Ct,
    /// Index-3 form: multipliers enforce the constraint, all momenta
    /// evolve, slack augmentation keeps the mass matrix invertible.
    Lm,
}

/// Time discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Gauss1,
    Gauss2,
    Lobatto2,
    Lobatto3,
    Radau3,
    Trapezoidal,
}

impl Scheme {
    pub fn tableau(self) -> Option<PartitionedTableau> {
        match self {
            Scheme::Gauss1 => Some(PartitionedTableau::gauss1()),
            Scheme::Gauss2 => Some(PartitionedTableau::gauss2()),
            Scheme::Lobatto2 => Some(PartitionedTableau::lobatto2()),
            Scheme::Lobatto3 => Some(PartitionedTableau::lobatto3()),
            Scheme::Radau3 => Some(PartitionedTableau::radau3()),
            Scheme::Trapezoidal => None,
        }
    }
}

fn default_v() -> f64 {
    0.9
}

fn default_t0() -> f64 {
    -5.0
}

fn default_record_every() -> usize {
    1
}

/// One experiment, fully determined. Serializes to the JSON accepted by
/// the command-line tool.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub strategy: Strategy,
    pub scheme: Scheme,
    pub constraint: ConstraintSet,
    /// Interior node count.
    pub n: usize,
    pub xmax: f64,
    pub dt: f64,
    /// End time. Defaults to the wall-bounce time for the single soliton
    /// and to `2 |t0|` for the two-soliton problem.
    #[serde(default)]
    pub t_end: Option<f64>,
    /// Soliton speed.
    #[serde(default = "default_v")]
    pub v: f64,
    /// Initial kink position / pair center. Defaults to `Xmax / 2`.
    #[serde(default)]
    pub x0: Option<f64>,
    /// Two-soliton launch time relative to the collision at zero.
    #[serde(default = "default_t0")]
    pub t0: f64,
    /// Keep every k-th step record (the final step is always kept).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub newton: Option<NewtonOptions>,
    /// Homotopy stages of the initial mesh solve.
    #[serde(default)]
    pub init_stages: Option<usize>,
}

impl ExperimentConfig {
    pub fn x0(&self) -> f64 {
        self.x0.unwrap_or(0.5 * self.xmax)
    }

    pub fn t_end(&self) -> Result<f64> {
        match self.t_end {
            Some(t) => Ok(t),
            None => match self.problem {
                Problem::SingleSoliton => find_bounce_time(self.xmax, self.v, 1e-12),
                Problem::TwoSoliton => Ok(2.0 * self.t0.abs()),
            },
        }
    }

    pub fn steps(&self) -> Result<usize> {
        let t = self.t_end()?;
        let n = (t / self.dt).round() as usize;
        Ok(n.max(1))
    }

    pub fn mesh(&self) -> MeshConfig {
        let tau = 2.0 * std::f64::consts::PI;
        let (y_left, y_right) = match self.problem {
            Problem::SingleSoliton => (0.0, tau),
            Problem::TwoSoliton => (-tau, tau),
        };
        MeshConfig { n: self.n, xmax: self.xmax, y_left, y_right }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return fail("need at least one interior node".into());
        }
        if !(self.xmax > 0.0) {
            return fail(format!("domain length must be positive, got {}", self.xmax));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return fail(format!("step size must be positive and finite, got {}", self.dt));
        }
        if !(self.v > 0.0 && self.v < 1.0) {
            return fail(format!("speed must lie in (0, 1), got {}", self.v));
        }
        if let Some(t) = self.t_end {
            if !(t > 0.0) {
                return fail(format!("end time must be positive, got {t}"));
            }
        }
        if let ConstraintSet::Arclength { alpha } = self.constraint {
            if !(alpha > 0.0) {
                return fail(format!("adaptivity strength must be positive, got {alpha}"));
            }
        }
        if self.record_every == 0 {
            return fail("record_every must be at least 1".into());
        }
        match (self.strategy, self.scheme) {
            (Strategy::Ct, Scheme::Trapezoidal) => {
                fail("the trapezoidal scheme belongs to the multiplier strategy".into())
            }
            (Strategy::Lm, Scheme::Gauss1 | Scheme::Gauss2 | Scheme::Radau3) => fail(format!(
                "the multiplier strategy needs a Lobatto pair or trapezoidal, not {:?}",
                self.scheme
            )),
            _ => Ok(()),
        }
    }
}

/// Continuum reference field of a configured problem, as `phi(x, t)`.
pub fn reference_field(cfg: &ExperimentConfig) -> Result<Box<dyn Fn(f64, f64) -> f64 + Sync>> {
    match cfg.problem {
        Problem::SingleSoliton => {
            let (xmax, v) = (cfg.xmax, cfg.v);
            let tb = find_bounce_time(xmax, v, 1e-12)?;
            Ok(Box::new(move |x, t| nearly_exact_bounce(x, t, xmax, v, tb)))
        }
        Problem::TwoSoliton => {
            let (x0, t0, v) = (cfg.x0(), cfg.t0, cfg.v);
            Ok(Box::new(move |x, t| two_soliton(x - x0, t0 + t, v)))
        }
    }
}

/// Runs `f` with the initial profile of the configured problem. The
/// profile borrows stack closures, hence the callback shape.
pub fn with_initial_profile<T>(
    cfg: &ExperimentConfig,
    f: impl FnOnce(&InitialProfile) -> Result<T>,
) -> Result<T> {
    let x0 = cfg.x0();
    let v = cfg.v;
    match cfg.problem {
        Problem::SingleSoliton => {
            let value = move |x: f64| soliton(x, 0.0, x0, v);
            let slope = move |x: f64| soliton_dx(x, 0.0, x0, v);
            let rate = move |x: f64| soliton_dt(x, 0.0, x0, v);
            f(&InitialProfile { value: &value, slope: Some(&slope), rate: &rate })
        }
        Problem::TwoSoliton => {
            let t0 = cfg.t0;
            let value = move |x: f64| two_soliton(x - x0, t0, v);
            let slope = move |x: f64| two_soliton_dx(x - x0, t0, v);
            let rate = move |x: f64| two_soliton_dt(x - x0, t0, v);
            f(&InitialProfile { value: &value, slope: Some(&slope), rate: &rate })
        }
    }
}

/// One diagnostics row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub energy: f64,
    pub energy_dev: f64,
    /// Largest position-constraint residual.
    pub constraint_residual: f64,
    /// Largest constraint-rate (hidden constraint) residual.
    pub constraint_rate: f64,
    pub min_cell: f64,
    pub max_cell: f64,
    /// Smallest singular value of the bordered mass matrix.
    pub sigma_min: f64,
    /// Largest slack position, velocity, or momentum (multiplier strategy).
    pub slack_inf: f64,
    /// Largest slack multiplier (multiplier strategy).
    pub mu_inf: f64,
}

/// How a run ended.
#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Failed { error: String, message: String, step: usize, t: f64 },
}

impl Termination {
    pub fn completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }
}

/// Everything a finished (or failed) run leaves behind.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    pub initial_energy: f64,
    /// Time actually reached.
    pub final_t: f64,
    pub final_state: DofState,
    /// Interleaved `(ydot, Xdot)` at the final state.
    pub final_u: Vec<f64>,
    /// Largest nodal deviation from the reference field at `final_t`.
    pub linf_error: f64,
    pub wall_seconds: f64,
}

fn make_record(
    step: usize,
    t: f64,
    state: &DofState,
    u: &[f64],
    slack_inf: f64,
    mu_inf: f64,
    e0: f64,
    constraint: &ConstraintSet,
) -> Result<StepRecord> {
    let cells = state.cells()?;
    let energy = discrete_energy(state, &cells, u, &SineGordon);
    let g = constraint.evaluate(state, &cells);
    let rate = constraint.jacobian(state, &cells).apply(u);
    let sigma = bordered_sigma_min(state, &cells, constraint)?;
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
    for &d in &cells.delta {
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    Ok(StepRecord {
        step,
        t,
        energy,
        energy_dev: energy - e0,
        constraint_residual: inf_norm(&g),
        constraint_rate: inf_norm(&rate),
        min_cell: dmin,
        max_cell: dmax,
        sigma_min: sigma,
        slack_inf,
        mu_inf,
    })
}

/// Largest nodal deviation of the mesh field from `reference` at time `t`.
pub fn linf_error(state: &DofState, t: f64, reference: &(dyn Fn(f64, f64) -> f64 + Sync)) -> f64 {
    state
        .x()
        .iter()
        .zip(state.y())
        .map(|(&x, &y)| (y - reference(x, t)).abs())
        .fold(0.0, f64::max)
}

/// Runs one experiment start to finish. Infeasible configurations fail
/// fast with a config error; mid-run failures are reported in the outcome
/// together with the diagnostics collected up to that point.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mesh = cfg.mesh();
    let nsteps = cfg.steps()?;
    let reference = reference_field(cfg)?;
    let mut init_opts = InitOptions::default();
    if let Some(stages) = cfg.init_stages {
        init_opts.stages = stages;
    }
    let newton = cfg.newton.clone().unwrap_or_default();
    let every = cfg.record_every;

    let mut records: Vec<StepRecord> = Vec::new();
    let mut record_err: Option<Error> = None;

    let outcome = match cfg.strategy {
        Strategy::Ct => {
            let tab = cfg.scheme.tableau().expect("validated");
            let start = with_initial_profile(cfg, |profile| {
                ct_initial_state(profile, &cfg.constraint, &mesh, &init_opts)
            })?;
            let e0 = start.energy(&SineGordon)?;
            records.push(make_record(0, 0.0, &start.state, &start.u, 0.0, 0.0, e0, &cfg.constraint)?);
            let mut opts = CtOptions::default();
            opts.newton = newton;
            let mut last = start.clone();
            let mut step = 0usize;
            let res = ct_integrate(
                &SineGordon,
                &cfg.constraint,
                &tab,
                cfg.dt,
                nsteps,
                start,
                &opts,
                |s| {
                    step += 1;
                    last = s.clone();
                    if step % every == 0 || step == nsteps {
                        match make_record(step, s.t, &s.state, &s.u, 0.0, 0.0, e0, &cfg.constraint) {
                            Ok(r) => records.push(r),
                            Err(e) => record_err = Some(e),
                        }
                    }
                },
            );
            (res.map(|s| (s.state, s.u, s.t)), last.state.clone(), last.u.clone(), last.t, e0)
        }
        Strategy::Lm => {
            let method = match cfg.scheme {
                Scheme::Trapezoidal => LmMethod::Trapezoidal,
                Scheme::Lobatto2 => LmMethod::Lobatto(2),
                Scheme::Lobatto3 => LmMethod::Lobatto(3),
                _ => unreachable!("validated"),
            };
            let start = with_initial_profile(cfg, |profile| {
                lm_initial_state(profile, &cfg.constraint, &mesh, &SineGordon, &init_opts)
            })?;
            let e0 = start.energy(&SineGordon)?;
            records.push(make_record(0, 0.0, &start.state, &start.u, 0.0, 0.0, e0, &cfg.constraint)?);
            let mut opts = LmOptions::default();
            opts.newton = newton;
            let mut last = start.clone();
            let mut step = 0usize;
            let res = lm_integrate(
                &SineGordon,
                &cfg.constraint,
                method,
                cfg.dt,
                nsteps,
                start,
                &opts,
                |s| {
                    step += 1;
                    last = s.clone();
                    if step % every == 0 || step == nsteps {
                        let slack =
                            inf_norm(&s.w).max(inf_norm(&s.p_r)).max(inf_norm(&s.r));
                        let mu = inf_norm(&s.mu);
                        match make_record(step, s.t, &s.state, &s.u, slack, mu, e0, &cfg.constraint)
                        {
                            Ok(r) => records.push(r),
                            Err(e) => record_err = Some(e),
                        }
                    }
                },
            );
            (res.map(|s| (s.state, s.u, s.t)), last.state.clone(), last.u.clone(), last.t, e0)
        }
    };
    let (res, last_state, last_u, last_t, e0) = outcome;
    if let Some(e) = record_err {
        return Err(e);
    }
    let (termination, final_state, final_u, final_t) = match res {
        Ok((state, u, t)) => (Termination::Completed, state, u, t),
        Err(Error::StepFailed { step, t, source }) => (
            Termination::Failed {
                error: source.kind().to_string(),
                message: source.to_string(),
                step,
                t,
            },
            last_state,
            last_u,
            last_t,
        ),
        Err(other) => return Err(other),
    };
    let err = linf_error(&final_state, final_t, reference.as_ref());
    Ok(RunOutcome {
        config: cfg.clone(),
        records,
        termination,
        initial_energy: e0,
        final_t,
        final_state,
        final_u,
        linf_error: err,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One row of a resolution study.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StudyRow {
    pub n: usize,
    pub dt: f64,
    pub error: f64,
    /// Observed order against the previous row; NaN on the first row and
    /// after failures.
    pub rate: f64,
    pub status: String,
}

/// Runs the experiment at each resolution (one thread per resolution) and
/// tabulates final-time errors with observed convergence orders.
pub fn convergence_study(base: &ExperimentConfig, ns: &[usize]) -> Vec<StudyRow> {
    let outcomes: Vec<std::result::Result<RunOutcome, Error>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ns
            .iter()
            .map(|&n| {
                let mut cfg = base.clone();
                cfg.n = n;
                scope.spawn(move || run_experiment(&cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("study worker panicked")).collect()
    });
    let mut rows: Vec<StudyRow> = Vec::with_capacity(ns.len());
    let mut prev: Option<(usize, f64)> = None;
    for (&n, outcome) in ns.iter().zip(outcomes) {
        let row = match outcome {
            Ok(out) if out.termination.completed() => {
                let rate = match prev {
                    Some((pn, perr)) if perr > 0.0 && out.linf_error > 0.0 => {
                        (perr / out.linf_error).ln() / ((n + 1) as f64 / (pn + 1) as f64).ln()
                    }
                    _ => f64::NAN,
                };
                prev = Some((n, out.linf_error));
                StudyRow { n, dt: base.dt, error: out.linf_error, rate, status: "ok".into() }
            }
            Ok(out) => {
                let status = match &out.termination {
                    Termination::Failed { error, step, .. } => format!("{error}@step{step}"),
                    Termination::Completed => unreachable!(),
                };
                prev = None;
                StudyRow { n, dt: base.dt, error: f64::NAN, rate: f64::NAN, status }
            }
            Err(e) => {
                prev = None;
                StudyRow { n, dt: base.dt, error: f64::NAN, rate: f64::NAN, status: e.kind().into() }
            }
        };
        rows.push(row);
    }
    rows
}

/// Time series of `(t, energy, deviation)` for an energy-conservation look
/// at one configuration. Convenience over [`run_experiment`].
pub fn energy_study(cfg: &ExperimentConfig) -> Result<(RunOutcome, Vec<(f64, f64, f64)>)> {
    let out = run_experiment(cfg)?;
    let series = out.records.iter().map(|r| (r.t, r.energy, r.energy_dev)).collect();
    Ok((out, series))
}

// ---------------------------------------------------------------------------
// Output formats
// ---------------------------------------------------------------------------

/// Final state table: one row per node including the fixed boundary nodes
/// (zero velocity there).
pub fn write_state_csv(w: &mut dyn std::io::Write, state: &DofState, u: &[f64]) -> Result<()> {
    writeln!(w, "node,x,y,ydot,xdot")?;
    let n = state.n();
    for k in 0..n + 2 {
        let (ydot, xdot) = if k == 0 || k == n + 1 {
            (0.0, 0.0)
        } else {
            (u[2 * (k - 1)], u[2 * (k - 1) + 1])
        };
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            k,
            state.x()[k],
            state.y()[k],
            ydot,
            xdot
        )?;
    }
    Ok(())
}

/// Per-step diagnostics table.
pub fn write_diagnostics_csv(w: &mut dyn std::io::Write, records: &[StepRecord]) -> Result<()> {
    writeln!(
        w,
        "step,t,energy,energy_dev,constraint_residual,constraint_rate,min_cell,max_cell,sigma_min,slack_inf,mu_inf"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step,
            r.t,
            r.energy,
            r.energy_dev,
            r.constraint_residual,
            r.constraint_rate,
            r.min_cell,
            r.max_cell,
            r.sigma_min,
            r.slack_inf,
            r.mu_inf
        )?;
    }
    Ok(())
}

/// Resolution study table.
pub fn write_study_csv(w: &mut dyn std::io::Write, rows: &[StudyRow]) -> Result<()> {
    writeln!(w, "n,dt,error,rate,status")?;
    for r in rows {
        writeln!(w, "{},{:.16e},{:.16e},{:.16e},{}", r.n, r.dt, r.error, r.rate, r.status)?;
    }
    Ok(())
}

/// Run metadata: configuration, termination, and summary scalars.
pub fn write_meta_json(w: &mut dyn std::io::Write, out: &RunOutcome) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Meta<'a> {
        config: &'a ExperimentConfig,
        termination: &'a Termination,
        initial_energy: f64,
        final_energy: f64,
        max_energy_dev: f64,
        final_t: f64,
        steps_recorded: usize,
        linf_error: f64,
        wall_seconds: f64,
    }
    let final_energy = out.records.last().map(|r| r.energy).unwrap_or(f64::NAN);
    let max_dev = out.records.iter().map(|r| r.energy_dev.abs()).fold(0.0, f64::max);
    let meta = Meta {
        config: &out.config,
        termination: &out.termination,
        initial_energy: out.initial_energy,
        final_energy,
        max_energy_dev: max_dev,
        final_t: out.final_t,
        steps_recorded: out.records.len(),
        linf_error: out.linf_error,
        wall_seconds: out.wall_seconds,
    };
    serde_json::to_writer_pretty(&mut *w, &meta)?;
    writeln!(w)?;
    Ok(())
}
