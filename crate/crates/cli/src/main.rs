//! `mmvi`: run moving-mesh variational integrator experiments from the
//! command line.
//!
//! Three subcommands cover the standard workflows:
//!
//! * `mmvi run` integrates one configuration and writes the final state,
//!   per-step diagnostics and run metadata into an output directory.
//! * `mmvi converge` repeats a configuration over a list of node counts and
//!   tabulates final-time errors with observed convergence orders.
//! * `mmvi energy` is `run` plus an `energy.csv` time series for plotting
//!   energy conservation.
//!
//! Every flag overrides the corresponding field of the JSON configuration
//! given with `--config` (or of the built-in single-soliton default).
//! Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
//! failures (a failed run still writes its partial diagnostics).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmvi_core::constraints::ConstraintSet;
use mmvi_core::harness::{
    convergence_study, run_experiment, write_diagnostics_csv, write_meta_json, write_state_csv,
    write_study_csv, ExperimentConfig, Problem, RunOutcome, Scheme, Strategy, StudyRow,
    Termination,
};
use mmvi_core::Error;

#[derive(Parser)]
#[command(
    name = "mmvi",
    version,
    about = "Moving-mesh variational integrators for (1+1)-dimensional scalar fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; write state.csv, diagnostics.csv and meta.json.
    Run(RunArgs),
    /// Resolution study over node counts; write study.csv and study.json.
    Converge(ConvergeArgs),
    /// Like `run`, plus an energy.csv time series.
    Energy(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated interior node counts, e.g. "15,31,63".
    #[arg(long, default_value = "15,31,63")]
    grid: String,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment configuration; the flags below override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Problem: single_soliton | two_soliton.
    #[arg(long)]
    problem: Option<String>,
    /// Strategy: ct (mesh as control, index 1) | lm (multipliers, index 3).
    #[arg(long)]
    strategy: Option<String>,
    /// Scheme: gauss1 | gauss2 | lobatto2 | lobatto3 | radau3 | trapezoidal.
    #[arg(long)]
    scheme: Option<String>,
    /// Use the uniform-mesh constraint instead of arclength.
    #[arg(long, conflicts_with = "alpha")]
    uniform: bool,
    /// Arclength adaptivity strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// Interior node count.
    #[arg(long)]
    n: Option<usize>,
    /// Domain length.
    #[arg(long)]
    xmax: Option<f64>,
    /// Time step.
    #[arg(long)]
    dt: Option<f64>,
    /// End time (default: wall-bounce time, or 2|t0| for the pair).
    #[arg(long)]
    t_end: Option<f64>,
    /// Soliton speed in (0, 1).
    #[arg(long)]
    v: Option<f64>,
    /// Initial kink position / pair center (default: Xmax/2).
    #[arg(long)]
    x0: Option<f64>,
    /// Two-soliton launch time relative to the collision.
    #[arg(long)]
    t0: Option<f64>,
    /// Keep every k-th diagnostics record (the final step is always kept).
    #[arg(long)]
    record_every: Option<usize>,
    /// Homotopy stages of the initial mesh solve.
    #[arg(long)]
    init_stages: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
}

fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        problem: Problem::SingleSoliton,
        strategy: Strategy::Ct,
        scheme: Scheme::Gauss2,
        constraint: ConstraintSet::Arclength { alpha: 2.5 },
        n: 31,
        xmax: 25.0,
        dt: 0.01,
        t_end: None,
        v: 0.9,
        x0: None,
        t0: -5.0,
        record_every: 1,
        newton: None,
        init_stages: None,
    }
}

/// Parses one of the word-valued flags through the same serde names the
/// JSON configuration uses, accepting kebab-case spellings too.
fn parse_word<T: serde::de::DeserializeOwned>(what: &str, raw: &str) -> Result<T, Error> {
    let canonical = raw.trim().to_lowercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(canonical))
        .map_err(|_| Error::Config(format!("unknown {what} {raw:?}")))
}

/// The flag-valued serde name of an enum, for human-readable summaries.
fn word<T: serde::Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "?".into(),
    }
}

fn build_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad configuration {}: {e}", path.display())))?
        }
        None => default_config(),
    };
    if let Some(p) = &common.problem {
        cfg.problem = parse_word("problem", p)?;
    }
    if let Some(s) = &common.strategy {
        cfg.strategy = parse_word("strategy", s)?;
    }
    if let Some(s) = &common.scheme {
        cfg.scheme = parse_word("scheme", s)?;
    }
    if common.uniform {
        cfg.constraint = ConstraintSet::Uniform;
    }
    if let Some(alpha) = common.alpha {
        cfg.constraint = ConstraintSet::Arclength { alpha };
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(xmax) = common.xmax {
        cfg.xmax = xmax;
    }
    if let Some(dt) = common.dt {
        cfg.dt = dt;
    }
    if let Some(t) = common.t_end {
        cfg.t_end = Some(t);
    }
    if let Some(v) = common.v {
        cfg.v = v;
    }
    if let Some(x0) = common.x0 {
        cfg.x0 = Some(x0);
    }
    if let Some(t0) = common.t0 {
        cfg.t0 = t0;
    }
    if let Some(k) = common.record_every {
        cfg.record_every = k;
    }
    if let Some(d) = common.init_stages {
        cfg.init_stages = Some(d);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_run_artifacts(dir: &Path, out: &RunOutcome) -> Result<(), Error> {
    let mut f = create(&dir.join("state.csv"))?;
    write_state_csv(&mut f, &out.final_state, &out.final_u)?;
    f.flush()?;
    let mut f = create(&dir.join("diagnostics.csv"))?;
    write_diagnostics_csv(&mut f, &out.records)?;
    f.flush()?;
    let mut f = create(&dir.join("meta.json"))?;
    write_meta_json(&mut f, out)?;
    f.flush()?;
    Ok(())
}

fn write_energy_csv(dir: &Path, out: &RunOutcome) -> Result<(), Error> {
    let mut f = create(&dir.join("energy.csv"))?;
    writeln!(f, "t,energy,energy_dev")?;
    for r in &out.records {
        writeln!(f, "{:.16e},{:.16e},{:.16e}", r.t, r.energy, r.energy_dev)?;
    }
    f.flush()?;
    Ok(())
}

fn describe(cfg: &ExperimentConfig) -> String {
    let constraint = match cfg.constraint {
        ConstraintSet::Arclength { alpha } => format!("arclength(alpha={alpha})"),
        ConstraintSet::Uniform => "uniform".into(),
    };
    format!(
        "{} {} {} {constraint} n={} dt={}",
        word(&cfg.problem),
        word(&cfg.strategy),
        word(&cfg.scheme),
        cfg.n,
        cfg.dt
    )
}

fn cmd_run(args: &RunArgs, with_energy: bool) -> Result<u8, Error> {
    let cfg = build_config(&args.common)?;
    let dir = &args.common.out;
    std::fs::create_dir_all(dir)?;
    let outcome = run_experiment(&cfg)?;
    write_run_artifacts(dir, &outcome)?;
    if with_energy {
        write_energy_csv(dir, &outcome)?;
    }
    let max_dev = outcome.records.iter().map(|r| r.energy_dev.abs()).fold(0.0, f64::max);
    match &outcome.termination {
        Termination::Completed => {
            println!("{}", describe(&cfg));
            println!(
                "  reached t = {:.6} in {:.2} s: max |E - E0| = {:.3e}, field error {:.3e}",
                outcome.final_t, outcome.wall_seconds, max_dev, outcome.linf_error
            );
            println!("  wrote {}", dir.join("{state,diagnostics}.csv").display());
            Ok(0)
        }
        Termination::Failed { error, message, step, t } => {
            eprintln!("{}", describe(&cfg));
            eprintln!("  failed at step {step} (t = {t:.6}): {error}: {message}");
            eprintln!("  partial diagnostics written to {}", dir.display());
            Ok(3)
        }
    }
}

fn parse_grid(raw: &str) -> Result<Vec<usize>, Error> {
    let ns: Vec<usize> = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad grid {raw:?}: expected comma-separated counts")))?;
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Config(format!("bad grid {raw:?}: counts must be positive")));
    }
    Ok(ns)
}

fn cmd_converge(args: &ConvergeArgs) -> Result<u8, Error> {
    let cfg = build_config(&args.common)?;
    let ns = parse_grid(&args.grid)?;
    let dir = &args.common.out;
    std::fs::create_dir_all(dir)?;
    println!("{}", describe(&cfg));
    let rows = convergence_study(&cfg, &ns);
    let mut f = create(&dir.join("study.csv"))?;
    write_study_csv(&mut f, &rows)?;
    f.flush()?;
    let mut f = create(&dir.join("study.json"))?;
    serde_json::to_writer_pretty(&mut f, &rows)?;
    writeln!(f)?;
    f.flush()?;
    println!("  {:>6} {:>13} {:>7}  status", "n", "error", "rate");
    for StudyRow { n, error, rate, status, .. } in &rows {
        let rate = if rate.is_nan() { "   ---".into() } else { format!("{rate:6.2}") };
        println!("  {n:>6} {error:>13.4e} {rate:>7}  {status}");
    }
    println!("  wrote {}", dir.join("study.csv").display());
    if rows.iter().all(|r| r.status == "ok") {
        Ok(0)
    } else {
        Ok(3)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, false),
        Command::Converge(a) => cmd_converge(a),
        Command::Energy(a) => cmd_run(a, true),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.kind() == "config" { 2 } else { 3 })
        }
    }
}
