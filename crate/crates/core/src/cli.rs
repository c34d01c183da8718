//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Axis, ExperimentConfig, Overrides};
use crate::error::Error;
use crate::harness::{
    generic_curves, optimal_depth_table, run_sweep_axis, sweep_values, tradeoff_scan, write_depth_csv,
    write_results_csv, write_tradeoff_csv, Experiment,
};
use crate::phy::{db_to_linear, write_traces};
use crate::validation::run_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "airbreath", version, about = "Breathing-depth simulator and optimizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accuracy and DG columns over every breathing depth.
    Tradeoff(CommonArgs),
    /// Closed-form optimal depth over SIR and active-sensor grids.
    OptimalDepth(CommonArgs),
    /// Scheme comparison over SIR.
    SweepSir(CommonArgs),
    /// Scheme comparison over the number of sensors.
    SweepSensors(CommonArgs),
    /// Scheme comparison over the activation probability.
    SweepActivation(CommonArgs),
    /// Monte Carlo DG tables for a black-box classifier.
    CnnCurves(CommonArgs),
    /// Runs the analytic invariant suite.
    Validate(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long = "sir-db", allow_hyphen_values = true)]
    pub sir_db: Option<f64>,
    #[arg(long)]
    pub sensors: Option<usize>,
    #[arg(long = "pact")]
    pub activation_probability: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write per-round traces of sweeps under `<out>/traces`.
    #[arg(long)]
    pub traces: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            rounds: self.rounds,
            sir_db: self.sir_db,
            sensors: self.sensors,
            activation_probability: self.activation_probability,
            output: self.out.clone(),
            threads: self.threads,
        }
    }
}

/// Failure split by exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn config_failure(path: Option<&Path>, e: impl std::fmt::Display) -> Failure {
    match path {
        Some(p) => Failure::Config(format!("config error in {}: {e}", p.display())),
        None => Failure::Config(format!("config error: {e}")),
    }
}

fn runtime(e: Error) -> Failure {
    match e {
        Error::Config { .. } => Failure::Config(e.to_string()),
        e => Failure::Runtime(e.to_string()),
    }
}

/// Config with overrides applied, validated, plus the directory that
/// relative model paths resolve against.
fn load_config(args: &CommonArgs) -> std::result::Result<(ExperimentConfig, Option<PathBuf>), Failure> {
    let path = args.config.as_deref();
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            e => config_failure(path, e),
        })?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&args.overrides());
    cfg.validate().map_err(|e| config_failure(path, e))?;
    let base = path.and_then(|p| p.parent()).map(Path::to_path_buf);
    Ok((cfg, base))
}

fn experiment(args: &CommonArgs) -> std::result::Result<Experiment, Failure> {
    let (cfg, base) = load_config(args)?;
    Experiment::new(cfg, base.as_deref()).map_err(|e| config_failure(args.config.as_deref(), e))
}

fn create(dir: &Path, name: &str) -> std::result::Result<(BufWriter<File>, PathBuf), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))?;
    Ok((BufWriter::new(f), path))
}

/// Runs one parsed invocation and returns the summary line.
pub fn dispatch(cli: Cli) -> std::result::Result<String, Failure> {
    let args = match &cli.command {
        Command::Tradeoff(a)
        | Command::OptimalDepth(a)
        | Command::SweepSir(a)
        | Command::SweepSensors(a)
        | Command::SweepActivation(a)
        | Command::CnnCurves(a)
        | Command::Validate(a) => a.clone(),
    };
    let threads = match &args.config {
        Some(_) => load_config(&args)?.0.threads,
        None => args.threads,
    };
    let run = || match cli.command {
        Command::Tradeoff(a) => tradeoff(&a),
        Command::OptimalDepth(a) => optimal_depth(&a),
        Command::SweepSir(a) => sweep(&a, Axis::Sir),
        Command::SweepSensors(a) => sweep(&a, Axis::Sensors),
        Command::SweepActivation(a) => sweep(&a, Axis::Activation),
        Command::CnnCurves(a) => cnn_curves(&a),
        Command::Validate(a) => validate(&a),
    };
    match threads {
        Some(0) => Err(Failure::Config("threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Runtime(e.to_string()))?
            .install(run),
        None => run(),
    }
}

fn tradeoff(args: &CommonArgs) -> std::result::Result<String, Failure> {
    let exp = experiment(args)?;
    let cfg = &exp.config;
    let active = match (args.sensors, cfg.tradeoff.active_sensors) {
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => cfg.expected_active().map_err(runtime)?,
    };
    let sirs = match (args.sir_db, &cfg.tradeoff.sir_db) {
        (Some(db), _) => vec![db],
        (None, Some(v)) => v.clone(),
        (None, None) => vec![cfg.channel.sir_db()],
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &db in &sirs {
        let part = tradeoff_scan(&exp, db, active, cfg.rounds).map_err(runtime)?;
        let best = part
            .iter()
            .fold(&part[0], |b, r| if r.accuracy > b.accuracy { r } else { b });
        summary.push(format!("SIR {db} dB: best S={} G={} accuracy {:.4}", best.depth, best.gain, best.accuracy));
        rows.extend(part);
    }
    let (w, path) = create(&cfg.output_dir(), "tradeoff.csv")?;
    write_tradeoff_csv(w, &rows).map_err(runtime)?;
    Ok(format!("tradeoff |K|={active}: {} -> {}", summary.join("; "), path.display()))
}

fn optimal_depth(args: &CommonArgs) -> std::result::Result<String, Failure> {
    let exp = experiment(args)?;
    let cfg = &exp.config;
    let active = args.sensors.unwrap_or(cfg.channel.sensors);
    let sir_db = cfg.channel.sir_db();
    let sir_grid = match args.sir_db {
        Some(db) => vec![db],
        None => cfg.optimal_depth.sir_db.clone(),
    };
    let active_grid = match args.sensors {
        Some(k) => vec![k],
        None => cfg.optimal_depth.active_sensors.clone(),
    };
    let rows = optimal_depth_table(&exp, &sir_grid, active, &active_grid, sir_db).map_err(runtime)?;
    let (w, path) = create(&cfg.output_dir(), "optimal_depth.csv")?;
    write_depth_csv(w, &rows).map_err(runtime)?;
    let params = exp.params(active, db_to_linear(sir_db)).map_err(runtime)?;
    let d = crate::dg::optimal_breathing_depth(exp.curve(), &params);
    Ok(format!(
        "optimal-depth at SIR {sir_db} dB, |K|={active}: S*={} G={} phi_tilde={:.6} -> {}",
        d.depth,
        d.gain,
        d.surrogate_value,
        path.display()
    ))
}

fn sweep(args: &CommonArgs, axis: Axis) -> std::result::Result<String, Failure> {
    let exp = experiment(args)?;
    let values = sweep_values(&exp.config, axis).map_err(|e| config_failure(args.config.as_deref(), e))?;
    let report = run_sweep_axis(&exp, axis, &values).map_err(runtime)?;
    let name = format!("sweep_{}.csv", axis.as_str());
    let (w, path) = create(&exp.config.output_dir(), &name)?;
    write_results_csv(w, &report.rows).map_err(runtime)?;
    if args.traces {
        let dir = exp.config.output_dir().join("traces");
        for (row, outcomes) in report.rows.iter().zip(&report.outcomes) {
            let name = format!("{}_{}_{}.csv", axis.as_str(), row.axis_value, row.scheme);
            let (w, _) = create(&dir, &name)?;
            let traces: Vec<_> = outcomes.iter().map(|o| o.trace()).collect();
            write_traces(w, &traces).map_err(runtime)?;
        }
    }
    let (scheme, acc, depth) = report.best_scheme().expect("non-empty sweep");
    Ok(format!(
        "sweep-{}: best scheme {scheme} (mean depth {depth:.2}, mean accuracy {acc:.4}) over {} points -> {}",
        axis.as_str(),
        values.len(),
        path.display()
    ))
}

fn cnn_curves(args: &CommonArgs) -> std::result::Result<String, Failure> {
    let exp = experiment(args)?;
    let cfg = &exp.config;
    let active = match (args.sensors, cfg.generic.active_sensors) {
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => cfg.expected_active().map_err(runtime)?,
    };
    let sir_db = cfg.channel.sir_db();
    let curves = generic_curves(&exp, active, sir_db, None).map_err(runtime)?;
    let dir = cfg.output_dir();
    let (w, _) = create(&dir, "cnn_comp.csv")?;
    curves.tables.write_comp_csv(w).map_err(runtime)?;
    let (w, _) = create(&dir, "cnn_spread.csv")?;
    curves.tables.write_spread_csv(w).map_err(runtime)?;
    let (w, _) = create(&dir, "cnn_importance.csv")?;
    curves.profile.write_csv(w).map_err(runtime)?;
    Ok(format!(
        "cnn-curves at SIR {sir_db} dB, |K|={active}: S*={} G={} combined DG {:.4} -> {}",
        curves.decision.depth,
        curves.decision.gain,
        curves.decision.surrogate_value,
        dir.display()
    ))
}

fn validate(args: &CommonArgs) -> std::result::Result<String, Failure> {
    let (cfg, _) = load_config(args)?;
    let checks = run_suite(100, cfg.seed);
    let mut out = std::io::stdout().lock();
    for c in &checks {
        let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("validate: {failed} of {} checks failed", checks.len())));
    }
    Ok(format!("validate: all {} checks passed", checks.len()))
}

/// Parses `argv`, runs, prints, and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("airbreath: {}", f.message());
            f.exit_code()
        }
    }
}
