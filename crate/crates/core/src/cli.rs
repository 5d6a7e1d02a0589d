//! Command-line front end.
//!
//! Every run writes into its output directory:
//!
//! - `config.toml`: the effective run configuration after flags are applied
//! - `run.toml`: tool version, command and seed
//! - the command's CSV and TOML artifacts
//! - `metadata.toml`: wall-clock timestamps and thread count, the only
//!   file that differs between reruns of the same configuration
//!
//! Relative paths inside a config file are resolved against the working
//! directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::channel::{capacity, rate_scan, write_capacity_csv, write_rate_csv, IoWindow};
use crate::dynamics::{evolve, success_probability, write_trajectory_csv, DensityMatrix, EvolveOptions, SystemModel};
use crate::error::{Error, Result};
use crate::model::{CycleName, CycleSpec, JointState, KappaPolicy};
use crate::optimizer::{
    constant_drive_baseline, loss_vs_duration_scan_parallel, optimize_protocol, robustness_study_threaded,
    write_robustness_csv, write_scan_csv, OptimizationResult, OptimizeConfig, ScanCache, DEFAULT_RELATIVE_SD,
};
use crate::pulses::{ProtocolSchedule, Shape};

pub const RUN_SCHEMA: &str = "qfconv-run/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "qfconv", version, about = "Single-photon microwave-to-optical conversion: simulation, pulse optimization and channel analysis")]
pub struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "qfconv-out")]
    pub out: PathBuf,
    /// Worker threads for scans and robustness studies.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Conversion cycle, A or B.
    #[arg(long, global = true)]
    pub cycle: Option<CycleName>,
    /// Optical cavity decay: two_g_o, zero or a rate in ns^-1.
    #[arg(long, global = true)]
    pub kappa: Option<KappaPolicy>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the master equation for a schedule and write the population trajectory.
    Simulate(SimulateArgs),
    /// Optimize a conversion protocol of fixed duration.
    Optimize(OptimizeArgs),
    /// Optimize over a list of durations, caching every point.
    Scan(ScanArgs),
    /// Tabulate the capacity of the loss channel.
    Capacity(CapacityArgs),
    /// Communication rate from a scan.
    Rate(RateArgs),
    /// Monte Carlo sensitivity of a schedule to envelope errors.
    Robustness(RobustnessArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Schedule file (TOML), as written by `optimize`.
    #[arg(long, value_name = "PATH")]
    pub schedule: Option<PathBuf>,
    /// Start from the empty-cavity ground state instead of the absorbing state.
    #[arg(long)]
    pub vacuum: bool,
    /// Keep every Nth integration step in the trajectory.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Total protocol duration in ns.
    #[arg(long, value_name = "NS")]
    pub tau: Option<f64>,
    /// gaussian or piecewise:N
    #[arg(long)]
    pub parametrization: Option<String>,
    /// `constant` optimizes fixed laser levels held over the whole duration.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Comma-separated ascending durations in ns.
    #[arg(long, value_delimiter = ',', value_name = "NS,...")]
    pub taus: Option<Vec<f64>>,
    /// gaussian or piecewise:N
    #[arg(long)]
    pub parametrization: Option<String>,
    /// Directory of cached scan points.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Number of evenly spaced loss values.
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    /// Scan table written by `scan`; without it the cached scan is read.
    #[arg(long, value_name = "PATH")]
    pub scan_csv: Option<PathBuf>,
    /// Directory of cached scan points.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Readout window in ns; defaults to ten optical cavity lifetimes.
    #[arg(long, value_name = "NS")]
    pub io_window: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    /// Schedule file (TOML) to perturb.
    #[arg(long, value_name = "PATH")]
    pub schedule: Option<PathBuf>,
    /// Number of Monte Carlo draws.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Standard deviation of each envelope error, relative to its nominal value.
    #[arg(long)]
    pub relative_sd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Optimized,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Absorbing,
    Vacuum,
}

/// Everything a run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub system: SystemSection,
    pub optimizer: OptimizeConfig,
    pub simulate: SimulateSection,
    pub optimize: OptimizeSection,
    pub scan: ScanSection,
    pub capacity: CapacitySection,
    pub rate: RateSection,
    pub robustness: RobustnessSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub cycle: CycleName,
    pub kappa_policy: KappaPolicy,
    /// Override file for tabulated constants.
    pub overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub schedule: Option<PathBuf>,
    /// Schedule document given inline instead of by path.
    pub schedule_inline: Option<String>,
    pub initial: InitialState,
    pub stride: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub tau_ns: f64,
    pub parametrization: String,
    pub baseline: Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub taus_ns: Vec<f64>,
    pub parametrization: String,
    pub cache_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitySection {
    pub p_start: f64,
    pub p_stop: f64,
    pub points: usize,
    pub resolution: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSection {
    pub scan_csv: Option<PathBuf>,
    pub io_window_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    pub schedule: Option<PathBuf>,
    pub samples: usize,
    pub relative_sd: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: RUN_SCHEMA.to_string(),
            seed: 0,
            system: SystemSection::default(),
            optimizer: OptimizeConfig::default(),
            simulate: SimulateSection::default(),
            optimize: OptimizeSection::default(),
            scan: ScanSection::default(),
            capacity: CapacitySection::default(),
            rate: RateSection::default(),
            robustness: RobustnessSection::default(),
        }
    }
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection { cycle: CycleName::A, kappa_policy: KappaPolicy::TwoGO, overrides: None }
    }
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { schedule: None, schedule_inline: None, initial: InitialState::Absorbing, stride: 10, tol: 1e-6 }
    }
}

impl Default for OptimizeSection {
    fn default() -> Self {
        OptimizeSection { tau_ns: 150.0, parametrization: "gaussian".to_string(), baseline: Baseline::Optimized }
    }
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            taus_ns: vec![50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0, 135.0, 150.0, 175.0, 200.0, 250.0, 300.0],
            parametrization: "gaussian".to_string(),
            cache_dir: PathBuf::from("qfconv-cache"),
        }
    }
}

impl Default for CapacitySection {
    fn default() -> Self {
        CapacitySection { p_start: 0.0, p_stop: 1.0, points: 21, resolution: crate::channel::DEFAULT_RESOLUTION }
    }
}

impl Default for RobustnessSection {
    fn default() -> Self {
        RobustnessSection { schedule: None, samples: 200, relative_sd: DEFAULT_RELATIVE_SD }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.schema != RUN_SCHEMA {
            return Err(Error::config(format!("unsupported config schema {:?}, expected {RUN_SCHEMA:?}", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn cycle(&self) -> Result<CycleSpec> {
        CycleSpec::load(self.system.cycle, self.system.kappa_policy, self.system.overrides.as_deref())
    }

    /// Optimizer settings with the run seed applied.
    pub fn optimizer(&self) -> OptimizeConfig {
        let mut c = self.optimizer.clone();
        c.simplex.seed = self.seed;
        c
    }

    fn apply(&mut self, cli: &Cli) {
        if let Some(s) = cli.seed {
            self.seed = s;
        }
        if let Some(c) = cli.cycle {
            self.system.cycle = c;
        }
        if let Some(k) = cli.kappa {
            self.system.kappa_policy = k;
        }
        match &cli.command {
            Command::Simulate(a) => {
                if a.schedule.is_some() {
                    self.simulate.schedule = a.schedule.clone();
                    self.simulate.schedule_inline = None;
                }
                if a.vacuum {
                    self.simulate.initial = InitialState::Vacuum;
                }
                if let Some(s) = a.stride {
                    self.simulate.stride = s;
                }
            }
            Command::Optimize(a) => {
                if let Some(t) = a.tau {
                    self.optimize.tau_ns = t;
                }
                if let Some(p) = &a.parametrization {
                    self.optimize.parametrization = p.clone();
                }
                if let Some(b) = a.baseline {
                    self.optimize.baseline = b;
                }
            }
            Command::Scan(a) => {
                if let Some(t) = &a.taus {
                    self.scan.taus_ns = t.clone();
                }
                if let Some(p) = &a.parametrization {
                    self.scan.parametrization = p.clone();
                }
                if let Some(d) = &a.cache {
                    self.scan.cache_dir = d.clone();
                }
            }
            Command::Capacity(a) => {
                if let Some(n) = a.points {
                    self.capacity.points = n;
                }
            }
            Command::Rate(a) => {
                if a.scan_csv.is_some() {
                    self.rate.scan_csv = a.scan_csv.clone();
                }
                if let Some(d) = &a.cache {
                    self.scan.cache_dir = d.clone();
                }
                if a.io_window.is_some() {
                    self.rate.io_window_ns = a.io_window;
                }
            }
            Command::Robustness(a) => {
                if a.schedule.is_some() {
                    self.robustness.schedule = a.schedule.clone();
                }
                if let Some(n) = a.samples {
                    self.robustness.samples = n;
                }
                if let Some(s) = a.relative_sd {
                    self.robustness.relative_sd = s;
                }
            }
        }
    }
}

/// What a command produced, besides the files it wrote.
pub struct Outcome {
    pub summary: String,
    pub budget_exhausted: bool,
}

impl Outcome {
    fn done(summary: String) -> Self {
        Outcome { summary, budget_exhausted: false }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(o) => {
            println!("{}", o.summary);
            if o.budget_exhausted {
                eprintln!("warning: optimizer stopped at its evaluation budget before converging");
                EXIT_BUDGET
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(cli);
    if cli.threads == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    let started = SystemTime::now();
    let clock = Instant::now();
    fs::create_dir_all(&cli.out)?;
    let command = command_name(&cli.command);
    let outcome = match &cli.command {
        Command::Simulate(_) => simulate(&cfg, &cli.out)?,
        Command::Optimize(_) => optimize(&cfg, &cli.out)?,
        Command::Scan(_) => scan(&cfg, &cli.out, cli.threads)?,
        Command::Capacity(_) => capacity_table(&cfg, &cli.out)?,
        Command::Rate(_) => rate(&cfg, &cli.out)?,
        Command::Robustness(_) => robustness(&cfg, &cli.out, cli.threads)?,
    };
    fs::write(cli.out.join("config.toml"), cfg.to_toml()?)?;
    let run = RunRecord { tool: "qfconv".into(), version: env!("CARGO_PKG_VERSION").into(), command: command.into(), seed: cfg.seed };
    fs::write(cli.out.join("run.toml"), toml::to_string(&run)?)?;
    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = Metadata {
        started_unix_s: unix(started),
        finished_unix_s: unix(SystemTime::now()),
        elapsed_s: clock.elapsed().as_secs_f64(),
        threads: cli.threads,
    };
    fs::write(cli.out.join("metadata.toml"), toml::to_string(&meta)?)?;
    Ok(outcome)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Optimize(_) => "optimize",
        Command::Scan(_) => "scan",
        Command::Capacity(_) => "capacity",
        Command::Rate(_) => "rate",
        Command::Robustness(_) => "robustness",
    }
}

#[derive(Serialize)]
struct RunRecord {
    tool: String,
    version: String,
    command: String,
    seed: u64,
}

#[derive(Serialize)]
struct Metadata {
    started_unix_s: u64,
    finished_unix_s: u64,
    elapsed_s: f64,
    threads: usize,
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn parse_shape(s: &str) -> Result<Shape> {
    s.parse().map_err(|e: Error| Error::config(e.to_string()))
}

fn load_schedule(path: Option<&Path>, inline: Option<&str>, cycle: &CycleSpec, what: &str) -> Result<ProtocolSchedule> {
    match (path, inline) {
        (Some(p), _) => ProtocolSchedule::load(p, cycle),
        (None, Some(text)) => {
            let s = ProtocolSchedule::from_toml(text).map_err(|e| Error::config(format!("inline schedule: {e}")))?;
            s.validate(cycle).map_err(|e| Error::config(format!("inline schedule: {e}")))?;
            Ok(s)
        }
        (None, None) => Err(Error::config(format!("{what} needs a schedule file (--schedule PATH)"))),
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    success: f64,
    loss: f64,
    trace_drift: f64,
    steps: usize,
    step_error: f64,
    samples: usize,
    /// Largest population of each atomic level over the trajectory.
    level_max_population: BTreeMap<String, f64>,
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let cycle = cfg.cycle()?;
    let s = &cfg.simulate;
    let schedule = load_schedule(s.schedule.as_deref(), s.schedule_inline.as_deref(), &cycle, "simulate")?;
    if s.stride == 0 {
        return Err(Error::config("simulate.stride must be at least 1"));
    }
    let model = SystemModel::new(&cycle)?;
    let start = match s.initial {
        InitialState::Absorbing => model.basis.initial(),
        InitialState::Vacuum => model.basis.vacuum(),
    };
    let opts = EvolveOptions { tol: s.tol, stride: s.stride, ..Default::default() };
    let traj = evolve(&model, &DensityMatrix::pure(model.dim(), start), &schedule, opts)?;
    fs::write(out.join("trajectory.csv"), csv_bytes(|b| write_trajectory_csv(&model.basis, &traj, b))?)?;
    let mut level_max = BTreeMap::new();
    for rho in &traj.states {
        let mut per_level = BTreeMap::new();
        for (i, st) in model.basis.states.iter().enumerate() {
            if let JointState::Atom { level, .. } = st {
                *per_level.entry(format!("level_{level}")).or_insert(0.0) += rho.population(i);
            }
        }
        for (k, v) in per_level {
            let e = level_max.entry(k).or_insert(0.0_f64);
            *e = e.max(v);
        }
    }
    let success = success_probability(&model.basis, traj.last());
    let summary = SimulateSummary {
        success,
        loss: 1.0 - success,
        trace_drift: traj.states.iter().map(|r| (r.trace() - 1.0).abs()).fold(0.0, f64::max),
        steps: traj.steps,
        step_error: traj.step_error,
        samples: traj.states.len(),
        level_max_population: level_max,
    };
    fs::write(out.join("summary.toml"), toml::to_string(&summary)?)?;
    Ok(Outcome::done(format!(
        "cycle {} duration {} ns: success {:.6}, loss {:.6}, trace drift {:.2e}",
        cycle.name, schedule.duration, summary.success, summary.loss, summary.trace_drift
    )))
}

#[derive(Serialize)]
struct OptimizeReport {
    cycle: String,
    tau_ns: f64,
    parametrization: String,
    baseline: Baseline,
    success: f64,
    loss_p: f64,
    evaluations: usize,
    converged: bool,
    split_ns: Option<f64>,
    restart_losses: Vec<f64>,
}

fn optimize(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let cycle = cfg.cycle()?;
    let o = &cfg.optimize;
    let config = cfg.optimizer();
    let result: OptimizationResult = match o.baseline {
        Baseline::Constant => constant_drive_baseline(&cycle, o.tau_ns, &config)?,
        Baseline::Optimized => optimize_protocol(&cycle, o.tau_ns, parse_shape(&o.parametrization)?, &config)?,
    };
    fs::write(out.join("schedule.toml"), result.schedule.to_toml()?)?;
    let report = OptimizeReport {
        cycle: cycle.name.to_string(),
        tau_ns: o.tau_ns,
        parametrization: match o.baseline {
            Baseline::Constant => "piecewise:1".to_string(),
            Baseline::Optimized => o.parametrization.clone(),
        },
        baseline: o.baseline,
        success: result.success,
        loss_p: result.loss,
        evaluations: result.evaluations,
        converged: result.converged,
        split_ns: result.schedule.split,
        restart_losses: result.restart_values.clone(),
    };
    fs::write(out.join("report.toml"), toml::to_string(&report)?)?;
    Ok(Outcome {
        summary: format!(
            "cycle {} tau {} ns ({:?}): success {:.6}, loss {:.6}, {} evaluations",
            cycle.name, o.tau_ns, o.baseline, result.success, result.loss, result.evaluations
        ),
        budget_exhausted: !result.converged,
    })
}

fn scan(cfg: &RunConfig, out: &Path, threads: usize) -> Result<Outcome> {
    let cycle = cfg.cycle()?;
    let shape = parse_shape(&cfg.scan.parametrization)?;
    let cache = ScanCache::new(&cfg.scan.cache_dir);
    let points = loss_vs_duration_scan_parallel(&cycle, &cfg.scan.taus_ns, shape, &cfg.optimizer(), Some(&cache), threads, |p| {
        eprintln!("tau {:>8.3} ns: success {:.6}", p.tau, p.result.success);
    })?;
    fs::write(out.join("scan.csv"), csv_bytes(|b| write_scan_csv(&points, b))?)?;
    let best = points.iter().max_by(|a, b| a.result.success.total_cmp(&b.result.success)).expect("scan is nonempty");
    Ok(Outcome {
        summary: format!("{} points; best success {:.6} at tau {} ns", points.len(), best.result.success, best.tau),
        budget_exhausted: points.iter().any(|p| !p.result.converged),
    })
}

fn capacity_table(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let c = &cfg.capacity;
    if c.points < 2 || !(c.p_start >= 0.0 && c.p_stop <= 1.0 && c.p_start < c.p_stop) {
        return Err(Error::config("capacity grid needs at least 2 points with 0 <= p_start < p_stop <= 1"));
    }
    let step = (c.p_stop - c.p_start) / (c.points - 1) as f64;
    let rows = (0..c.points)
        .map(|i| {
            let p = if i + 1 == c.points { c.p_stop } else { c.p_start + step * i as f64 };
            capacity(p, c.resolution).map(|cap| (p, cap))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::write(out.join("capacity.csv"), csv_bytes(|b| write_capacity_csv(&rows, b))?)?;
    Ok(Outcome::done(format!("{} capacity points from p = {} to {}", rows.len(), c.p_start, c.p_stop)))
}

#[derive(Serialize)]
struct RateSummary {
    io_window_ns: f64,
    best_tau_ns: f64,
    best_loss_p: f64,
    best_capacity: f64,
    best_total_ns: f64,
    best_rate_mqbps: f64,
}

fn rate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let cycle = cfg.cycle()?;
    let table: Vec<(f64, f64)> = match &cfg.rate.scan_csv {
        Some(p) => crate::optimizer::read_scan_csv(p)?,
        None => {
            let shape = parse_shape(&cfg.scan.parametrization)?;
            let cache = ScanCache::read_only(&cfg.scan.cache_dir);
            let points = loss_vs_duration_scan_parallel(&cycle, &cfg.scan.taus_ns, shape, &cfg.optimizer(), Some(&cache), 1, |_| {})
                .map_err(|e| match e {
                    Error::MissingCache(path) => Error::MissingCache(format!(
                        "{path}; run `qfconv scan` with the same config and --cache first, or pass --scan-csv"
                    )),
                    other => other,
                })?;
            points.iter().map(|p| (p.tau, p.result.loss)).collect()
        }
    };
    let io = match cfg.rate.io_window_ns {
        Some(ns) => IoWindow::Explicit { ns },
        None => IoWindow::from_kappa(cycle.kappa)?,
    };
    let scan = rate_scan(&table, io)?;
    fs::write(out.join("rate.csv"), csv_bytes(|b| write_rate_csv(&scan, b))?)?;
    let best = scan.best_point();
    let summary = RateSummary {
        io_window_ns: io.ns()?,
        best_tau_ns: best.tau,
        best_loss_p: best.loss,
        best_capacity: best.capacity,
        best_total_ns: best.total_time,
        best_rate_mqbps: best.rate_mqbps(),
    };
    fs::write(out.join("rate_summary.toml"), toml::to_string(&summary)?)?;
    Ok(Outcome::done(format!("max rate {:.4} Mqb/s at tau {} ns (loss {:.6})", summary.best_rate_mqbps, best.tau, best.loss)))
}

#[derive(Serialize)]
struct RobustnessSummary {
    samples: usize,
    seed: u64,
    relative_sd: f64,
    baseline_loss_p: f64,
    mean_fractional_increase: f64,
    standard_error: f64,
    min_fractional_increase: f64,
    max_fractional_increase: f64,
}

fn robustness(cfg: &RunConfig, out: &Path, threads: usize) -> Result<Outcome> {
    let cycle = cfg.cycle()?;
    let r = &cfg.robustness;
    let schedule = load_schedule(r.schedule.as_deref(), None, &cycle, "robustness")?;
    let report = robustness_study_threaded(&cycle, &schedule, r.samples, cfg.seed, r.relative_sd, threads)?;
    fs::write(out.join("robustness.csv"), csv_bytes(|b| write_robustness_csv(&report, b))?)?;
    let summary = RobustnessSummary {
        samples: report.samples,
        seed: report.seed,
        relative_sd: report.relative_sd,
        baseline_loss_p: report.baseline_loss,
        mean_fractional_increase: report.mean_fractional_increase,
        standard_error: report.standard_error,
        min_fractional_increase: report.min_fractional_increase,
        max_fractional_increase: report.max_fractional_increase,
    };
    fs::write(out.join("robustness_summary.toml"), toml::to_string(&summary)?)?;
    Ok(Outcome::done(format!(
        "mean fractional loss increase {:.5} +/- {:.5} over {} draws",
        report.mean_fractional_increase,
        report.standard_error,
        report.rows.len()
    )))
}
