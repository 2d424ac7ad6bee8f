//! Configuration-driven experiment runner.
//!
//! A run reads one TOML file, resolves `auto` values, dispatches a command
//! and writes CSV series, binary fields/traces and a `manifest.json` into
//! the output directory. Nothing in the outputs depends on wall-clock time,
//! so identical config and seed give identical bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{adjoint_steer, min_norm_control, steer, AdjointMode, ControlOptions};
use crate::error::{Error, Result};
use crate::evolution::{evolve, fit_timestep, semigroup_norm, Dynamics, EvolutionSpec, Semigroup};
use crate::io::{fmt_f64, read_block, read_coefficient_csv, read_field, read_trace, write_field, write_trace, CsvTable};
use crate::medium::{
    apply_scattering, apply_scattering_adjoint, gaussian_bump, regime_report, two_disk, validate_kernel, Kernel,
    Medium, RegimeReport,
};
use crate::phase_grid::{BoundaryTrace, Field, Geometry, GeometryConfig, PhaseSpaceGrid, TracePart};
use crate::stationary::{solve_stationary_direct, StationarySpec};
use crate::timereversal::{
    contraction_factor, measure_with_dt, reconstruct_neumann, reflect_angle, reflect_time, restrict_fine_trace,
    solve_fredholm, Lift, Measurement,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Invert,
    Control,
    Validate,
    Spectrum,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Invert => "invert",
            Command::Control => "control",
            Command::Validate => "validate",
            Command::Spectrum => "spectrum",
        }
    }
}

/// A number or the literal string `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoValue {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for AutoValue {
    fn default() -> Self {
        AutoValue::Auto(AutoTag::Auto)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MediumConfig {
    Constant {
        mu_a: f64,
        mu_s: f64,
    },
    /// Constant absorption, scattering `base + peak·exp(−r²/2w²)`.
    GaussianBump {
        mu_a: f64,
        mu_s_base: f64,
        mu_s_peak: f64,
        center: [f64; 2],
        width: f64,
    },
    /// Constant absorption, scattering `value` inside two disks
    /// `[x, y, r]` and `base` elsewhere.
    TwoDisk {
        mu_a: f64,
        mu_s_base: f64,
        mu_s_value: f64,
        disks: [[f64; 3]; 2],
    },
    /// Per-cell `cell,value` CSV files.
    Table {
        mu_a: PathBuf,
        mu_s: PathBuf,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelConfig {
    #[default]
    Isotropic,
    HenyeyGreenstein {
        g: f64,
    },
    /// Binary block of `n_dirs × n_dirs` tables, one shared or one per cell.
    Table {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default)]
    pub tau: AutoValue,
    #[serde(default)]
    pub dt: AutoValue,
    #[serde(default = "default_cfl")]
    pub cfl_safety: f64,
    /// Steps between recorded norms in `simulate`; defaults to about 50
    /// records per run.
    #[serde(default)]
    pub record_every: Option<usize>,
}

fn default_cfl() -> f64 {
    crate::evolution::DEFAULT_CFL_SAFETY
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            tau: AutoValue::default(),
            dt: AutoValue::default(),
            cfl_safety: default_cfl(),
            record_every: None,
        }
    }
}

/// Named analytic profiles for initial states and control targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileConfig {
    #[default]
    Zero,
    /// `amplitude·exp(−|x−c|²/width²)·(1 + anisotropy·θ·a)`.
    Gaussian {
        center: [f64; 2],
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        anisotropy: f64,
        #[serde(default = "default_axis")]
        axis: [f64; 2],
    },
    /// Indicator of an axis-aligned box, isotropic.
    Box {
        lo: [f64; 2],
        hi: [f64; 2],
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude·exp(−(|x−c| − radius)²/width²)`, isotropic.
    Ring {
        center: [f64; 2],
        radius: f64,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    File {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

fn default_axis() -> [f64; 2] {
    [1.0, 0.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvertMethod {
    Neumann,
    Fredholm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftConfig {
    Zero,
    Stationary,
}

impl From<LiftConfig> for Lift {
    fn from(l: LiftConfig) -> Self {
        match l {
            LiftConfig::Zero => Lift::Zero,
            LiftConfig::Stationary => Lift::Stationary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertConfig {
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "default_lift")]
    pub lift: LiftConfig,
    #[serde(default = "default_method")]
    pub method: InvertMethod,
    /// Synthesize data on the 2× refined grid. Turning it off needs
    /// `--allow-inverse-crime`.
    #[serde(default = "default_true")]
    pub guard: bool,
    /// Measured outflow trace; when given, no synthetic data is made.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_fredholm_tol")]
    pub tol: f64,
    #[serde(default = "default_fredholm_iter")]
    pub max_iter: usize,
}

fn default_n_iter() -> usize {
    20
}

fn default_lift() -> LiftConfig {
    LiftConfig::Zero
}

fn default_method() -> InvertMethod {
    InvertMethod::Neumann
}

fn default_true() -> bool {
    true
}

fn default_fredholm_tol() -> f64 {
    1e-8
}

fn default_fredholm_iter() -> usize {
    3000
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            n_iter: default_n_iter(),
            lift: default_lift(),
            method: default_method(),
            guard: true,
            data: None,
            tol: default_fredholm_tol(),
            max_iter: default_fredholm_iter(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub target: ProfileConfig,
    #[serde(default = "default_control_tol")]
    pub tol: f64,
    #[serde(default = "default_control_iter")]
    pub max_iter: usize,
    #[serde(default = "default_adjoint")]
    pub adjoint_mode: AdjointMode,
    #[serde(default)]
    pub tikhonov: f64,
}

fn default_control_tol() -> f64 {
    1e-3
}

fn default_control_iter() -> usize {
    200
}

fn default_adjoint() -> AdjointMode {
    AdjointMode::ExactDiscrete
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            target: ProfileConfig::Zero,
            tol: default_control_tol(),
            max_iter: default_control_iter(),
            adjoint_mode: default_adjoint(),
            tikhonov: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Times, in units of the crossing time, at which `‖S‖` and `‖R‖` are
    /// estimated.
    #[serde(default = "default_times")]
    pub times_over_t: Vec<f64>,
    #[serde(default = "default_power_iters")]
    pub iters: usize,
    /// Also estimate `‖Q(τ)‖`.
    #[serde(default = "default_true")]
    pub contraction: bool,
}

fn default_times() -> Vec<f64> {
    vec![1.2, 2.0, 3.0]
}

fn default_power_iters() -> usize {
    20
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            times_over_t: default_times(),
            iters: default_power_iters(),
            contraction: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub medium: MediumConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: ProfileConfig,
    #[serde(default)]
    pub invert: InvertConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and makes every file reference absolute, relative to
    /// the directory holding the config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let MediumConfig::Table { mu_a, mu_s } = &mut cfg.medium {
            fix(mu_a);
            fix(mu_s);
        }
        if let KernelConfig::Table { path } = &mut cfg.kernel {
            fix(path);
        }
        if let ProfileConfig::File { path } = &mut cfg.initial {
            fix(path);
        }
        if let ProfileConfig::File { path } = &mut cfg.control.target {
            fix(path);
        }
        if let Some(p) = &mut cfg.invert.data {
            fix(p);
        }
        for p in cfg.referenced_files() {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    /// Every input file the config points at.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let MediumConfig::Table { mu_a, mu_s } = &self.medium {
            out.push(mu_a.clone());
            out.push(mu_s.clone());
        }
        if let KernelConfig::Table { path } = &self.kernel {
            out.push(path.clone());
        }
        if let ProfileConfig::File { path } = &self.initial {
            out.push(path.clone());
        }
        if let ProfileConfig::File { path } = &self.control.target {
            out.push(path.clone());
        }
        if let Some(p) = &self.invert.data {
            out.push(p.clone());
        }
        out
    }

    pub fn build_grid(&self) -> Result<PhaseSpaceGrid> {
        PhaseSpaceGrid::new(&self.geometry)
    }

    pub fn build_medium(&self, grid: &PhaseSpaceGrid) -> Result<Medium> {
        let kernel = match &self.kernel {
            KernelConfig::Isotropic => Kernel::isotropic(grid),
            KernelConfig::HenyeyGreenstein { g } => Kernel::henyey_greenstein(grid, *g)?,
            KernelConfig::Table { path } => Kernel::from_table(grid, read_block(path)?.values)?,
        };
        let n = grid.n_cells();
        let (mu_a, mu_s) = match &self.medium {
            MediumConfig::Constant { mu_a, mu_s } => (vec![*mu_a; n], vec![*mu_s; n]),
            MediumConfig::GaussianBump {
                mu_a,
                mu_s_base,
                mu_s_peak,
                center,
                width,
            } => (vec![*mu_a; n], gaussian_bump(grid, *mu_s_base, *mu_s_peak, *center, *width)),
            MediumConfig::TwoDisk {
                mu_a,
                mu_s_base,
                mu_s_value,
                disks,
            } => {
                let d = disks.map(|[x, y, r]| ([x, y], r));
                (vec![*mu_a; n], two_disk(grid, *mu_s_base, *mu_s_value, d))
            }
            MediumConfig::Table { mu_a, mu_s } => (read_coefficient_csv(mu_a, n)?, read_coefficient_csv(mu_s, n)?),
        };
        Medium::new(grid, mu_a, mu_s, kernel)
    }
}

/// Builds a field from a named profile.
pub fn build_profile(grid: &PhaseSpaceGrid, p: &ProfileConfig) -> Result<Field> {
    Ok(match p {
        ProfileConfig::Zero => Field::zeros(grid),
        ProfileConfig::Gaussian {
            center,
            width,
            amplitude,
            anisotropy,
            axis,
        } => {
            if !(*width > 0.0) {
                return Err(Error::Config(format!("gaussian width must be positive, got {width}")));
            }
            Field::from_fn(grid, |x, t| {
                let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                amplitude * (-r2 / (width * width)).exp() * (1.0 + anisotropy * (t[0] * axis[0] + t[1] * axis[1]))
            })
        }
        ProfileConfig::Box { lo, hi, amplitude } => Field::from_fn(grid, |x, _| {
            let inside = (0..grid.dim()).all(|a| x[a] >= lo[a] && x[a] <= hi[a]);
            if inside {
                *amplitude
            } else {
                0.0
            }
        }),
        ProfileConfig::Ring {
            center,
            radius,
            width,
            amplitude,
        } => {
            if !(*width > 0.0) {
                return Err(Error::Config(format!("ring width must be positive, got {width}")));
            }
            Field::from_fn(grid, |x, _| {
                let r = (x[0] - center[0]).hypot(x[1] - center[1]);
                amplitude * (-((r - radius) / width).powi(2)).exp()
            })
        }
        ProfileConfig::File { path } => read_field(path, grid)?,
    })
}

/// `tau`, `dt` and step count after `auto` resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolvedTime {
    pub tau: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub crossing_time: f64,
}

/// `auto` tau is the suggested contraction horizon, or `2T` when the regime
/// condition fails; `auto` dt is the CFL step fitted to tau.
pub fn resolve_time(cfg: &TimeConfig, grid: &PhaseSpaceGrid, regime: &RegimeReport) -> Result<ResolvedTime> {
    let t = grid.crossing_time();
    let tau = match cfg.tau {
        AutoValue::Value(v) => v,
        AutoValue::Auto(_) => match regime.suggested_tau() {
            Some(v) => v,
            None => {
                warn!("weak-scattering condition fails; auto tau falls back to 2T");
                2.0 * t
            }
        },
    };
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (dt, n_steps) = match cfg.dt {
        AutoValue::Auto(_) => fit_timestep(grid, tau, cfg.cfl_safety)?,
        AutoValue::Value(dt) => {
            let n = EvolutionSpec::new(tau, dt).n_steps(grid)?;
            (dt, n)
        }
    };
    Ok(ResolvedTime {
        tau,
        dt,
        n_steps,
        crossing_time: t,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub allow_inverse_crime: bool,
}

/// Why a run did not finish cleanly; each maps to an exit code.
#[derive(Debug)]
pub enum RunFailure {
    Config(Error),
    Solver(Error),
    /// `(invariant, detail)` pairs.
    Violations(Vec<(String, String)>),
}

impl RunFailure {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunFailure::Config(_) => 1,
            RunFailure::Solver(_) => 2,
            RunFailure::Violations(_) => 3,
        }
    }
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunFailure::Config(e) => write!(f, "config error: {e}"),
            RunFailure::Solver(e) => write!(f, "solver failure: {e}"),
            RunFailure::Violations(v) => {
                write!(f, "{} invariant violation(s)", v.len())?;
                for (name, detail) in v {
                    write!(f, "\n  VIOLATED {name}: {detail}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    /// sha256 of `"blob <len>\0" ++ content`, as git computes object ids.
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub resolved: ResolvedTime,
    pub regime: RegimeReport,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn file_record(path: &Path, shown: String) -> Result<FileRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileRecord {
        path: shown,
        sha256: blob_hash(&bytes),
    })
}

/// Collects output files so the manifest can list every one of them.
struct Outputs {
    dir: PathBuf,
    names: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.names.push(name.to_string());
        self.dir.join(name)
    }

    fn field(&mut self, name: &str, f: &Field) -> Result<()> {
        let p = self.path(name);
        write_field(&p, f)
    }

    fn trace(&mut self, name: &str, h: &BoundaryTrace) -> Result<()> {
        let p = self.path(name);
        write_trace(&p, h)
    }

    fn csv(&mut self, name: &str, t: &CsvTable) -> Result<()> {
        let p = self.path(name);
        t.write(&p)
    }
}

/// Result of a successful run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: PathBuf,
    pub outputs: Vec<PathBuf>,
}

/// Loads the config, runs `command` and writes the manifest.
pub fn run(command: Command, config_path: &Path, opts: &RunOptions) -> std::result::Result<RunSummary, RunFailure> {
    let mut cfg = ExperimentConfig::load(config_path).map_err(RunFailure::Config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    let grid = cfg.build_grid().map_err(RunFailure::Config)?;
    let medium = cfg.build_medium(&grid).map_err(RunFailure::Config)?;
    let regime = regime_report(&medium, &grid);
    print_regime(&regime);
    let time = resolve_time(&cfg.time, &grid, &regime).map_err(RunFailure::Config)?;
    info!(
        "resolved tau = {} ({} T), dt = {}, {} steps",
        time.tau,
        time.tau / time.crossing_time,
        time.dt,
        time.n_steps
    );
    if command == Command::Invert && !cfg.invert.guard && cfg.invert.data.is_none() && !opts.allow_inverse_crime {
        return Err(RunFailure::Config(Error::Config(
            "invert.guard = false synthesizes data on the inversion grid; pass --allow-inverse-crime to permit it".into(),
        )));
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| RunFailure::Config(Error::io(&dir, e)))?;
    let mut out = Outputs {
        dir: dir.clone(),
        names: Vec::new(),
    };
    let ctx = Context {
        cfg: &cfg,
        grid: &grid,
        medium: &medium,
        regime: &regime,
        time,
    };
    match command {
        Command::Simulate => simulate(&ctx, &mut out),
        Command::Invert => invert(&ctx, &mut out),
        Command::Control => control(&ctx, &mut out),
        Command::Spectrum => spectrum(&ctx, &mut out),
        Command::Validate => validate(&ctx, &mut out),
    }?;

    let mut inputs = vec![file_record(config_path, config_path.display().to_string()).map_err(RunFailure::Config)?];
    for p in cfg.referenced_files() {
        inputs.push(file_record(&p, p.display().to_string()).map_err(RunFailure::Config)?);
    }
    let mut outputs = Vec::new();
    for name in &out.names {
        outputs.push(file_record(&dir.join(name), name.clone()).map_err(RunFailure::Solver)?);
    }
    let manifest = Manifest {
        command: command.name().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        resolved: time,
        regime,
        inputs,
        outputs,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| RunFailure::Solver(Error::io(&manifest_path, e)))?;
    Ok(RunSummary {
        outputs: out.names.iter().map(|n| dir.join(n)).collect(),
        output_dir: dir,
        manifest: manifest_path,
    })
}

/// Runs and converts the outcome into a process exit code, printing the
/// failure on stderr.
pub fn run_to_exit_code(command: Command, config_path: &Path, opts: &RunOptions) -> i32 {
    match run(command, config_path, opts) {
        Ok(summary) => {
            println!("wrote {}", summary.manifest.display());
            0
        }
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

fn print_regime(r: &RegimeReport) {
    println!(
        "l = {}, c = {}, T = {}, mu_a_bar = {}, mu_s_bar = {}",
        r.l, r.c, r.crossing_time, r.mu_a_bar, r.mu_s_bar
    );
    println!(
        "weak-scattering condition l*mu_s_bar*exp(l*sigma_bar) = {} < 1: {}",
        r.lhs, r.satisfied
    );
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    grid: &'a PhaseSpaceGrid,
    medium: &'a Medium,
    regime: &'a RegimeReport,
    time: ResolvedTime,
}

type RunResult = std::result::Result<(), RunFailure>;

fn solver<T>(r: Result<T>) -> std::result::Result<T, RunFailure> {
    r.map_err(RunFailure::Solver)
}

fn config<T>(r: Result<T>) -> std::result::Result<T, RunFailure> {
    r.map_err(RunFailure::Config)
}

fn simulate(ctx: &Context, out: &mut Outputs) -> RunResult {
    let g = ctx.grid;
    let u0 = config(build_profile(g, &ctx.cfg.initial))?;
    let every = ctx
        .cfg
        .time
        .record_every
        .unwrap_or((ctx.time.n_steps / 50).max(1))
        .max(1);
    let spec = EvolutionSpec::new(ctx.time.tau, ctx.time.dt)
        .recording()
        .with_snapshots(every);
    let tr = solver(evolve(g, ctx.medium, Dynamics::Direct, &u0, &spec))?;
    let mut norms = CsvTable::new(&["t", "v0_norm", "max_abs"]);
    for (t, f) in tr.times.iter().zip(&tr.snapshots) {
        norms.push(vec![fmt_f64(*t), fmt_f64(g.v0_norm(f)), fmt_f64(f.max_abs())]);
    }
    solver(out.csv("norms.csv", &norms))?;
    solver(out.field("initial.rtef", &u0))?;
    solver(out.field("final.rtef", &tr.final_field))?;
    if let Some(h) = &tr.outflow {
        solver(out.trace("outflow.rtet", h))?;
    }
    println!(
        "simulate: {} steps, |u(tau)|/|u0| = {:.6e}",
        tr.n_steps,
        ratio(g.v0_norm(&tr.final_field), g.v0_norm(&u0))
    );
    Ok(())
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Synthetic measurement of `u0`, on the 2× grid when the guard is on.
fn synthesize(ctx: &Context, u0_profile: &ProfileConfig, guard: bool) -> Result<Measurement> {
    let g = ctx.grid;
    if !guard {
        let u0 = build_profile(g, u0_profile)?;
        return measure_with_dt(g, ctx.medium, &u0, ctx.time.tau, ctx.time.dt);
    }
    if matches!(g.geometry(), Geometry::Disk2d { .. }) {
        return Err(Error::Config(
            "the inverse-crime guard needs a rod or box geometry; use --allow-inverse-crime with guard = false".into(),
        ));
    }
    let fine_cfg: GeometryConfig = g.config().refined(2);
    let fine = PhaseSpaceGrid::new(&fine_cfg)?;
    let fine_medium = ctx.medium.transfer(g, &fine)?;
    let u_fine = build_profile(&fine, u0_profile)?;
    let h_fine = measure_with_dt(&fine, &fine_medium, &u_fine, ctx.time.tau, ctx.time.dt / 2.0)?;
    let trace = restrict_fine_trace(&fine, g, &h_fine.trace)?;
    Measurement::new(trace, ctx.time.tau)
}

fn invert(ctx: &Context, out: &mut Outputs) -> RunResult {
    let g = ctx.grid;
    let icfg = &ctx.cfg.invert;
    let (h, truth) = match &icfg.data {
        Some(p) => {
            let trace = config(read_trace(p, g))?;
            (config(Measurement::new(trace, ctx.time.tau))?, None)
        }
        None => {
            if matches!(ctx.cfg.initial, ProfileConfig::File { .. }) && icfg.guard {
                return Err(RunFailure::Config(Error::Config(
                    "a file initial state cannot be refined for the inverse-crime guard".into(),
                )));
            }
            if !icfg.guard {
                warn!("inverse crime: data synthesized on the inversion grid");
            }
            let h = synthesize(ctx, &ctx.cfg.initial, icfg.guard).map_err(|e| match e {
                Error::Config(_) => RunFailure::Config(e),
                other => RunFailure::Solver(other),
            })?;
            (h, Some(config(build_profile(g, &ctx.cfg.initial))?))
        }
    };
    solver(out.trace("measurement.rtet", &h.trace))?;
    match icfg.method {
        InvertMethod::Neumann => {
            let rep = solver(reconstruct_neumann(
                g,
                ctx.medium,
                &h,
                icfg.n_iter,
                icfg.lift.into(),
                truth.as_ref(),
            ))?;
            let mut t = CsvTable::new(&["iteration", "increment", "ratio", "error"]);
            for (i, inc) in rep.increments.iter().enumerate() {
                let r = if i == 0 { f64::NAN } else { rep.ratios[i - 1] };
                let e = rep.errors.get(i).copied().unwrap_or(f64::NAN);
                t.push(vec![i.to_string(), fmt_f64(*inc), fmt_f64(r), fmt_f64(e)]);
            }
            solver(out.csv("convergence.csv", &t))?;
            solver(out.field("reconstruction.rtef", &rep.final_field))?;
            println!(
                "invert (neumann): {} terms, status {:?}, contraction estimate {}",
                rep.increments.len(),
                rep.status,
                rep.contraction_estimate
            );
            if let Some(e) = rep.errors.last() {
                println!("relative error {e}");
            }
        }
        InvertMethod::Fredholm => {
            if icfg.lift != LiftConfig::Zero {
                return Err(RunFailure::Config(Error::Config(
                    "the fredholm method uses lift = \"zero\"".into(),
                )));
            }
            let rep = solver(solve_fredholm(g, ctx.medium, &h, icfg.tol, icfg.max_iter))?;
            let mut t = CsvTable::new(&["iteration", "relative_residual"]);
            for (i, r) in rep.residual_history.iter().enumerate() {
                t.push(vec![i.to_string(), fmt_f64(*r)]);
            }
            solver(out.csv("convergence.csv", &t))?;
            solver(out.field("reconstruction.rtef", &rep.field))?;
            println!("invert (fredholm): {} iterations", rep.iterations);
            if let Some(tr) = &truth {
                println!(
                    "relative error {}",
                    ratio(g.v0_norm(&rep.field.sub(tr)), g.v0_norm(tr))
                );
            }
        }
    }
    Ok(())
}

fn control(ctx: &Context, out: &mut Outputs) -> RunResult {
    let g = ctx.grid;
    let c = &ctx.cfg.control;
    let target = config(build_profile(g, &c.target))?;
    let opts = ControlOptions {
        tol: c.tol,
        max_iter: c.max_iter,
        mode: c.adjoint_mode,
        tikhonov: c.tikhonov,
    };
    let rep = min_norm_control(g, ctx.medium, &target, ctx.time.tau, ctx.time.dt, &opts).map_err(|e| match e {
        Error::InvalidArgument(_) => RunFailure::Config(e),
        other => RunFailure::Solver(other),
    })?;
    let mut t = CsvTable::new(&["iteration", "relative_residual"]);
    for (i, r) in rep.residual_history.iter().enumerate() {
        t.push(vec![i.to_string(), fmt_f64(*r)]);
    }
    solver(out.csv("cg_residuals.csv", &t))?;
    solver(out.trace("control.rtet", &rep.h_min))?;
    solver(out.field("target.rtef", &target))?;
    solver(out.field("final_state.rtef", &rep.final_state))?;
    println!(
        "control: {} CG iterations, converged {}, achieved relative residual {}, |h| = {}",
        rep.cg_iterations,
        rep.converged,
        rep.achieved,
        rep.h_min.l2_norm(g)
    );
    Ok(())
}

fn spectrum(ctx: &Context, out: &mut Outputs) -> RunResult {
    let g = ctx.grid;
    let s = &ctx.cfg.spectrum;
    let t_cross = g.crossing_time();
    let mut t = CsvTable::new(&["t_over_T", "t", "norm_S", "norm_R", "decay_bound"]);
    for (i, m) in s.times_over_t.iter().enumerate() {
        let time = m * t_cross;
        let seed = ctx.cfg.seed.wrapping_add(i as u64);
        let ns = solver(semigroup_norm(g, ctx.medium, time, Semigroup::S, s.iters.max(3), seed))?;
        let nr = solver(semigroup_norm(g, ctx.medium, time, Semigroup::R, s.iters.max(3), seed))?;
        let bound = ctx.regime.decay_bound(time);
        println!("|S({m}T)| = {ns:.6e}, |R({m}T)| = {nr:.6e}, decay bound {bound:.6e}");
        t.push(vec![fmt_f64(*m), fmt_f64(time), fmt_f64(ns), fmt_f64(nr), fmt_f64(bound)]);
    }
    solver(out.csv("spectrum.csv", &t))?;
    if s.contraction {
        let q = solver(contraction_factor(
            g,
            ctx.medium,
            ctx.time.tau,
            Lift::Zero,
            s.iters.max(1),
            ctx.cfg.seed,
        ))?;
        let bound = ctx.regime.decay_bound(ctx.time.tau).powi(2);
        println!("|Q(tau)| = {q:.6e}, bound from the decay estimate {bound:.6e}");
        let mut t = CsvTable::new(&["tau", "norm_Q", "bound"]);
        t.push(vec![fmt_f64(ctx.time.tau), fmt_f64(q), fmt_f64(bound)]);
        solver(out.csv("contraction.csv", &t))?;
    }
    Ok(())
}

fn random_field(grid: &PhaseSpaceGrid, rng: &mut ChaCha8Rng) -> Field {
    let mut f = Field::zeros(grid);
    f.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    f
}

fn random_inflow(grid: &PhaseSpaceGrid, n: usize, dt: f64, rng: &mut ChaCha8Rng) -> BoundaryTrace {
    let mut h = BoundaryTrace::zeros(grid, TracePart::Inflow, n, dt);
    h.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    h
}

/// Runs the invariant suites; each failure is recorded by name.
fn validate(ctx: &Context, out: &mut Outputs) -> RunResult {
    let g = ctx.grid;
    let m = ctx.medium;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut checks: Vec<(String, bool, String)> = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
        checks.push((name.to_string(), ok, detail));
    };

    let violations = validate_kernel(m, g);
    check(
        "kernel_assumptions",
        violations.is_empty(),
        if violations.is_empty() {
            "conservation and reciprocity hold".into()
        } else {
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
        },
    );

    let f = random_field(g, &mut rng);
    let vv = reflect_angle(g, &reflect_angle(g, &f));
    check(
        "angle_reflection_involution",
        vv.values() == f.values(),
        "V(V f) == f bitwise".into(),
    );
    let norm_ok = (g.v0_norm(&reflect_angle(g, &f)) - g.v0_norm(&f)).abs() <= 1e-14 * g.v0_norm(&f);
    check("angle_reflection_isometry", norm_ok, "|Vf| = |f|".into());

    let n_samples = ctx.time.n_steps + 1;
    let h = random_inflow(g, n_samples, ctx.time.dt, &mut rng);
    let uu = reflect_time(g, &reflect_time(g, &h));
    check(
        "time_reflection_involution",
        uu.values() == h.values() && uu.part() == h.part(),
        "U(U h) == h bitwise".into(),
    );

    let lhs = solver(apply_scattering(m, g, &reflect_angle(g, &f)))?;
    let rhs = reflect_angle(g, &solver(apply_scattering_adjoint(m, g, &f))?);
    let d = g.v0_norm(&lhs.sub(&rhs));
    let scale = g.v0_norm(&f) * (1.0 + m.mu_s_bar());
    check(
        "reflection_intertwines_scattering",
        d <= 1e-12 * scale,
        format!("|K V f - V K* f| = {d:e}"),
    );

    // duality of the control map with the exact discrete adjoint
    let wt = random_field(g, &mut rng);
    let uh = solver(steer(g, m, &h, ctx.time.tau))?;
    let ustar = solver(adjoint_steer(
        g,
        m,
        &wt,
        ctx.time.tau,
        ctx.time.dt,
        AdjointMode::ExactDiscrete,
    ))?;
    let a = solver(g.v0_inner(&uh, &wt))?;
    let b = h.l2_inner(g, &ustar);
    let rel = (a - b).abs() / (a.abs().max(b.abs()).max(1e-300));
    check(
        "control_adjoint_identity",
        rel <= 1e-10,
        format!("<Yh, g> = {a}, <h, Y*g> = {b}, relative gap {rel:e}"),
    );

    // nonnegative data stay nonnegative under the direct evolution
    let mut pos = random_field(g, &mut rng);
    pos.values_mut().iter_mut().for_each(|v| *v = v.abs());
    let tr = solver(evolve(
        g,
        m,
        Dynamics::Direct,
        &pos,
        &EvolutionSpec::new(ctx.time.tau, ctx.time.dt),
    ))?;
    let min = tr.final_field.values().iter().copied().fold(f64::INFINITY, f64::min);
    check(
        "direct_positivity",
        min >= -1e-12 * pos.max_abs(),
        format!("min u(tau) = {min:e}"),
    );

    let stat = solve_stationary_direct(g, m, &StationarySpec::new(pos.clone()));
    match stat {
        Ok(s) => {
            let last = *s.residual_history.last().unwrap();
            check(
                "stationary_residual_certificate",
                last <= s.tol,
                format!("residual {last:e} after {} sweeps, tol {:e}", s.sweeps, s.tol),
            );
        }
        Err(e) => check("stationary_residual_certificate", false, e.to_string()),
    }

    let mut t = CsvTable::new(&["invariant", "ok", "detail"]);
    for (name, ok, detail) in &checks {
        t.push(vec![name.clone(), ok.to_string(), detail.clone()]);
    }
    solver(out.csv("validation.csv", &t))?;
    let failed: Vec<(String, String)> = checks
        .into_iter()
        .filter(|c| !c.1)
        .map(|(n, _, d)| (n, d))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(RunFailure::Violations(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOX: &str = r#"
        seed = 3
        [geometry]
        kind = "box2d"
        width = 1.0
        height = 1.0
        n_cells = [8]
        n_theta = 4
        [medium]
        profile = "constant"
        mu_a = 0.0
        mu_s = 0.1
        [kernel]
        kind = "henyey-greenstein"
        g = 0.3
    "#;

    #[test]
    fn parses_defaults_and_auto() {
        let cfg = ExperimentConfig::from_toml(BOX).unwrap();
        assert_eq!(cfg.time.tau, AutoValue::Auto(AutoTag::Auto));
        assert_eq!(cfg.invert.method, InvertMethod::Neumann);
        assert!(cfg.invert.guard);
        assert_eq!(cfg.spectrum.times_over_t, vec![1.2, 2.0, 3.0]);
        let g = cfg.build_grid().unwrap();
        let m = cfg.build_medium(&g).unwrap();
        let r = regime_report(&m, &g);
        let t = resolve_time(&cfg.time, &g, &r).unwrap();
        assert!((t.tau - 3.0 * g.crossing_time()).abs() < 1e-12);
        assert!((t.n_steps as f64 * t.dt - t.tau).abs() < 1e-12);
    }

    #[test]
    fn numeric_tau_is_kept() {
        let text = format!("{BOX}\n[time]\ntau = 2.5\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.time.tau, AutoValue::Value(2.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{BOX}\n[invert]\nbogus = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn blob_hash_matches_git() {
        // object id of "hello\n" in a sha256 git repository
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(RunFailure::Config(Error::Config(String::new())).exit_code(), 1);
        assert_eq!(RunFailure::Solver(Error::InvalidArgument(String::new())).exit_code(), 2);
        assert_eq!(RunFailure::Violations(vec![]).exit_code(), 3);
    }
}
