//! Command-line front end: `simulate`, `steady`, `sweep`, `verify`, `replay`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    distance_sq, dissipation_sweep_checks, epsilon_d, point_config, point_initial, shells_for,
    sweep_runs, InitialData, SweepOptions, SweepResult,
};
use crate::integrator::{energy_inequality_check, integrate, IntegratorConfig, RunSeries, Scheme};
use crate::model::ModelParams;
use crate::steady::{
    check_decay_bound, check_gj_bound, check_monotonicity, newton_oracle_continued, solve_fixed_point, GjReport,
    SolverOptions, SteadyState,
};
use crate::verify;

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "SHELLFLOW_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "shellflow",
    version,
    about = "Simulate and verify the viscous dyadic shell model",
    args_override_self = true
)]
pub struct Cli {
    /// TOML file of flag defaults (same keys as the long flags); explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the truncated system and write a run directory.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Simulate(SimulateArgs),
    /// Solve for the fixed point and print it as JSON.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Steady(SteadyArgs),
    /// Time-averaged dissipation over a viscosity grid.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Sweep(SweepArgs),
    /// Run the invariant suite over a pinned parameter matrix.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Verify(VerifyArgs),
    /// Re-execute a run from its manifest.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Zero,
    Random,
    FixedPoint,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Auto,
    IntegratingFactor,
    Rosenbrock,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Auto => Scheme::Auto,
            SchemeArg::IntegratingFactor => Scheme::IntegratingFactor,
            SchemeArg::Rosenbrock => Scheme::Rosenbrock,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub c: f64,
    #[arg(long)]
    pub nu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f0: f64,
    /// Truncation index N; defaults to the smallest N with 2^N >= 8 kappa_d.
    #[arg(long)]
    pub shells: Option<usize>,
    #[arg(long, default_value_t = 50.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub abs_tol: f64,
    /// Sampling interval; defaults to t_end / 500.
    #[arg(long)]
    pub sample_every: Option<f64>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Auto)]
    pub scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = InitKind::Zero)]
    pub init: InitKind,
    /// Amplitudes for `--init file`: a JSON array or a final_state.json.
    #[arg(long, value_name = "PATH")]
    pub init_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Append a_0..a_N to every series row.
    #[arg(long)]
    pub full_state: bool,
    /// Append |a - alpha| against the fixed point (implied by `--init fixed-point`).
    #[arg(long)]
    pub track_b: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SteadyArgs {
    #[arg(long)]
    pub c: f64,
    #[arg(long)]
    pub nu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f0: f64,
    /// Shooting horizon.
    #[arg(long)]
    pub jmax: Option<usize>,
    #[arg(long, default_value_t = 1e-14)]
    pub tol_a0: f64,
    /// Compare with the Newton solution of the truncated system.
    #[arg(long)]
    pub newton_check: bool,
    /// Also write the document to this file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub c: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f0: f64,
    /// Comma-separated viscosities.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with = "nu_decades")]
    pub nu_list: Option<Vec<f64>>,
    /// `A:B`: one point per decade from 10^A down to 10^B.
    #[arg(long, allow_hyphen_values = true, value_name = "A:B")]
    pub nu_decades: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Fraction of t_end discarded before averaging.
    #[arg(long, default_value_t = 0.5)]
    pub transient: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sample_every: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub abs_tol: f64,
    /// Fixed truncation instead of the resolution rule.
    #[arg(long)]
    pub shells: Option<usize>,
    #[arg(long, value_enum, default_value_t = InitKind::Zero)]
    pub init: InitKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Desk-scale matrix.
    #[arg(long)]
    pub quick: bool,
    /// Shift of the gain exponent, to confirm the suite catches a broken model.
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub mutate_gain_shift: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputOptions {
    pub format: Format,
    pub full_state: bool,
    pub track_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub c: f64,
    pub f0: f64,
    pub nu_grid: Vec<f64>,
    pub options: SweepOptions,
}

/// Everything needed to re-run a simulation or sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub params: Option<ModelParams>,
    pub integrator: Option<IntegratorConfig>,
    pub initial: Option<InitialData>,
    pub seed: Option<u64>,
    pub outputs: Option<OutputOptions>,
    pub sweep: Option<SweepSpec>,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<String>,
    pub checks: Vec<CheckRecord>,
    pub status: String,
    pub error: Option<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).cloned().collect();
    let res = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, recorded).map(|_| EXIT_OK),
        Command::Steady(a) => cmd_steady(&a),
        Command::Sweep(a) => cmd_sweep(&a, recorded),
        Command::Verify(a) => Ok(cmd_verify(&a)),
        Command::Replay(a) => cmd_replay(&a).map(|_| EXIT_OK),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

/// Splices the key/value pairs of `--config FILE` in front of the remaining
/// flags of the subcommand, so that explicit flags override them.
pub fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let table: toml::Table = text.parse().map_err(|e| format!("config {path}: {e}"))?;
    let mut extra = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => extra.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => {
                extra.push(flag);
                extra.push(s);
            }
            toml::Value::Integer(i) => {
                extra.push(flag);
                extra.push(i.to_string());
            }
            toml::Value::Float(f) => {
                extra.push(flag);
                extra.push(format!("{f:e}"));
            }
            toml::Value::Array(items) => {
                let parts: std::result::Result<Vec<String>, String> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) => Ok(i.to_string()),
                        toml::Value::Float(f) => Ok(format!("{f:e}")),
                        toml::Value::String(s) => Ok(s.clone()),
                        other => Err(format!("config key {key}: unsupported list item {other}")),
                    })
                    .collect();
                extra.push(format!("{flag}={}", parts?.join(",")));
            }
            other => return Err(format!("config key {key}: unsupported value {other}")),
        }
    }
    // Insert right after the subcommand name.
    let pos = rest
        .iter()
        .position(|a| ["simulate", "steady", "sweep", "verify", "replay"].contains(&a.as_str()))
        .ok_or("--config given without a subcommand")?;
    rest.splice(pos + 1..pos + 1, extra);
    Ok(rest)
}

/// Resolves an output directory: explicit paths are taken relative to
/// `$SHELLFLOW_OUT_DIR` when it is set; without `--out` a fresh
/// `<command>-<timestamp>` directory under that root is used.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    match (out, root) {
        (Some(p), Some(r)) if p.is_relative() => r.join(p),
        (Some(p), _) => p.to_path_buf(),
        (None, r) => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3f");
            r.unwrap_or_else(|| PathBuf::from("runs")).join(format!("{command}-{stamp}"))
        }
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::InvalidParams(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Column names of series.csv.
pub fn series_header(n_shells: usize, full_state: bool, track_b: bool) -> Vec<String> {
    let mut h: Vec<String> = ["t", "E", "H1_sq", "injection"].iter().map(|s| s.to_string()).collect();
    h.extend((0..=n_shells).map(|j| format!("Pi_{j}")));
    if full_state {
        h.extend((0..=n_shells).map(|j| format!("a_{j}")));
    }
    if track_b {
        h.push("b_l2".into());
    }
    h
}

pub fn series_csv(series: &RunSeries, full_state: bool, b: Option<&[f64]>) -> String {
    let n = series.params.n_shells;
    let mut s = series_header(n, full_state, b.is_some()).join(",");
    s.push('\n');
    for (k, row) in series.rows.iter().enumerate() {
        let mut cells = vec![num(row.t), num(row.energy), num(row.h1_sq), num(row.injection)];
        cells.extend(row.flux.iter().map(|&x| num(x)));
        if full_state {
            cells.extend(series.states[k].iter().map(|&x| num(x)));
        }
        if let Some(b) = b {
            cells.push(num(b[k]));
        }
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

#[derive(Serialize)]
struct SeriesJsonRow<'a> {
    t: f64,
    #[serde(rename = "E")]
    energy: f64,
    #[serde(rename = "H1_sq")]
    h1_sq: f64,
    injection: f64,
    #[serde(rename = "Pi")]
    flux: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b_l2: Option<f64>,
}

pub fn series_json(series: &RunSeries, full_state: bool, b: Option<&[f64]>) -> Result<String> {
    let rows: Vec<SeriesJsonRow> = series
        .rows
        .iter()
        .enumerate()
        .map(|(k, r)| SeriesJsonRow {
            t: r.t,
            energy: r.energy,
            h1_sq: r.h1_sq,
            injection: r.injection,
            flux: &r.flux,
            a: full_state.then(|| series.states[k].as_slice()),
            b_l2: b.map(|b| b[k]),
        })
        .collect();
    let doc = serde_json::json!({ "schema_version": SCHEMA_VERSION, "rows": rows });
    Ok(serde_json::to_string_pretty(&doc)?)
}

fn read_initial_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let arr = match &v {
        serde_json::Value::Array(_) => v.clone(),
        serde_json::Value::Object(m) => m
            .get("a")
            .cloned()
            .ok_or_else(|| Error::InvalidParams(format!("{}: object without an \"a\" field", path.display())))?,
        _ => return Err(Error::InvalidParams(format!("{}: expected an array of amplitudes", path.display()))),
    };
    Ok(serde_json::from_value(arr)?)
}

/// Inputs of one simulation, as recorded in its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub params: ModelParams,
    pub config: IntegratorConfig,
    pub initial: InitialData,
    pub seed: Option<u64>,
    pub outputs: OutputOptions,
}

fn simulation_spec(a: &SimulateArgs) -> Result<SimulationSpec> {
    let n = match a.shells {
        Some(n) => n,
        None if a.nu == 0.0 => return Err(Error::InvalidParams("--shells is required when --nu is 0".into())),
        None => shells_for(a.c, a.nu, a.f0)?,
    };
    let params = ModelParams::new(a.c, a.nu, a.f0, n)?;
    let initial = match a.init {
        InitKind::Zero => InitialData::Zero,
        InitKind::Random => InitialData::Random { seed: a.seed },
        InitKind::FixedPoint => InitialData::FixedPoint,
        InitKind::File => {
            let path = a
                .init_file
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("--init file needs --init-file PATH".into()))?;
            InitialData::Given {
                a: read_initial_file(path)?,
            }
        }
    };
    if a.init != InitKind::File && a.init_file.is_some() {
        return Err(Error::InvalidParams("--init-file is only valid with --init file".into()));
    }
    let config = IntegratorConfig {
        rel_tol: a.rel_tol,
        abs_tol: a.abs_tol,
        t_end: a.t_end,
        sample_every: a.sample_every.unwrap_or(a.t_end / 500.0),
        scheme: a.scheme.into(),
        ..Default::default()
    };
    config.validate()?;
    Ok(SimulationSpec {
        params,
        config,
        seed: (a.init == InitKind::Random).then_some(a.seed),
        outputs: OutputOptions {
            format: a.format,
            full_state: a.full_state,
            track_b: a.track_b || a.init == InitKind::FixedPoint,
        },
        initial,
    })
}

pub fn cmd_simulate(a: &SimulateArgs, argv: Vec<String>) -> Result<PathBuf> {
    let spec = simulation_spec(a)?;
    let dir = resolve_out(a.out.as_deref(), "simulate");
    prepare_dir(&dir, a.force)?;
    run_simulation(&spec, &dir, argv)?;
    println!("{}", dir.display());
    Ok(dir)
}

/// Runs a simulation into `dir`, writing the manifest even on failure.
pub fn run_simulation(spec: &SimulationSpec, dir: &Path, argv: Vec<String>) -> Result<()> {
    let started_at = now();
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        command: "simulate".into(),
        argv,
        params: Some(spec.params),
        integrator: Some(spec.config.clone()),
        initial: Some(spec.initial.clone()),
        seed: spec.seed,
        outputs: Some(spec.outputs.clone()),
        sweep: None,
        started_at,
        finished_at: String::new(),
        artifacts: Vec::new(),
        checks: Vec::new(),
        status: "ok".into(),
        error: None,
    };
    let result = simulate_into(spec, dir, &mut manifest);
    if let Err(e) = &result {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
    }
    manifest.finished_at = now();
    manifest.artifacts.push("manifest.json".into());
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    result
}

fn simulate_into(spec: &SimulationSpec, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let initial = spec.initial.build(&spec.params)?;
    let series = integrate(&spec.params, &spec.config, &initial)?;
    let b: Option<Vec<f64>> = if spec.outputs.track_b {
        let steady = solve_fixed_point(&spec.params, &SolverOptions::default())?;
        let alpha = steady.alpha_on(spec.params.n_shells);
        Some(distance_sq(&series, &alpha).into_iter().map(f64::sqrt).collect())
    } else {
        None
    };
    let (name, body) = match spec.outputs.format {
        Format::Csv => ("series.csv", series_csv(&series, spec.outputs.full_state, b.as_deref())),
        Format::Json => ("series.json", series_json(&series, spec.outputs.full_state, b.as_deref())?),
    };
    fs::write(dir.join(name), body)?;
    fs::write(dir.join("final_state.json"), serde_json::to_string_pretty(&series.final_state)?)?;
    manifest.artifacts = vec![name.into(), "final_state.json".into()];
    manifest.checks = run_checks(&series, b.as_deref());
    if manifest.checks.iter().any(|c| !c.pass) {
        manifest.status = "checks-failed".into();
    }
    Ok(())
}

fn run_checks(series: &RunSeries, b: Option<&[f64]>) -> Vec<CheckRecord> {
    let cfg = &series.config;
    let mut out = vec![CheckRecord {
        name: "positivity".into(),
        pass: series.step_stats.min_relative_amplitude >= -cfg.positivity_tol,
        detail: format!("min_j a_j / max|a| = {:e}", series.step_stats.min_relative_amplitude),
    }];
    if let Ok(e) = energy_inequality_check(series) {
        out.push(CheckRecord {
            name: "energy_balance".into(),
            pass: e.within(cfg.rel_tol, 10.0),
            detail: format!(
                "max |residual| = {:e}, max signed = {:e}, scale = {:e}",
                e.max_abs, e.max_signed, e.scale
            ),
        });
    }
    if let Some(b) = b {
        let last = b.last().copied().unwrap_or(0.0);
        out.push(CheckRecord {
            name: "final_distance_to_fixed_point".into(),
            pass: last.is_finite(),
            detail: format!("|b(t_end)| = {last:e}"),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonCheck {
    pub n_shells: usize,
    pub iterations: usize,
    pub residual: f64,
    pub max_rel_diff: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyChecks {
    pub monotonic: bool,
    pub decay_bound: bool,
    pub gj_bound: GjReport,
    pub newton_agreement: Option<bool>,
    pub newton: Option<NewtonCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyDocument {
    pub schema_version: u32,
    #[serde(flatten)]
    pub steady: SteadyState,
    pub checks: SteadyChecks,
}

/// Truncation for the Newton comparison: the first shell below `1e-60`.
pub fn newton_truncation(alpha: &[f64]) -> usize {
    alpha.iter().position(|&x| x < 1e-60).unwrap_or(alpha.len() - 1).max(2)
}

/// Largest relative difference on shells above `1e-30`.
pub fn max_rel_diff(a: &[f64], reference: &[f64]) -> f64 {
    reference
        .iter()
        .zip(a)
        .filter(|(r, _)| r.abs() > 1e-30)
        .map(|(r, x)| ((x - r) / r).abs())
        .fold(0.0, f64::max)
}

pub fn steady_document(a: &SteadyArgs) -> Result<SteadyDocument> {
    let params = ModelParams::new(a.c, a.nu, a.f0, 2)?;
    let opts = SolverOptions {
        tol_a0: a.tol_a0,
        j_max: a.jmax,
        ..Default::default()
    };
    let steady = solve_fixed_point(&params, &opts)?;
    let strict = steady.mu > 0.0;
    let mut checks = SteadyChecks {
        monotonic: check_monotonicity(&steady.a_rescaled, strict),
        decay_bound: check_decay_bound(&steady.a_rescaled, steady.mu, steady.beta),
        gj_bound: check_gj_bound(&steady.a_rescaled, steady.mu, steady.beta),
        newton_agreement: None,
        newton: None,
    };
    if a.newton_check && a.nu > 0.0 {
        let n = newton_truncation(&steady.alpha);
        let p = ModelParams { n_shells: n, ..params };
        let rep = newton_oracle_continued(&p)?;
        let diff = max_rel_diff(&rep.alpha, &steady.alpha_on(n));
        checks.newton_agreement = Some(rep.converged() && diff < 1e-8);
        checks.newton = Some(NewtonCheck {
            n_shells: n,
            iterations: rep.iterations,
            residual: rep.residual,
            max_rel_diff: diff,
            converged: rep.converged(),
        });
    }
    Ok(SteadyDocument {
        schema_version: SCHEMA_VERSION,
        steady,
        checks,
    })
}

pub fn cmd_steady(a: &SteadyArgs) -> Result<i32> {
    let doc = steady_document(a)?;
    let text = serde_json::to_string_pretty(&doc)?;
    if let Some(path) = &a.out {
        let path = resolve_out(Some(path), "steady");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(EXIT_OK)
}

/// Viscosity grid from `--nu-list` or `--nu-decades`, sorted descending.
pub fn nu_grid(a: &SweepArgs) -> Result<Vec<f64>> {
    let mut grid = match (&a.nu_list, &a.nu_decades) {
        (Some(list), None) => list.clone(),
        (None, Some(spec)) => {
            let (lo, hi) = spec
                .split_once(':')
                .ok_or_else(|| Error::InvalidParams(format!("--nu-decades expects A:B, got {spec}")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<i32>()
                    .map_err(|_| Error::InvalidParams(format!("--nu-decades expects integers, got {spec}")))
            };
            let (a0, b0) = (parse(lo)?, parse(hi)?);
            let (top, bottom) = (a0.max(b0), a0.min(b0));
            (bottom..=top).rev().map(|k| 10f64.powi(k)).collect()
        }
        _ => return Err(Error::InvalidParams("give exactly one of --nu-list and --nu-decades".into())),
    };
    if grid.is_empty() {
        return Err(Error::InvalidParams("empty viscosity list".into()));
    }
    grid.sort_by(|x, y| y.total_cmp(x));
    grid.dedup();
    Ok(grid)
}

pub fn summary_header() -> &'static str {
    "nu,N,avg_dissipation,alpha0_f0,epsilon_d,attractor_rate,gamma_bound,spectrum_slope,kappa_d_pred,kappa_d_obs,resolved"
}

pub fn summary_csv(results: &[SweepResult]) -> String {
    let mut s = String::from(summary_header());
    s.push('\n');
    for r in results {
        let fin = |x: f64| if x.is_finite() { num(x) } else { String::new() };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            num(r.nu),
            r.n_shells,
            fin(r.avg_dissipation),
            fin(r.alpha_inner_product),
            fin(r.epsilon_d),
            opt_num(r.attractor_rate),
            fin(r.gamma_bound),
            opt_num(r.spectrum_slope),
            fin(r.kappa_d_predicted),
            opt_num(r.kappa_d_observed),
            r.valid()
        );
    }
    s
}

fn sweep_options(a: &SweepArgs) -> Result<SweepOptions> {
    let initial = match a.init {
        InitKind::Zero => InitialData::Zero,
        InitKind::Random => InitialData::Random { seed: a.seed },
        InitKind::FixedPoint => InitialData::FixedPoint,
        InitKind::File => return Err(Error::InvalidParams("sweep supports --init zero|random|fixed-point".into())),
    };
    if !(a.transient >= 0.0 && a.transient < 1.0) {
        return Err(Error::InvalidParams(format!("--transient must lie in [0, 1), got {}", a.transient)));
    }
    Ok(SweepOptions {
        jobs: a.jobs.max(1),
        t_end: a.t_end,
        transient_fraction: a.transient,
        sample_every: a.sample_every,
        rel_tol: a.rel_tol,
        abs_tol: a.abs_tol,
        initial,
        n_shells: a.shells,
    })
}

pub fn cmd_sweep(a: &SweepArgs, argv: Vec<String>) -> Result<i32> {
    let grid = nu_grid(a)?;
    let opts = sweep_options(a)?;
    epsilon_d(a.c, a.f0)?;
    let dir = resolve_out(a.out.as_deref(), "sweep");
    prepare_dir(&dir, a.force)?;
    let spec = SweepSpec {
        c: a.c,
        f0: a.f0,
        nu_grid: grid,
        options: opts,
    };
    let code = run_sweep(&spec, &dir, argv)?;
    println!("{}", dir.display());
    Ok(code)
}

/// Runs a sweep into `dir`: per-point run directories, then summary.csv and
/// the sweep manifest.
pub fn run_sweep(spec: &SweepSpec, dir: &Path, argv: Vec<String>) -> Result<i32> {
    let started_at = now();
    let runs = sweep_runs(spec.c, spec.f0, &spec.nu_grid, &spec.options)?;
    let mut artifacts = vec!["summary.csv".to_string()];
    for (k, (res, series)) in runs.iter().enumerate() {
        let name = format!("point-{k:03}");
        let pdir = dir.join(&name);
        fs::create_dir_all(&pdir)?;
        write_point(spec, res, series.as_ref(), &pdir, &started_at)?;
        artifacts.push(name);
    }
    let results: Vec<SweepResult> = runs.into_iter().map(|(r, _)| r).collect();
    fs::write(dir.join("summary.csv"), summary_csv(&results))?;
    let mut checks: Vec<CheckRecord> = results
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| CheckRecord {
                name: format!("point nu={:e}", r.nu),
                pass: false,
                detail: e.clone(),
            })
        })
        .collect();
    checks.extend(dissipation_sweep_checks(&results).into_iter().map(|(name, pass, detail)| CheckRecord {
        name,
        pass,
        detail,
    }));
    let all_failed = results.iter().all(|r| r.error.is_some());
    artifacts.push("manifest.json".into());
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        command: "sweep".into(),
        argv,
        params: None,
        integrator: None,
        initial: Some(spec.options.initial.clone()),
        seed: match spec.options.initial {
            InitialData::Random { seed } => Some(seed),
            _ => None,
        },
        outputs: None,
        sweep: Some(spec.clone()),
        started_at,
        finished_at: now(),
        artifacts,
        checks,
        status: if all_failed { "failed".into() } else { "ok".into() },
        error: None,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for r in &results {
        if let Some(e) = &r.error {
            eprintln!("nu = {:e}: {e}", r.nu);
        }
    }
    Ok(if all_failed { EXIT_NUMERICAL } else { EXIT_OK })
}

fn write_point(
    spec: &SweepSpec,
    res: &SweepResult,
    series: Option<&RunSeries>,
    pdir: &Path,
    started_at: &str,
) -> Result<()> {
    fs::write(pdir.join("result.json"), serde_json::to_string_pretty(res)?)?;
    let mut artifacts = vec!["result.json".to_string()];
    let params = ModelParams::new(spec.c, res.nu, spec.f0, res.n_shells.max(2)).ok();
    if let Some(s) = series {
        fs::write(pdir.join("series.csv"), series_csv(s, false, None))?;
        fs::write(pdir.join("final_state.json"), serde_json::to_string_pretty(&s.final_state)?)?;
        artifacts.push("series.csv".into());
        artifacts.push("final_state.json".into());
    }
    artifacts.push("manifest.json".into());
    let initial = point_initial(&spec.options.initial, res.nu);
    // Recorded as a plain simulation so the point can be replayed alone.
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        command: "simulate".into(),
        argv: Vec::new(),
        params,
        integrator: Some(point_config(&spec.options)),
        seed: match initial {
            InitialData::Random { seed } => Some(seed),
            _ => None,
        },
        initial: Some(initial),
        outputs: Some(OutputOptions {
            format: Format::Csv,
            full_state: false,
            track_b: false,
        }),
        sweep: None,
        started_at: started_at.to_string(),
        finished_at: now(),
        artifacts,
        checks: series.map(|s| run_checks(s, None)).unwrap_or_default(),
        status: if res.error.is_some() { "failed".into() } else { "ok".into() },
        error: res.error.clone(),
    };
    fs::write(pdir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn cmd_verify(a: &VerifyArgs) -> i32 {
    let started = std::time::Instant::now();
    let report = verify::run_suite(a.quick, a.mutate_gain_shift);
    print!("{}", verify::render(&report));
    let failed = report.iter().filter(|c| !c.pass).count();
    println!(
        "{} checks, {} failed, {:.1} s",
        report.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    let m: RunManifest = serde_json::from_str(&text)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidParams(format!(
            "manifest schema {} is not supported (expected {SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

pub fn cmd_replay(a: &ReplayArgs) -> Result<PathBuf> {
    let m = read_manifest(&a.manifest)?;
    let dir = resolve_out(a.out.as_deref(), "replay");
    let argv = vec!["replay".into(), "--manifest".into(), a.manifest.display().to_string()];
    match m.command.as_str() {
        "simulate" => {
            let missing = |what: &str| Error::InvalidParams(format!("manifest lacks {what}"));
            let spec = SimulationSpec {
                params: m.params.ok_or_else(|| missing("params"))?,
                config: m.integrator.ok_or_else(|| missing("integrator"))?,
                initial: m.initial.ok_or_else(|| missing("initial"))?,
                seed: m.seed,
                outputs: m.outputs.ok_or_else(|| missing("outputs"))?,
            };
            prepare_dir(&dir, a.force)?;
            run_simulation(&spec, &dir, argv)?;
        }
        "sweep" => {
            let spec = m.sweep.ok_or_else(|| Error::InvalidParams("manifest lacks sweep".into()))?;
            prepare_dir(&dir, a.force)?;
            if run_sweep(&spec, &dir, argv)? != EXIT_OK {
                return Err(Error::SolveFailed("every sweep point failed".into()));
            }
        }
        other => return Err(Error::InvalidParams(format!("cannot replay command {other}"))),
    }
    println!("{}", dir.display());
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_keys_precede_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "c = 2.0\nnu = 0.1\nfull_state = true\nnu-list = [0.1, 0.01]\n").unwrap();
        let argv = expand_config(v(&["shellflow", "--config", path.to_str().unwrap(), "simulate", "--nu", "0.5"])).unwrap();
        assert_eq!(argv[1], "simulate");
        let pos_cfg = argv.iter().position(|a| a == "--full-state").unwrap();
        let pos_cli = argv.iter().rposition(|a| a == "--nu").unwrap();
        assert!(pos_cfg < pos_cli);
        assert!(argv.contains(&"--nu-list=1e-1,1e-2".to_string()));
    }

    #[test]
    fn explicit_flag_overrides_config() {
        let argv = v(&["shellflow", "simulate", "--c", "2", "--nu", "0.1", "--nu", "0.5"]);
        let cli = Cli::try_parse_from(argv).unwrap();
        match cli.command {
            Command::Simulate(a) => assert_eq!(a.nu, 0.5),
            _ => unreachable!(),
        }
    }

    #[test]
    fn grid_from_decades() {
        let cli = Cli::try_parse_from(v(&["shellflow", "sweep", "--c", "2", "--nu-decades", "-1:-3"])).unwrap();
        let Command::Sweep(a) = cli.command else { unreachable!() };
        let g = nu_grid(&a).unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[0] - 0.1).abs() < 1e-17 && (g[2] - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn header_layout() {
        let h = series_header(2, true, true);
        assert_eq!(
            h,
            v(&["t", "E", "H1_sq", "injection", "Pi_0", "Pi_1", "Pi_2", "a_0", "a_1", "a_2", "b_l2"])
        );
    }

    #[test]
    fn csv_numbers_round_trip() {
        let x = 0.1 + 0.2;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
        let y = 1.0 / 3.0 * 1e-200;
        assert_eq!(num(y).parse::<f64>().unwrap(), y);
    }
}
