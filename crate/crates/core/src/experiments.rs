//! Experiment drivers: attractor rate, dissipation sweep, spectrum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{energy_inequality_check, integrate, EnergyCheck, IntegratorConfig, RunSeries};
use crate::model::{hs_norm_sq, ModelParams, ShellState};
use crate::steady::{dissipation_index, rescale_mu_beta, solve_fixed_point, SolverOptions, SteadyState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonD {
    pub value: f64,
}

/// Dissipation rate of the inviscid fixed point, `2^{c/6} f0^{3/2}`.
pub fn epsilon_d(c: f64, f0: f64) -> Result<EpsilonD> {
    if !(f0.is_finite() && f0 > 0.0) {
        return Err(Error::InvalidParams(format!("f0 must be > 0, got {f0}")));
    }
    Ok(EpsilonD {
        value: (c / 6.0).exp2() * f0.powf(1.5),
    })
}

/// Closed-form dissipation wavenumber `(f0^{3/2} / nu^3)^{(1/4)(2/(3-c))}`.
pub fn kappa_d_predicted(c: f64, nu: f64, f0: f64) -> Result<f64> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParams(format!("nu must be > 0, got {nu}")));
    }
    if !(c < 3.0) {
        return Err(Error::InvalidParams(format!("c must be < 3, got {c}")));
    }
    if !(f0 > 0.0 && f0.is_finite()) {
        return Err(Error::InvalidParams(format!("f0 must be > 0, got {f0}")));
    }
    Ok((f0.powf(1.5) / nu.powi(3)).powf(0.25 * 2.0 / (3.0 - c)))
}

/// `2^J` with `mu 2^{beta J} = 1`.
pub fn kappa_d_exact(params: &ModelParams) -> Option<f64> {
    let (mu, beta) = rescale_mu_beta(params);
    dissipation_index(mu, beta).map(f64::exp2)
}

/// Smallest `N >= 2` with `2^N >= 8 kappa_d`, taking the larger of the
/// closed-form and exact wavenumbers.
pub fn shells_for(c: f64, nu: f64, f0: f64) -> Result<usize> {
    let pred = kappa_d_predicted(c, nu, f0)?;
    let p = ModelParams::new(c, nu, f0, 2)?;
    let kappa = kappa_d_exact(&p).unwrap_or(pred).max(pred);
    Ok(((8.0 * kappa).log2().ceil().max(2.0)) as usize)
}

/// Nonnegative random data `a_j = |g_j| 2^{-j}`, `g_j` standard normal.
pub fn random_initial(params: &ModelParams, seed: u64) -> ShellState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..params.len())
        .map(|j| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g.abs() * (-(j as f64)).exp2()
        })
        .collect();
    ShellState::new(0.0, a)
}

/// Initial data families used by the drivers and the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitialData {
    Zero,
    Random { seed: u64 },
    FixedPoint,
    Given { a: Vec<f64> },
}

impl InitialData {
    pub fn build(&self, params: &ModelParams) -> Result<ShellState> {
        match self {
            InitialData::Zero => Ok(ShellState::zeros(params)),
            InitialData::Random { seed } => Ok(random_initial(params, *seed)),
            InitialData::FixedPoint => {
                let s = solve_fixed_point(params, &SolverOptions::default())?;
                Ok(ShellState::new(0.0, s.alpha_on(params.n_shells)))
            }
            InitialData::Given { a } => {
                if a.len() != params.len() {
                    return Err(Error::ShapeMismatch {
                        expected: params.len(),
                        got: a.len(),
                    });
                }
                Ok(ShellState::new(0.0, a.clone()))
            }
        }
    }
}

/// `|a - alpha|^2` for every sample.
pub fn distance_sq(series: &RunSeries, alpha: &[f64]) -> Vec<f64> {
    series
        .states
        .iter()
        .map(|a| a.iter().zip(alpha).map(|(x, y)| (x - y).powi(2)).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorFit {
    /// Fitted decay rate of `|b(t)|^2`.
    pub rate: Option<f64>,
    /// `2 gamma nu`.
    pub gamma_bound: f64,
    pub pass: bool,
    pub b0_sq: f64,
    pub final_b: f64,
    pub fit_points: usize,
    /// `|b(t)|^2 <= |b(0)|^2 exp(-2 gamma nu t)` at every sample.
    pub bound_holds: bool,
    pub note: Option<String>,
}

/// Least-squares fit of `ln |b|^2` against `t` over the samples with
/// `|b|^2 / |b(0)|^2` in `[1e-10, 1e-2]`.
pub fn fit_attractor(series: &RunSeries, alpha: &[f64], gamma: f64) -> AttractorFit {
    let nu = series.params.nu;
    let gamma_bound = 2.0 * gamma * nu;
    let b2 = distance_sq(series, alpha);
    let b0 = b2[0];
    let final_b = b2.last().copied().unwrap_or(0.0).sqrt();
    let t0 = series.rows[0].t;
    let bound_holds = series
        .rows
        .iter()
        .zip(&b2)
        .all(|(r, &b)| b <= b0 * (-gamma_bound * (r.t - t0)).exp() * (1.0 + 1e-6) + 1e-24);
    let mut fit = AttractorFit {
        rate: None,
        gamma_bound,
        pass: false,
        b0_sq: b0,
        final_b,
        fit_points: 0,
        bound_holds,
        note: None,
    };
    if b0 == 0.0 {
        fit.pass = true;
        fit.note = Some("starts on the fixed point".into());
        return fit;
    }
    let pts: Vec<(f64, f64)> = series
        .rows
        .iter()
        .zip(&b2)
        .filter(|(_, &b)| (1e-10 * b0..=1e-2 * b0).contains(&b))
        .map(|(r, &b)| (r.t, b))
        .collect();
    fit.fit_points = pts.len();
    if pts.len() < 3 {
        fit.note = Some(format!("{} samples in the fit window, need 3", pts.len()));
        return fit;
    }
    let mut running = f64::INFINITY;
    for &(_, b) in &pts {
        if b > 10.0 * running {
            fit.note = Some("|b|^2 not monotone in the fit window".into());
            return fit;
        }
        running = running.min(b);
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (slope, _) = linear_fit(&xs, &ys);
    let rate = -slope;
    fit.rate = Some(rate);
    fit.pass = rate >= 0.95 * gamma_bound;
    fit
}

/// Integrates from `initial` and fits the decay towards the fixed point.
pub fn attractor_decay(
    params: &ModelParams,
    config: &IntegratorConfig,
    initial: &ShellState,
) -> Result<(AttractorFit, RunSeries)> {
    if !(params.nu > 0.0) {
        return Err(Error::InvalidParams("attractor decay needs nu > 0".into()));
    }
    if !params.in_proven_range() {
        return Err(Error::InvalidParams(format!(
            "attractor decay needs c in (3/2, 5/2], got {}",
            params.c
        )));
    }
    let steady = solve_fixed_point(params, &SolverOptions::default())?;
    let alpha = steady.alpha_on(params.n_shells);
    let series = integrate(params, config, initial)?;
    Ok((fit_attractor(&series, &alpha, steady.gamma), series))
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `E(2^j) = alpha_j^2 2^{-j}`.
pub fn energy_spectrum(alpha: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .enumerate()
        .map(|(j, a)| a * a * (-(j as f64)).exp2())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    /// First shell of the inertial window.
    pub low: usize,
    /// Shells left out below `floor(log2 kappa_d)`.
    pub high_margin: usize,
    /// Drop below the inertial extrapolation that marks `kappa_d`.
    pub drop_factor: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            low: 2,
            high_margin: 2,
            drop_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub slope: Option<f64>,
    /// `-(2c/3 + 1)`.
    pub expected_slope: f64,
    pub kappa_d_predicted: f64,
    pub kappa_d_exact: Option<f64>,
    pub kappa_d_observed: Option<f64>,
    /// Inclusive shell range of the fit.
    pub window: (usize, usize),
    pub note: Option<String>,
}

pub fn spectrum_report(steady: &SteadyState) -> Result<SpectrumReport> {
    spectrum_report_with(steady, &SpectrumOptions::default())
}

pub fn spectrum_report_with(steady: &SteadyState, opts: &SpectrumOptions) -> Result<SpectrumReport> {
    let kp = kappa_d_predicted(steady.c, steady.nu, steady.f0)?;
    let e = energy_spectrum(&steady.alpha);
    let hi = (kp.log2().floor() as i64 - opts.high_margin as i64).min(e.len() as i64 - 1);
    let mut rep = SpectrumReport {
        slope: None,
        expected_slope: -(2.0 * steady.c / 3.0 + 1.0),
        kappa_d_predicted: kp,
        kappa_d_exact: dissipation_index(steady.mu, steady.beta).map(f64::exp2),
        kappa_d_observed: None,
        window: (opts.low, hi.max(0) as usize),
        note: None,
    };
    if hi < opts.low as i64 + 3 {
        rep.note = Some("insufficient scale separation".into());
        return Ok(rep);
    }
    let hi = hi as usize;
    let xs: Vec<f64> = (opts.low..=hi).map(|j| j as f64).collect();
    let ys: Vec<f64> = (opts.low..=hi).map(|j| e[j].log2()).collect();
    let (slope, icpt) = linear_fit(&xs, &ys);
    rep.slope = Some(slope);
    let drop = opts.drop_factor.log2();
    let first = (opts.low..e.len()).find(|&j| e[j].log2() < icpt + slope * j as f64 - drop);
    rep.kappa_d_observed = match first {
        Some(j) => Some((j as f64).exp2()),
        // The stored profile ends where it underflows, which is past any drop.
        None => Some((e.len() as f64).exp2()),
    };
    Ok(rep)
}

/// Relative defect of `nu ||alpha||_{H^1}^2 = alpha_0 f0`.
pub fn energy_equality_defect(steady: &SteadyState) -> Option<f64> {
    if steady.nu <= 0.0 {
        return None;
    }
    let lhs = steady.nu * hs_norm_sq(&steady.alpha, 1.0);
    let rhs = steady.injection();
    Some((lhs - rhs).abs() / rhs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub jobs: usize,
    pub t_end: f64,
    /// Averages start at `transient_fraction * t_end`.
    pub transient_fraction: f64,
    pub sample_every: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial: InitialData,
    /// Fixed truncation instead of the resolution rule.
    pub n_shells: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            jobs: 1,
            t_end: 100.0,
            transient_fraction: 0.5,
            sample_every: 0.1,
            rel_tol: 1e-6,
            abs_tol: 1e-10,
            initial: InitialData::Zero,
            n_shells: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub nu: f64,
    pub n_shells: usize,
    /// Trajectory average of `nu ||a||_{H^1}^2` after the transient.
    pub avg_dissipation: f64,
    /// `alpha_0 f0` of the fixed point.
    pub alpha_inner_product: f64,
    pub epsilon_d: f64,
    pub attractor_rate: Option<f64>,
    pub gamma_bound: f64,
    pub spectrum_slope: Option<f64>,
    pub kappa_d_predicted: f64,
    pub kappa_d_observed: Option<f64>,
    /// Final-state spectrum decayed by twelve decades at shell N.
    pub resolved: bool,
    pub final_b: f64,
    pub min_relative_amplitude: f64,
    pub energy_check: Option<EnergyCheck>,
    pub error: Option<String>,
}

impl SweepResult {
    pub fn valid(&self) -> bool {
        self.error.is_none() && self.resolved
    }

    /// `|avg - alpha_0 f0| / (alpha_0 f0)`.
    pub fn consistency(&self) -> f64 {
        (self.avg_dissipation - self.alpha_inner_product).abs() / self.alpha_inner_product
    }
}

/// Per-point initial data; random seeds are mixed with `nu` so a point does
/// not depend on the rest of the grid or on the pool.
pub fn point_initial(initial: &InitialData, nu: f64) -> InitialData {
    match initial {
        InitialData::Random { seed } => InitialData::Random {
            seed: seed ^ nu.to_bits(),
        },
        other => other.clone(),
    }
}

fn sweep_point(c: f64, f0: f64, nu: f64, opts: &SweepOptions) -> (SweepResult, Option<RunSeries>) {
    let eps = epsilon_d(c, f0).map(|e| e.value).unwrap_or(f64::NAN);
    let mut out = SweepResult {
        nu,
        n_shells: opts.n_shells.unwrap_or(0),
        avg_dissipation: f64::NAN,
        alpha_inner_product: f64::NAN,
        epsilon_d: eps,
        attractor_rate: None,
        gamma_bound: f64::NAN,
        spectrum_slope: None,
        kappa_d_predicted: f64::NAN,
        kappa_d_observed: None,
        resolved: false,
        final_b: f64::NAN,
        min_relative_amplitude: f64::NAN,
        energy_check: None,
        error: None,
    };
    match run_point(c, f0, nu, opts, &mut out) {
        Ok(series) => (out, Some(series)),
        Err(e) => {
            out.error = Some(e.to_string());
            (out, None)
        }
    }
}

fn run_point(c: f64, f0: f64, nu: f64, opts: &SweepOptions, out: &mut SweepResult) -> Result<RunSeries> {
    let n = match opts.n_shells {
        Some(n) => n,
        None => shells_for(c, nu, f0)?,
    };
    out.n_shells = n;
    let params = ModelParams::new(c, nu, f0, n)?;
    out.kappa_d_predicted = kappa_d_predicted(c, nu, f0)?;
    let steady = solve_fixed_point(&params, &SolverOptions::default())?;
    out.alpha_inner_product = steady.injection();
    out.gamma_bound = 2.0 * steady.gamma * nu;
    let spec = spectrum_report(&steady)?;
    out.spectrum_slope = spec.slope;
    out.kappa_d_observed = spec.kappa_d_observed;

    let initial = point_initial(&opts.initial, nu).build(&params)?;
    let series = integrate(&params, &point_config(opts), &initial)?;
    let alpha = steady.alpha_on(n);
    let fit = fit_attractor(&series, &alpha, steady.gamma);
    out.attractor_rate = fit.rate;
    out.final_b = fit.final_b;
    out.min_relative_amplitude = series.step_stats.min_relative_amplitude;
    out.energy_check = Some(energy_inequality_check(&series)?);
    out.avg_dissipation = time_average_dissipation(&series, opts.transient_fraction * opts.t_end)?;
    let a = &series.final_state.a;
    out.resolved = a[n] * a[n] * (-(n as f64)).exp2() <= 1e-12 * a[0] * a[0];
    Ok(series)
}

/// Integrator settings used for one sweep point.
pub fn point_config(opts: &SweepOptions) -> IntegratorConfig {
    IntegratorConfig {
        rel_tol: opts.rel_tol,
        abs_tol: opts.abs_tol,
        t_end: opts.t_end,
        sample_every: opts.sample_every,
        ..Default::default()
    }
}

/// `(D(T) - D(T0)) / (T - T0)` with `T0` the first sample at or after `t_from`.
pub fn time_average_dissipation(series: &RunSeries, t_from: f64) -> Result<f64> {
    let k = series
        .rows
        .iter()
        .position(|r| r.t >= t_from)
        .ok_or_else(|| Error::InvalidParams(format!("no samples after t = {t_from}")))?;
    let last = series.rows.len() - 1;
    if k >= last {
        return Err(Error::InvalidParams(format!(
            "averaging window after t = {t_from} holds a single sample"
        )));
    }
    let span = series.rows[last].t - series.rows[k].t;
    Ok((series.dissipated[last] - series.dissipated[k]) / span)
}

/// Runs every grid point on a pool of `opts.jobs` threads. Rows come back in
/// grid order, which must be strictly decreasing in `nu`.
pub fn dissipation_sweep(c: f64, f0: f64, nu_grid: &[f64], opts: &SweepOptions) -> Result<Vec<SweepResult>> {
    Ok(sweep_runs(c, f0, nu_grid, opts)?.into_iter().map(|(r, _)| r).collect())
}

/// Like [`dissipation_sweep`], also returning each point's trajectory.
pub fn sweep_runs(
    c: f64,
    f0: f64,
    nu_grid: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<(SweepResult, Option<RunSeries>)>> {
    if nu_grid.is_empty() {
        return Err(Error::InvalidParams("empty viscosity grid".into()));
    }
    if let Some(&bad) = nu_grid.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidParams(format!("viscosities must be > 0, got {bad}")));
    }
    if nu_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParams("viscosity grid must be strictly decreasing".into()));
    }
    epsilon_d(c, f0)?;
    ModelParams::new(c, nu_grid[0], f0, 2)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    Ok(pool.install(|| nu_grid.par_iter().map(|&nu| sweep_point(c, f0, nu, opts)).collect()))
}

/// Named pass/fail checks over a finished sweep: per-point consistency with
/// `alpha_0 f0` (1%), closeness of the last point to `eps_d` (5%) and the
/// trend over the last three points.
pub fn dissipation_sweep_checks(results: &[SweepResult]) -> Vec<(String, bool, String)> {
    let mut out = Vec::new();
    for r in results.iter().filter(|r| r.error.is_none()) {
        out.push((
            format!("consistency nu={:e}", r.nu),
            r.consistency() <= 1e-2,
            format!("|avg - alpha_0 f0| / alpha_0 f0 = {:e}", r.consistency()),
        ));
    }
    if let Some(last) = results.last().filter(|r| r.error.is_none()) {
        let rel = (last.avg_dissipation - last.epsilon_d).abs() / last.epsilon_d;
        out.push((
            format!("epsilon_d nu={:e}", last.nu),
            rel <= 5e-2,
            format!("|avg - eps_d| / eps_d = {rel:e}"),
        ));
    }
    if results.len() >= 3 && results.iter().all(|r| r.error.is_none()) {
        out.push((
            "trend".into(),
            trend_nonincreasing(results, 3),
            "|avg - eps_d| over the last 3 points".into(),
        ));
    }
    out
}

/// `|avg - eps_d|` non-increasing over the last `k` results.
pub fn trend_nonincreasing(results: &[SweepResult], k: usize) -> bool {
    let tail = &results[results.len().saturating_sub(k)..];
    tail.windows(2)
        .all(|w| (w[1].avg_dissipation - w[1].epsilon_d).abs() <= (w[0].avg_dissipation - w[0].epsilon_d).abs())
}
