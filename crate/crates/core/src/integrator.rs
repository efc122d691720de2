//! Adaptive time stepping for the truncated shell system.
//!
//! Two one-step schemes share the step controller:
//!
//! * `IntegratingFactor`: the damping `nu 4^j` is applied exactly through
//!   `exp(-nu 4^j t)` and the forcing plus transfer terms are advanced by the
//!   Dormand–Prince 5(4) pair on the transformed variables (Lawson form).
//! * `Rosenbrock`: the L-stable two-stage ROS2 method with the exact
//!   tridiagonal Jacobian, for runs whose nonlinear time scale near the
//!   dissipation range is far shorter than the horizon.
//!
//! Both advance the running integrals `D = int nu ||a||_{H^1}^2` and
//! `I = int f0 a_0` alongside the amplitudes, so the energy balance can be
//! audited from the samples alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::model::{DiagnosticsRow, ModelParams, ShellModel, ShellState};
use crate::steady::{dissipation_index, inviscid_alpha, rescale_mu_beta};

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    IntegratingFactor,
    Rosenbrock,
    /// Chosen per run by [`Scheme::resolve`].
    Auto,
}

impl Scheme {
    /// Picks the explicit scheme unless the stiffest rate, transfer or
    /// damping, times the horizon exceeds `1e5` stability-limited steps.
    ///
    /// Damping counts although the integrating factor removes it from the
    /// stability limit: with `nu 4^N dt >> 1` the explicit stages mistreat
    /// the slaved dissipative shells and the controller ends up far below the
    /// transfer limit.
    pub fn resolve(self, params: &ModelParams, span: f64) -> Scheme {
        match self {
            Scheme::Auto => {
                let damp = params.nu * 4f64.powi(params.n_shells as i32);
                if nonlinear_stiffness(params).max(damp) * span / 3.3 > 1e5 {
                    Scheme::Rosenbrock
                } else {
                    Scheme::IntegratingFactor
                }
            }
            s => s,
        }
    }
}

/// Gershgorin bound of the transfer Jacobian on the expected steady profile
/// `alpha0_j exp(-2^j / kappa_d)`.
pub fn nonlinear_stiffness(params: &ModelParams) -> f64 {
    let (mu, beta) = rescale_mu_beta(params);
    let kappa = dissipation_index(mu, beta).map(f64::exp2).unwrap_or(f64::INFINITY);
    let n = params.len();
    let prof: Vec<f64> = inviscid_alpha(params, n)
        .into_iter()
        .enumerate()
        .map(|(j, x)| x * (-(j as f64).exp2() / kappa).exp())
        .collect();
    let c = params.c;
    (0..n)
        .map(|j| {
            let jf = j as f64;
            let mut r = 0.0;
            if j > 0 {
                r += 2.0 * (c * (jf - 1.0)).exp2() * prof[j - 1];
            }
            if j + 1 < n {
                r += (c * jf).exp2() * (prof[j] + prof[j + 1]);
            }
            r
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Initial step; chosen from the right-hand side when absent.
    pub dt_init: Option<f64>,
    /// Step cap; unbounded when absent.
    pub dt_max: Option<f64>,
    /// Allowed negative excursion relative to `max_j |a_j|`.
    pub positivity_tol: f64,
    pub t_end: f64,
    /// Sampling interval in model time.
    pub sample_every: f64,
    pub scheme: Scheme,
    pub max_steps: u64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            dt_init: None,
            dt_max: None,
            positivity_tol: 1e-12,
            t_end: 10.0,
            sample_every: 0.1,
            scheme: Scheme::Auto,
            max_steps: 50_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos("rel_tol", self.rel_tol)?;
        pos("abs_tol", self.abs_tol)?;
        pos("positivity_tol", self.positivity_tol)?;
        pos("t_end", self.t_end)?;
        pos("sample_every", self.sample_every)?;
        if let Some(v) = self.dt_init {
            pos("dt_init", v)?;
        }
        if let Some(v) = self.dt_max {
            pos("dt_max", v)?;
        }
        Ok(())
    }
}

/// Accepted and rejected step counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: u64,
    pub rejected: u64,
    pub positivity_rejections: u64,
    pub nonfinite_rejections: u64,
    pub min_dt: f64,
    pub max_dt: f64,
    /// Smallest `min_j a_j / max_j |a_j|` over all accepted states.
    pub min_relative_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub params: ModelParams,
    pub config: IntegratorConfig,
    /// Scheme actually used after resolving `Auto`.
    pub scheme: Scheme,
    pub rows: Vec<DiagnosticsRow>,
    /// Amplitudes at each row.
    pub states: Vec<Vec<f64>>,
    /// `int_{t_0}^{t} nu ||a||_{H^1}^2` at each row.
    pub dissipated: Vec<f64>,
    /// `int_{t_0}^{t} f0 a_0` at each row.
    pub injected: Vec<f64>,
    pub final_state: ShellState,
    pub step_stats: StepStats,
}

impl RunSeries {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.t)
    }
}

/// Result of one trial step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: ShellState,
    /// Componentwise local error estimate for the amplitudes.
    pub error: Vec<f64>,
    /// Increments of the dissipation and injection integrals.
    pub d_dissipated: f64,
    pub d_injected: f64,
}

impl StepResult {
    /// Root-mean-square of the error relative to `abs_tol + rel_tol |a|`.
    pub fn error_norm(&self, old: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
        error_norm(&self.error, old, &self.state.a, rel_tol, abs_tol)
    }
}

fn error_norm(err: &[f64], old: &[f64], new: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(old.iter().zip(new))
        .map(|(e, (x, y))| {
            let sc = abs_tol + rel_tol * x.abs().max(y.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

// Dormand–Prince 5(4).
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const BHAT: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

// ROS2 with gamma = 1 + 1/sqrt(2).
const ROS_GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

/// One-step integrator bound to a model; owns its scratch buffers.
pub struct Stepper<'m> {
    model: &'m ShellModel,
    scheme: Scheme,
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
    // First-same-as-last cache: nonlinear term at the current state.
    fsal: Option<Vec<f64>>,
    jac: [Vec<f64>; 3],
}

impl<'m> Stepper<'m> {
    /// `scheme` must already be resolved; `Auto` falls back to the explicit one.
    pub fn new(model: &'m ShellModel, scheme: Scheme) -> Self {
        let n = model.len();
        let scheme = match scheme {
            Scheme::Auto => Scheme::IntegratingFactor,
            s => s,
        };
        Stepper {
            model,
            scheme,
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
            fsal: None,
            jac: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Order of the embedded error estimate plus one, for the controller.
    fn error_order(&self) -> f64 {
        match self.scheme {
            Scheme::Rosenbrock => 2.0,
            _ => 5.0,
        }
    }

    /// Attempts a step of size `dt` from `state`. The caller decides on
    /// acceptance; call [`Stepper::accept`] afterwards so the FSAL cache stays
    /// in sync.
    pub fn try_step(&mut self, state: &ShellState, dt: f64) -> Result<StepResult> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
        }
        match self.scheme {
            Scheme::Rosenbrock => self.ros2(state, dt),
            _ => Ok(self.lawson_dp5(state, dt)),
        }
    }

    /// Marks the last attempted step as accepted.
    pub fn accept(&mut self) {
        if self.scheme != Scheme::Rosenbrock {
            self.fsal = Some(self.k[6].clone());
        }
    }

    /// Forgets cached stage data, e.g. after the state was changed externally.
    pub fn reset(&mut self) {
        self.fsal = None;
    }

    fn lawson_dp5(&mut self, state: &ShellState, h: f64) -> StepResult {
        let model = self.model;
        let a = &state.a;
        let n = a.len();
        let damp = model.damping();
        let f0 = model.params().f0;
        match &self.fsal {
            Some(k0) => self.k[0].copy_from_slice(k0),
            None => model.nonlinear_into(a, &mut self.k[0]),
        }
        let mut d_diss = 0.0;
        let mut d_inj = 0.0;
        let quad = |y: &[f64]| -> (f64, f64) {
            (y.iter().zip(damp).map(|(x, d)| d * x * x).sum(), f0 * y[0])
        };
        let (q, i) = quad(a);
        d_diss += B[0] * q;
        d_inj += B[0] * i;
        for s in 1..7 {
            for j in 0..n {
                let dj = damp[j] * h;
                let mut v = (-dj * C[s]).exp() * a[j];
                for (r, coef) in A[s].iter().enumerate().take(s) {
                    if *coef != 0.0 {
                        v += h * coef * (-dj * (C[s] - C[r])).exp() * self.k[r][j];
                    }
                }
                self.stage[j] = v;
            }
            let (head, tail) = self.k.split_at_mut(s);
            let _ = head;
            model.nonlinear_into(&self.stage, &mut tail[0]);
            if B[s] != 0.0 {
                let (q, i) = quad(&self.stage);
                d_diss += B[s] * q;
                d_inj += B[s] * i;
            }
        }
        // The last stage is the new state.
        let new_a = self.stage.clone();
        let error: Vec<f64> = (0..n)
            .map(|j| {
                let dj = damp[j] * h;
                h * (0..7)
                    .map(|r| (B[r] - BHAT[r]) * (-dj * (1.0 - C[r])).exp() * self.k[r][j])
                    .sum::<f64>()
            })
            .collect();
        StepResult {
            state: ShellState::new(state.t + h, new_a),
            error,
            d_dissipated: h * d_diss,
            d_injected: h * d_inj,
        }
    }

    fn ros2(&mut self, state: &ShellState, h: f64) -> Result<StepResult> {
        let model = self.model;
        let a = &state.a;
        let n = a.len();
        let damp = model.damping();
        let f0 = model.params().f0;
        let gh = ROS_GAMMA * h;
        {
            let [sub, diag, sup] = &mut self.jac;
            model.jacobian_into(a, sub, diag, sup);
            for j in 0..n {
                sub[j] *= -gh;
                sup[j] *= -gh;
                diag[j] = 1.0 - gh * diag[j];
            }
        }
        let [sub, diag, sup] = &self.jac;
        // Row of the augmented Jacobian for D.
        let grad_d = |k: &[f64]| -> f64 { (0..n).map(|j| 2.0 * damp[j] * a[j] * k[j]).sum() };
        let quad = |y: &[f64]| -> f64 { y.iter().zip(damp).map(|(x, d)| d * x * x).sum() };

        let mut f = vec![0.0; n];
        model.rhs_into(a, &mut f);
        let k1 = solve_tridiagonal(sub, diag, sup, &f)?;
        let k1_d = quad(a) + gh * grad_d(&k1);
        let k1_i = f0 * a[0] + gh * f0 * k1[0];

        let y1: Vec<f64> = (0..n).map(|j| a[j] + h * k1[j]).collect();
        model.rhs_into(&y1, &mut f);
        for j in 0..n {
            f[j] -= 2.0 * k1[j];
        }
        let k2 = solve_tridiagonal(sub, diag, sup, &f)?;
        let k2_d = quad(&y1) - 2.0 * k1_d + gh * grad_d(&k2);
        let k2_i = f0 * y1[0] - 2.0 * k1_i + gh * f0 * k2[0];

        let new_a: Vec<f64> = (0..n).map(|j| a[j] + h * (1.5 * k1[j] + 0.5 * k2[j])).collect();
        let error: Vec<f64> = (0..n).map(|j| 0.5 * h * (k1[j] + k2[j])).collect();
        Ok(StepResult {
            state: ShellState::new(state.t + h, new_a),
            error,
            d_dissipated: h * (1.5 * k1_d + 0.5 * k2_d),
            d_injected: h * (1.5 * k1_i + 0.5 * k2_i),
        })
    }
}

/// One integrating-factor Dormand–Prince step of the physical model.
pub fn step(params: &ModelParams, state: &ShellState, dt: f64) -> Result<StepResult> {
    let model = ShellModel::new(*params)?;
    step_with(&model, Scheme::IntegratingFactor, state, dt)
}

/// One step of the given scheme for an arbitrary (possibly hooked) model.
pub fn step_with(model: &ShellModel, scheme: Scheme, state: &ShellState, dt: f64) -> Result<StepResult> {
    if state.a.len() != model.len() {
        return Err(Error::ShapeMismatch {
            expected: model.len(),
            got: state.a.len(),
        });
    }
    state.check_finite()?;
    Stepper::new(model, scheme).try_step(state, dt)
}

/// Integrates the physical model from `initial` to `config.t_end`.
pub fn integrate(params: &ModelParams, config: &IntegratorConfig, initial: &ShellState) -> Result<RunSeries> {
    let model = ShellModel::new(*params)?;
    integrate_with(&model, config, initial)
}

fn relative_min(a: &[f64]) -> (f64, usize, f64) {
    let scale = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let (idx, min) = a
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(i, m), (j, &x)| if x < m { (j, x) } else { (i, m) });
    (min, idx, scale)
}

/// Adaptive integration with a caller-supplied model.
pub fn integrate_with(model: &ShellModel, config: &IntegratorConfig, initial: &ShellState) -> Result<RunSeries> {
    config.validate()?;
    let params = *model.params();
    if initial.a.len() != model.len() {
        return Err(Error::ShapeMismatch {
            expected: model.len(),
            got: initial.a.len(),
        });
    }
    initial.check_finite()?;
    if let Some(j) = initial.a.iter().position(|&x| x < 0.0) {
        return Err(Error::InvalidParams(format!(
            "initial amplitudes must be nonnegative, a[{j}] = {}",
            initial.a[j]
        )));
    }
    let t0 = initial.t;
    let t_end = config.t_end;
    if !(t_end > t0) {
        return Err(Error::InvalidParams(format!("t_end = {t_end} must exceed the start time {t0}")));
    }
    let span = t_end - t0;
    let scheme = config.scheme.resolve(&params, span);
    let mut stepper = Stepper::new(model, scheme);
    let order = stepper.error_order();
    let dt_max = config.dt_max.unwrap_or(f64::INFINITY);
    let dt_min = 1e-14 * t_end.abs().max(span);

    let mut state = initial.clone();
    let mut diss = 0.0;
    let mut inj = 0.0;
    let mut rows = vec![model.diagnostics(t0, &state.a)];
    let mut states = vec![state.a.clone()];
    let mut dissipated = vec![0.0];
    let mut injected = vec![0.0];
    let mut stats = StepStats {
        min_dt: f64::INFINITY,
        max_dt: 0.0,
        min_relative_amplitude: 0.0,
        ..Default::default()
    };
    {
        let (m, _, s) = relative_min(&state.a);
        if s > 0.0 {
            stats.min_relative_amplitude = m / s;
        }
    }

    let mut dt = match config.dt_init {
        Some(h) => h,
        None => initial_step(model, &state.a, config.rel_tol, config.abs_tol),
    }
    .min(dt_max)
    .min(span);
    let mut k_sample = 1u64;
    let sample_time = |k: u64| (t0 + k as f64 * config.sample_every).min(t_end);
    let mut next_sample = sample_time(k_sample);
    let mut consecutive_rejects = 0u32;
    let mut last_positivity: Option<(usize, f64, f64)> = None;
    let mut steps = 0u64;

    while state.t < t_end {
        if steps >= config.max_steps {
            return Err(Error::StepLimit { t: state.t, steps });
        }
        steps += 1;
        if dt < dt_min {
            return Err(match last_positivity {
                Some((shell, value, scale)) if consecutive_rejects > 0 => Error::PositivityViolated {
                    t: state.t,
                    shell,
                    value,
                    scale,
                },
                _ => Error::StepUnderflow { t: state.t, dt },
            });
        }
        // Land exactly on the next sample time.
        let to_sample = next_sample - state.t;
        let clamped = dt >= to_sample;
        let h = if clamped { to_sample } else { dt };

        let trial = match stepper.try_step(&state, h) {
            Ok(r) => Some(r),
            Err(Error::Singular(_)) => None,
            Err(e) => return Err(e),
        };
        let Some(trial) = trial.filter(|r| r.state.a.iter().chain(&r.error).all(|x| x.is_finite())) else {
            stats.rejected += 1;
            stats.nonfinite_rejections += 1;
            consecutive_rejects += 1;
            stepper.reset();
            dt = h * 0.5;
            continue;
        };
        let err = trial.error_norm(&state.a, config.rel_tol, config.abs_tol);
        if err > 1.0 {
            stats.rejected += 1;
            consecutive_rejects += 1;
            let fac = (0.9 * err.powf(-1.0 / order)).clamp(0.1, 0.9);
            dt = h * fac;
            continue;
        }
        let (min, idx, scale) = relative_min(&trial.state.a);
        let floor = -config.positivity_tol * scale.max(state.max_abs());
        if min < floor {
            stats.rejected += 1;
            stats.positivity_rejections += 1;
            consecutive_rejects += 1;
            last_positivity = Some((idx, min, scale));
            if consecutive_rejects > 60 {
                return Err(Error::PositivityViolated {
                    t: state.t,
                    shell: idx,
                    value: min,
                    scale,
                });
            }
            dt = h * 0.5;
            continue;
        }

        stats.accepted += 1;
        stats.min_dt = stats.min_dt.min(h);
        stats.max_dt = stats.max_dt.max(h);
        if scale > 0.0 {
            stats.min_relative_amplitude = stats.min_relative_amplitude.min(min / scale);
        }
        stepper.accept();
        diss += trial.d_dissipated;
        inj += trial.d_injected;
        let grow = if consecutive_rejects > 0 { 1.0 } else { 5.0 };
        consecutive_rejects = 0;
        last_positivity = None;
        let fac = if err == 0.0 {
            grow
        } else {
            (0.9 * err.powf(-1.0 / order)).clamp(0.2, grow)
        };
        let proposal = (h * fac).min(dt_max);
        // A step shortened only to hit a sample keeps the controller's size.
        dt = if clamped { proposal.max(dt.min(dt_max)) } else { proposal };
        state = trial.state;
        if clamped {
            state.t = next_sample;
            rows.push(model.diagnostics(state.t, &state.a));
            states.push(state.a.clone());
            dissipated.push(diss);
            injected.push(inj);
            k_sample += 1;
            next_sample = sample_time(k_sample);
        }
    }
    if stats.accepted == 0 {
        stats.min_dt = 0.0;
    }
    Ok(RunSeries {
        params,
        config: config.clone(),
        scheme,
        rows,
        states,
        dissipated,
        injected,
        final_state: state,
        step_stats: stats,
    })
}

fn initial_step(model: &ShellModel, a: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
    let mut f = vec![0.0; a.len()];
    model.rhs_into(a, &mut f);
    let rms = |v: &[f64]| {
        let s: f64 = v
            .iter()
            .zip(a)
            .map(|(x, y)| (x / (abs_tol + rel_tol * y.abs())).powi(2))
            .sum();
        (s / v.len() as f64).sqrt()
    };
    let (d0, d1) = (rms(a), rms(&f));
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}

/// Audit of `|a(t)|^2 + 2 int nu ||a||_{H^1}^2 - 2 int (f, a)` between sample
/// pairs. For the truncated system the quantity is conserved, so any nonzero
/// value is integration error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    /// `max over t0 < t` of `LHS - RHS`.
    pub max_signed: f64,
    /// Same with absolute values.
    pub max_abs: f64,
    /// `max(max_t |a(t)|^2, 2 int (f, a))`.
    pub scale: f64,
}

impl EnergyCheck {
    /// `max_abs <= factor * rel_tol * scale`.
    pub fn within(&self, rel_tol: f64, factor: f64) -> bool {
        self.max_abs <= factor * rel_tol * self.scale
    }
}

pub fn energy_inequality_check(series: &RunSeries) -> Result<EnergyCheck> {
    if series.rows.len() < 2 {
        return Err(Error::InvalidParams("energy check needs at least two rows".into()));
    }
    let g: Vec<f64> = series
        .rows
        .iter()
        .zip(series.dissipated.iter().zip(&series.injected))
        .map(|(r, (d, i))| 2.0 * r.energy + 2.0 * d - 2.0 * i)
        .collect();
    let (mut lo, mut hi) = (g[0], g[0]);
    let (mut max_signed, mut max_abs) = (f64::NEG_INFINITY, 0.0_f64);
    for &v in &g[1..] {
        max_signed = max_signed.max(v - lo);
        max_abs = max_abs.max((v - lo).abs()).max((v - hi).abs());
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let amp = series.rows.iter().map(|r| 2.0 * r.energy).fold(0.0, f64::max);
    let inj = 2.0 * series.injected.last().copied().unwrap_or(0.0).abs();
    Ok(EnergyCheck {
        max_signed,
        max_abs,
        scale: amp.max(inj),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelHooks;
    use crate::steady::{solve_fixed_point, SolverOptions};

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn pure_decay_is_exact() {
        let p = ModelParams::new(2.0, 0.3, 1.0, 6).unwrap();
        let p = ModelParams { f0: 1e-300, ..p };
        let hooks = ModelHooks {
            nonlinear: false,
            ..Default::default()
        };
        let model = ShellModel::with_hooks(p, hooks).unwrap();
        let a0: Vec<f64> = (0..7).map(|j| 1.0 / (j as f64 + 1.0)).collect();
        let s = ShellState::new(0.0, a0.clone());
        let r = step_with(&model, Scheme::IntegratingFactor, &s, 0.37).unwrap();
        for j in 0..7 {
            let exact = a0[j] * (-0.3 * 4f64.powi(j as i32) * 0.37).exp();
            assert!((r.state.a[j] - exact).abs() <= 1e-15 * a0[j], "j={j}");
        }
    }

    #[test]
    fn lone_mode_starts_at_rest() {
        // a_1 is fed by a_0^2 at once, so only da_0/dt vanishes initially and
        // a_0 moves at second order in dt.
        let p = ModelParams { c: 1.7, nu: 0.0, f0: 1e-300, n_shells: 4 };
        let model = ShellModel::new(p).unwrap();
        let s = ShellState::new(0.0, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(model.rhs(&s.a).unwrap()[0].abs() <= 1e-300);
        let dt = 1e-3;
        for scheme in [Scheme::IntegratingFactor, Scheme::Rosenbrock] {
            let r = step_with(&model, scheme, &s, dt).unwrap();
            assert!((r.state.a[0] - 1.0).abs() < dt * dt, "{scheme:?}");
            assert!((r.state.a[1] - dt).abs() < dt * dt, "{scheme:?}");
        }
    }

    /// Error after one step over a smooth nonlinear trajectory, against a
    /// fine reference, for two step sizes.
    fn observed_order(scheme: Scheme) -> f64 {
        let p = ModelParams::new(2.0, 0.002, 1.0, 5).unwrap();
        let model = ShellModel::new(p).unwrap();
        let s = ShellState::new(0.0, vec![0.8, 0.5, 0.3, 0.1, 0.05, 0.01]);
        let reference = |h: f64| {
            let mut st = s.clone();
            let m = 4096;
            let mut stp = Stepper::new(&model, Scheme::IntegratingFactor);
            for _ in 0..m {
                st = stp.try_step(&st, h / m as f64).unwrap().state;
                stp.accept();
            }
            st.a
        };
        let e = |h: f64| {
            let r = step_with(&model, scheme, &s, h).unwrap();
            l2(&r.state.a, &reference(h))
        };
        let (h1, h2) = (0.01, 0.005);
        (e(h1) / e(h2)).log2()
    }

    #[test]
    fn local_orders() {
        // Local error of a p-th order method scales like h^{p+1}.
        let o5 = observed_order(Scheme::IntegratingFactor);
        assert!((o5 - 6.0).abs() < 0.4, "{o5}");
        let o2 = observed_order(Scheme::Rosenbrock);
        assert!((o2 - 3.0).abs() < 0.3, "{o2}");
    }

    #[test]
    fn fixed_point_is_invariant() {
        let p = ModelParams::new(2.0, 0.1, 1.0, 12).unwrap();
        let fp = solve_fixed_point(&p, &SolverOptions::default()).unwrap();
        let alpha = fp.alpha_on(12);
        for scheme in [Scheme::IntegratingFactor, Scheme::Rosenbrock] {
            let cfg = IntegratorConfig {
                t_end: 10.0,
                sample_every: 1.0,
                scheme,
                ..Default::default()
            };
            let run = integrate(&p, &cfg, &ShellState::new(0.0, alpha.clone())).unwrap();
            for a in &run.states {
                assert!(l2(a, &alpha) < 1e-8, "{scheme:?}");
            }
        }
    }

    #[test]
    fn converges_to_fixed_point() {
        let p = ModelParams::new(2.0, 0.1, 1.0, 12).unwrap();
        let fp = solve_fixed_point(&p, &SolverOptions::default()).unwrap();
        let cfg = IntegratorConfig {
            t_end: 100.0,
            sample_every: 10.0,
            ..Default::default()
        };
        let run = integrate(&p, &cfg, &ShellState::zeros(&p)).unwrap();
        assert!(l2(&run.final_state.a, &fp.alpha_on(12)) < 1e-6);
        assert!(run.step_stats.min_relative_amplitude >= -1e-12);
    }

    #[test]
    fn inviscid_energy_grows() {
        let p = ModelParams::new(2.0, 0.0, 1.0, 10).unwrap();
        let a0: Vec<f64> = (0..11).map(|j| 0.5 * 0.5f64.powi(j)).collect();
        let cfg = IntegratorConfig {
            t_end: 5.0,
            sample_every: 0.25,
            ..Default::default()
        };
        let run = integrate(&p, &cfg, &ShellState::new(0.0, a0)).unwrap();
        for w in run.rows.windows(2) {
            assert!(w[1].energy > w[0].energy);
        }
        let chk = energy_inequality_check(&run).unwrap();
        assert!(chk.within(cfg.rel_tol, 10.0), "{chk:?}");
    }

    #[test]
    fn samples_land_on_grid() {
        let p = ModelParams::new(2.0, 0.1, 1.0, 8).unwrap();
        let cfg = IntegratorConfig {
            t_end: 3.0,
            sample_every: 0.7,
            ..Default::default()
        };
        let run = integrate(&p, &cfg, &ShellState::zeros(&p)).unwrap();
        let t: Vec<f64> = run.times().collect();
        assert_eq!(t.len(), 6);
        assert_eq!(*t.last().unwrap(), 3.0);
        assert!((t[2] - 1.4).abs() < 1e-15);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(run.final_state.t, 3.0);
    }

    #[test]
    fn stiff_run_keeps_reasonable_steps() {
        let p = ModelParams::new(2.0, 1e-3, 1.0, 24).unwrap();
        let cfg = IntegratorConfig {
            t_end: 20.0,
            sample_every: 1.0,
            rel_tol: 1e-6,
            abs_tol: 1e-10,
            ..Default::default()
        };
        let run = integrate(&p, &cfg, &ShellState::zeros(&p)).unwrap();
        assert_eq!(run.scheme, Scheme::Rosenbrock);
        assert!(run.step_stats.min_dt > 1e-12, "{:?}", run.step_stats);
        assert!(run.step_stats.min_relative_amplitude >= -1e-12);
    }

    #[test]
    fn rejects_negative_initial_data() {
        let p = ModelParams::new(2.0, 0.1, 1.0, 4).unwrap();
        let s = ShellState::new(0.0, vec![0.1, -0.1, 0.0, 0.0, 0.0]);
        let r = integrate(&p, &IntegratorConfig::default(), &s);
        assert!(matches!(r, Err(Error::InvalidParams(_))));
    }
}
