//! The truncated dyadic shell model.
//!
//! Shells `0..=N` carry amplitudes `a_j`; shell `j` represents wavenumbers of
//! order `2^j` and holds energy `a_j^2 / 2`. The evolution is
//!
//! ```text
//! da_j/dt = f_j - nu 4^j a_j + 2^{c(j-1)} a_{j-1}^2 - 2^{cj} a_j a_{j+1}
//! ```
//!
//! with `a_{-1} = 0`, the Galerkin closure `a_{N+1} = 0`, and forcing only on
//! shell 0 (`f_j = f0 [j = 0]`). The closure keeps the nonlinear transfer
//! exactly conservative: `sum_j a_j (gain_j - loss_j) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical parameters of a truncated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Intermittency exponent of the flux, in `[1, 5/2]`.
    pub c: f64,
    /// Viscosity, `>= 0`.
    pub nu: f64,
    /// Forcing on shell 0, `> 0`.
    pub f0: f64,
    /// Truncation index `N`: shells `0..=N` are simulated.
    pub n_shells: usize,
}

impl ModelParams {
    pub fn new(c: f64, nu: f64, f0: f64, n_shells: usize) -> Result<Self> {
        let p = Self { c, nu, f0, n_shells };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return Err(Error::InvalidParams(format!("f0 must be > 0, got {}", self.f0)));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::InvalidParams(format!("nu must be >= 0, got {}", self.nu)));
        }
        if !(self.c.is_finite() && (1.0..=2.5).contains(&self.c)) {
            return Err(Error::InvalidParams(format!("c must lie in [1, 5/2], got {}", self.c)));
        }
        if self.n_shells < 2 {
            return Err(Error::InvalidParams(format!(
                "truncation index must be >= 2, got {}",
                self.n_shells
            )));
        }
        Ok(())
    }

    /// Number of simulated shells, `N + 1`.
    pub fn len(&self) -> usize {
        self.n_shells + 1
    }

    /// Whether `c` lies in `(3/2, 5/2]`, where monotonicity of the fixed point
    /// and exponential attraction are proven.
    pub fn in_proven_range(&self) -> bool {
        self.c > 1.5 && self.c <= 2.5
    }
}

/// Switches used by tests and the mutation check of `verify`.
///
/// The default is the physical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHooks {
    /// Drop the quadratic transfer terms entirely.
    pub nonlinear: bool,
    /// Added to `c` in the gain term `2^{c(j-1)} a_{j-1}^2` only. Any nonzero
    /// value breaks the exact energy telescoping.
    pub gain_exponent_shift: f64,
}

impl Default for ModelHooks {
    fn default() -> Self {
        Self {
            nonlinear: true,
            gain_exponent_shift: 0.0,
        }
    }
}

/// Time plus shell amplitudes `a_0..=a_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellState {
    pub t: f64,
    pub a: Vec<f64>,
}

impl ShellState {
    pub fn new(t: f64, a: Vec<f64>) -> Self {
        Self { t, a }
    }

    pub fn zeros(params: &ModelParams) -> Self {
        Self::new(0.0, vec![0.0; params.len()])
    }

    /// Fails on the first non-finite amplitude.
    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.a)
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.a)
    }
}

pub(crate) fn check_finite(a: &[f64]) -> Result<()> {
    match a.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: a[index],
        }),
        None => Ok(()),
    }
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// One sample of the spectral diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    /// `E = 1/2 sum a_j^2`.
    pub energy: f64,
    /// `sum 4^j a_j^2`.
    pub h1_sq: f64,
    /// `Pi_j = 2^{cj} a_j^2 a_{j+1}`, with `Pi_N = 0`.
    pub flux: Vec<f64>,
    /// Energy injection `(f, a) = f0 a_0`.
    pub injection: f64,
}

/// Precomputed coefficients of the right-hand side for one parameter set.
///
/// All the hot loops in the integrator and the solvers go through this type.
#[derive(Debug, Clone)]
pub struct ShellModel {
    params: ModelParams,
    hooks: ModelHooks,
    /// `2^{cj}`, the loss coefficient of shell `j` (and the flux weight).
    transfer: Vec<f64>,
    /// `2^{(c+shift)(j-1)}`, the gain coefficient of shell `j`; `gain[0]` unused.
    gain: Vec<f64>,
    /// `nu 4^j`.
    damping: Vec<f64>,
}

impl ShellModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        Self::with_hooks(params, ModelHooks::default())
    }

    pub fn with_hooks(params: ModelParams, hooks: ModelHooks) -> Result<Self> {
        params.validate()?;
        let n = params.len();
        let transfer = (0..n).map(|j| (params.c * j as f64).exp2()).collect();
        let gc = params.c + hooks.gain_exponent_shift;
        let gain = (0..n)
            .map(|j| if j == 0 { 0.0 } else { (gc * (j as f64 - 1.0)).exp2() })
            .collect();
        let damping = (0..n).map(|j| params.nu * (2.0 * j as f64).exp2()).collect();
        Ok(Self {
            params,
            hooks,
            transfer,
            gain,
            damping,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn hooks(&self) -> &ModelHooks {
        &self.hooks
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Linear decay rates `nu 4^j`.
    pub fn damping(&self) -> &[f64] {
        &self.damping
    }

    fn check_len(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: a.len(),
            });
        }
        Ok(())
    }

    /// Forcing plus quadratic transfer, i.e. everything except `-nu 4^j a_j`.
    pub fn nonlinear_into(&self, a: &[f64], out: &mut [f64]) {
        let n = a.len();
        for j in 0..n {
            let mut v = if j == 0 { self.params.f0 } else { 0.0 };
            if self.hooks.nonlinear {
                if j > 0 {
                    v += self.gain[j] * a[j - 1] * a[j - 1];
                }
                if j + 1 < n {
                    v -= self.transfer[j] * a[j] * a[j + 1];
                }
            }
            out[j] = v;
        }
    }

    /// Full right-hand side without validation.
    pub fn rhs_into(&self, a: &[f64], out: &mut [f64]) {
        self.nonlinear_into(a, out);
        for ((o, d), x) in out.iter_mut().zip(&self.damping).zip(a) {
            *o -= d * x;
        }
    }

    /// Full right-hand side, rejecting non-finite input.
    pub fn rhs(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check_len(a)?;
        check_finite(a)?;
        let mut out = vec![0.0; a.len()];
        self.rhs_into(a, &mut out);
        Ok(out)
    }

    /// Tridiagonal Jacobian `(sub, diag, sup)` of the full right-hand side.
    ///
    /// `sub[j] = dF_j/da_{j-1}` (with `sub[0] = 0`), `sup[j] = dF_j/da_{j+1}`
    /// (with `sup[N] = 0`).
    pub fn jacobian_into(&self, a: &[f64], sub: &mut [f64], diag: &mut [f64], sup: &mut [f64]) {
        let n = a.len();
        let nl = if self.hooks.nonlinear { 1.0 } else { 0.0 };
        for j in 0..n {
            sub[j] = if j > 0 { nl * 2.0 * self.gain[j] * a[j - 1] } else { 0.0 };
            let next = if j + 1 < n { a[j + 1] } else { 0.0 };
            diag[j] = -self.damping[j] - nl * self.transfer[j] * next;
            sup[j] = if j + 1 < n { -nl * self.transfer[j] * a[j] } else { 0.0 };
        }
    }

    /// `Pi_j = 2^{cj} a_j^2 a_{j+1}` for every shell.
    pub fn fluxes(&self, a: &[f64]) -> Vec<f64> {
        let n = a.len();
        (0..n)
            .map(|j| {
                let next = if j + 1 < n { a[j + 1] } else { 0.0 };
                self.transfer[j] * a[j] * a[j] * next
            })
            .collect()
    }

    /// `nu ||a||_{H^1}^2`, the instantaneous viscous dissipation.
    pub fn dissipation(&self, a: &[f64]) -> f64 {
        a.iter().zip(&self.damping).map(|(x, d)| d * x * x).sum()
    }

    pub fn injection(&self, a: &[f64]) -> f64 {
        self.params.f0 * a[0]
    }

    pub fn diagnostics(&self, t: f64, a: &[f64]) -> DiagnosticsRow {
        DiagnosticsRow {
            t,
            energy: energy(a),
            h1_sq: hs_norm_sq(a, 1.0),
            flux: self.fluxes(a),
            injection: self.injection(a),
        }
    }
}

/// Time derivative of every shell.
pub fn rhs(params: &ModelParams, state: &ShellState) -> Result<Vec<f64>> {
    ShellModel::new(*params)?.rhs(&state.a)
}

/// Energy flux through shell `j`.
pub fn flux(params: &ModelParams, state: &ShellState, j: usize) -> Result<f64> {
    if state.a.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: state.a.len(),
        });
    }
    if j > params.n_shells {
        return Err(Error::IndexOutOfRange {
            index: j,
            max: params.n_shells,
        });
    }
    let a = &state.a;
    let next = if j < params.n_shells { a[j + 1] } else { 0.0 };
    Ok((params.c * j as f64).exp2() * a[j] * a[j] * next)
}

/// `E = 1/2 sum a_j^2`.
pub fn energy(a: &[f64]) -> f64 {
    0.5 * a.iter().map(|x| x * x).sum::<f64>()
}

/// `||a||_{H^s}^2 = sum 2^{2js} a_j^2`.
pub fn hs_norm_sq(a: &[f64], s: f64) -> f64 {
    a.iter()
        .enumerate()
        .map(|(j, x)| (2.0 * s * j as f64).exp2() * x * x)
        .sum()
}

/// `a . da/dt - (f, a) + nu ||a||_{H^1}^2`, identically zero for the truncated
/// system.
pub fn energy_balance_residual(params: &ModelParams, state: &ShellState) -> Result<f64> {
    let model = ShellModel::new(*params)?;
    balance_residual_with(&model, &state.a)
}

pub fn balance_residual_with(model: &ShellModel, a: &[f64]) -> Result<f64> {
    let da = model.rhs(a)?;
    let power: f64 = a.iter().zip(&da).map(|(x, d)| x * d).sum();
    Ok(power - model.injection(a) + model.dissipation(a))
}

/// Partial-sum energy balance through every shell `j`:
///
/// `d/dt 1/2 sum_{i<=j} a_i^2 - [(f, a) - Pi_j - nu sum_{i<=j} 4^i a_i^2]`.
pub fn partial_balance_residuals(params: &ModelParams, state: &ShellState) -> Result<Vec<f64>> {
    let model = ShellModel::new(*params)?;
    let a = &state.a;
    let da = model.rhs(a)?;
    let pi = model.fluxes(a);
    let mut power = 0.0;
    let mut diss = 0.0;
    let inj = model.injection(a);
    Ok((0..a.len())
        .map(|j| {
            power += a[j] * da[j];
            diss += model.damping()[j] * a[j] * a[j];
            power - (inj - pi[j] - diss)
        })
        .collect())
}
