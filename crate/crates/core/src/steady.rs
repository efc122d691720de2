//! Steady states of the viscous model.
//!
//! With `alpha_j = 2^{c/6} f0^{1/2} 2^{-cj/3} A_j` the steady equations become
//!
//! ```text
//! A_{j-1}^2 - A_j A_{j+1} = mu 2^{beta j} A_j,   j >= 1
//! 1 - A_0 A_1             = mu A_0
//! ```
//!
//! with `beta = 2(1 - c/3)` and `mu = nu 2^{c/6} f0^{-1/2}`. Substituting the
//! rescaling back into the `j = 0` and `j >= 1` steady equations fixes the
//! sign of the `c/6` exponent; the frequently quoted `2^{-c/6}` does not make
//! both rescaled equations hold at once. The two conventions differ only by a
//! constant factor in `mu`.
//!
//! Writing `A_{-1} = 1`, both lines read `A_{j-1}^2 = A_j (A_{j+1} + m_j)` with
//! `m_j = mu 2^{beta j}`.
//!
//! The fixed point is found by shooting on `A_0`: the forward recursion
//! `A_{j+1} = A_{j-1}^2 / A_j - m_j` is unstable, and any error in `A_0`
//! eventually produces either a non-positive entry or a break in
//! monotonicity. Perturbations alternate in sign from shell to shell, so the
//! direction of the error in `A_0` is read from the kind of failure together
//! with the parity of the shell where it happens. The shot prefix is then
//! completed with the stable tail recursion and polished by Newton's method
//! on the full truncated system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_tridiagonal, solve_tridiagonal_pinv};
use crate::model::{ModelParams, ShellModel};

/// Rescaled amplitudes below this are reported as zero.
pub const UNDERFLOW_CUTOFF: f64 = 1e-300;

/// `(mu, beta)` for a parameter set.
pub fn rescale_mu_beta(params: &ModelParams) -> (f64, f64) {
    let beta = 2.0 * (1.0 - params.c / 3.0);
    let mu = params.nu * (params.c / 6.0).exp2() / params.f0.sqrt();
    (mu, beta)
}

/// The attraction constant `gamma(beta) = 1 - 2^{beta/2} / (1 - 2^{beta-1} + sqrt(1 + 2^{2(beta-1)}))`.
///
/// Positive exactly for `beta < 1`, zero at `beta = 1`.
pub fn gamma(beta: f64) -> f64 {
    let q = (beta - 1.0).exp2();
    1.0 - (beta / 2.0).exp2() / (1.0 - q + (1.0 + q * q).sqrt())
}

/// Real `J` with `mu 2^{beta J} = 1`; `None` in the inviscid case.
pub fn dissipation_index(mu: f64, beta: f64) -> Option<f64> {
    (mu > 0.0).then(|| -mu.log2() / beta)
}

/// `2^{c/6} f0^{1/2}`, the amplitude scale of the rescaling.
pub fn amplitude_scale(params: &ModelParams) -> f64 {
    (params.c / 6.0).exp2() * params.f0.sqrt()
}

/// `alpha_j` from `A_j`.
pub fn alpha_from_rescaled(params: &ModelParams, a_rescaled: &[f64]) -> Vec<f64> {
    let k = amplitude_scale(params);
    a_rescaled
        .iter()
        .enumerate()
        .map(|(j, x)| k * (-params.c * j as f64 / 3.0).exp2() * x)
        .collect()
}

/// The inviscid fixed point `alpha0_j = 2^{c/6 - cj/3} f0^{1/2}` on shells `0..len`.
pub fn inviscid_alpha(params: &ModelParams, len: usize) -> Vec<f64> {
    alpha_from_rescaled(params, &vec![1.0; len])
}

/// How a forward shot ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShotClass {
    /// Reached the horizon or the underflow cutoff, positive and monotone.
    Converged,
    /// Some `A_{j+1} <= 0`.
    Undershoot,
    /// Monotonicity broke: `A_{j+1} >= A_j` (strictly `>` when `mu = 0`).
    Overshoot,
}

/// Which way the trial `A_0` misses the fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootResult {
    pub classification: ShotClass,
    /// Index of the offending entry `A_m` for a failed shot.
    pub first_fail_index: Option<usize>,
    /// The sequence up to (excluding) the offending entry.
    pub sequence: Vec<f64>,
}

impl ShootResult {
    /// Direction of the error in `A_0` implied by the failure.
    ///
    /// A too-large `A_m` (overshoot) and a too-small one (undershoot) at the
    /// same shell point in opposite directions, and the sign flips with each
    /// shell. Only the relative orientation matters to the bisection, which
    /// probes both ends of its bracket before trusting it.
    pub fn side(&self) -> Option<Side> {
        let m = self.first_fail_index?;
        let even = m % 2 == 0;
        let high = match self.classification {
            ShotClass::Converged => return None,
            ShotClass::Overshoot => even,
            ShotClass::Undershoot => !even,
        };
        Some(if high { Side::High } else { Side::Low })
    }
}

/// Iterates `A_1 = 1/A_0 - mu`, `A_{j+1} = A_{j-1}^2/A_j - mu 2^{beta j}` up to
/// `A_{j_max}`, stopping at the first failure or underflow.
pub fn steady_recursion(a0: f64, mu: f64, beta: f64, j_max: usize) -> Result<ShootResult> {
    if !(a0.is_finite() && a0 > 0.0) {
        return Err(Error::InvalidParams(format!("A0 must be positive, got {a0}")));
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::InvalidParams(format!("mu must be >= 0, got {mu}")));
    }
    if j_max < 2 {
        return Err(Error::InvalidParams(format!("j_max must be >= 2, got {j_max}")));
    }
    Ok(shoot_from(1.0, a0, 0, mu, beta, j_max))
}

/// Forward recursion from `(A_{q-1}, A_q) = (prev, start)`. The returned
/// sequence begins at `A_q`; failure indices are absolute.
fn shoot_from(prev: f64, start: f64, q: usize, mu: f64, beta: f64, j_max: usize) -> ShootResult {
    let strict = mu > 0.0;
    let mut seq = Vec::with_capacity(j_max + 1 - q.min(j_max));
    seq.push(start);
    let (mut prev2, mut prev) = (prev, start);
    for j in q..j_max {
        let next = prev * (prev2 / prev) * (prev2 / prev) - mu * (beta * j as f64).exp2();
        let fail = if !(next > 0.0) {
            Some(ShotClass::Undershoot)
        } else if (strict && next >= prev) || next > prev {
            Some(ShotClass::Overshoot)
        } else {
            None
        };
        if let Some(classification) = fail {
            return ShootResult {
                classification,
                first_fail_index: Some(j + 1),
                sequence: seq,
            };
        }
        if next < UNDERFLOW_CUTOFF {
            break;
        }
        seq.push(next);
        prev2 = prev;
        prev = next;
    }
    ShootResult {
        classification: ShotClass::Converged,
        first_fail_index: None,
        sequence: seq,
    }
}

/// One bisection stage on `A_q` with `A_{q-1}` held fixed.
struct Segment {
    /// Reliable values `A_q, A_{q+1}, ...`.
    values: Vec<f64>,
    /// The shot reached the horizon or the cutoff without failing.
    converged: bool,
    steps: usize,
    bracket: (f64, f64),
    low_side: Option<Side>,
}

#[allow(clippy::too_many_arguments)]
fn bisect_segment(
    prev: f64,
    q: usize,
    mut lo: f64,
    mut hi: f64,
    mu: f64,
    beta: f64,
    j_max: usize,
    tol: f64,
) -> Result<Segment> {
    let shot_lo = shoot_from(prev, lo, q, mu, beta, j_max);
    let shot_hi = shoot_from(prev, hi, q, mu, beta, j_max);
    let side_lo = shot_lo.side();
    let done = |shot: ShootResult, lo, hi, steps| Segment {
        values: shot.sequence,
        converged: true,
        steps,
        bracket: (lo, hi),
        low_side: side_lo,
    };
    if side_lo.is_none() {
        return Ok(done(shot_lo, lo, hi, 0));
    }
    if shot_hi.side().is_none() {
        return Ok(done(shot_hi, lo, hi, 0));
    }
    if side_lo == shot_hi.side() {
        return Err(Error::NoBracket(format!(
            "both ends of [{lo}, {hi}] for A_{q} shoot {side_lo:?} (mu = {mu}, beta = {beta})"
        )));
    }
    let mut steps = 0;
    while steps < 400 {
        let mid = (lo * hi).sqrt();
        if !(mid > lo && mid < hi) || hi / lo - 1.0 <= tol {
            break;
        }
        steps += 1;
        let shot = shoot_from(prev, mid, q, mu, beta, j_max);
        match shot.side() {
            None => return Ok(done(shot, lo, hi, steps)),
            s if s == side_lo => lo = mid,
            _ => hi = mid,
        }
    }
    let a = shoot_from(prev, lo, q, mu, beta, j_max).sequence;
    let b = shoot_from(prev, hi, q, mu, beta, j_max).sequence;
    let agree = a
        .iter()
        .zip(&b)
        .take_while(|(x, y)| (*x - *y).abs() <= 1e-6 * x.abs().max(y.abs()))
        .count()
        .max(1);
    Ok(Segment {
        values: a[..agree].iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect(),
        converged: false,
        steps,
        bracket: (lo, hi),
        low_side: side_lo,
    })
}

/// Knobs for [`solve_fixed_point`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative width at which the `A_0` bracket is considered resolved.
    pub tol_a0: f64,
    /// Shooting horizon; defaults to `ceil(J) + 60`.
    pub j_max: Option<usize>,
    /// Finish with Newton's method on the full truncated system.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_a0: 1e-14,
            j_max: None,
            polish: true,
        }
    }
}

/// Bookkeeping from the shooting stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootingSummary {
    pub bisection_steps: usize,
    pub bracket: (f64, f64),
    /// Side reported at the lower end of the bracket.
    pub low_end_side: Option<Side>,
    /// Number of leading entries on which both bracket ends agree.
    pub reliable_prefix: usize,
    pub shot_a0: f64,
    /// Number of marching stages (1 when a single shot on `A_0` sufficed).
    pub stages: usize,
    pub polish_iterations: usize,
}

/// A computed fixed point in both rescaled and physical variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub c: f64,
    pub nu: f64,
    pub f0: f64,
    pub mu: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Real solution of `mu 2^{beta J} = 1` (absent when `mu = 0`).
    #[serde(rename = "J")]
    pub j_dissipation: Option<f64>,
    /// Rescaled sequence `A_0..A_M`; entries below the cutoff are dropped.
    #[serde(rename = "A")]
    pub a_rescaled: Vec<f64>,
    /// Physical fixed point on the same shells.
    pub alpha: Vec<f64>,
    /// Max absolute defect of the rescaled steady equations.
    pub residual: f64,
    /// True when the sequence ends by underflow, so `A_{M+1} = 0` closes it.
    pub tail_closed: bool,
    pub shooting: ShootingSummary,
    pub warnings: Vec<String>,
}

impl SteadyState {
    /// `alpha` padded with zeros or cut to shells `0..=n`.
    pub fn alpha_on(&self, n: usize) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.resize(n + 1, 0.0);
        v
    }

    /// `(alpha, f) = alpha_0 f0`.
    pub fn injection(&self) -> f64 {
        self.alpha[0] * self.f0
    }
}

/// Max absolute defect of the rescaled equations over every equation whose
/// right neighbour is known (`A_{M+1} = 0` when `closed`).
pub fn fixed_point_residual(a: &[f64], mu: f64, beta: f64, closed: bool) -> f64 {
    let n = a.len();
    let last = if closed { n } else { n.saturating_sub(1) };
    (0..last)
        .map(|j| {
            let left = if j == 0 { 1.0 } else { a[j - 1] };
            let right = if j + 1 < n { a[j + 1] } else { 0.0 };
            (left * left - a[j] * right - mu * (beta * j as f64).exp2() * a[j]).abs()
        })
        .fold(0.0, f64::max)
}

pub fn solve_fixed_point(params: &ModelParams, opts: &SolverOptions) -> Result<SteadyState> {
    params.validate()?;
    let (mu, beta) = rescale_mu_beta(params);
    let j_dis = dissipation_index(mu, beta);
    let mut warnings = Vec::new();
    if !params.in_proven_range() {
        warnings.push(format!(
            "c = {} outside (3/2,5/2]: monotonicity unproven",
            params.c
        ));
    }
    let j_max = opts.j_max.unwrap_or(match j_dis {
        Some(j) => (j.max(0.0).ceil() as usize) + 60,
        None => 60,
    });
    if j_max < 2 {
        return Err(Error::InvalidParams(format!("j_max must be >= 2, got {j_max}")));
    }

    // A_1 < A_0 forces A_0 > r, so r/2 shoots low and 2r shoots high.
    let r = ((mu * mu + 4.0).sqrt() - mu) / 2.0;
    let first = bisect_segment(1.0, 0, r / 2.0, 2.0 * r, mu, beta, j_max, opts.tol_a0)?;
    let mut summary = ShootingSummary {
        bisection_steps: first.steps,
        bracket: first.bracket,
        low_end_side: first.low_side,
        reliable_prefix: first.values.len(),
        shot_a0: first.values[0],
        stages: 1,
        polish_iterations: 0,
    };
    let mut a = first.values;
    let mut converged = first.converged;

    // March: re-shoot on the last reliable entry while that keeps gaining
    // shells. Each stage tolerates a defect of order 1e-6 at its junction,
    // which the polish removes.
    while !converged && a.len() >= 2 && a.len() <= j_max && summary.stages < 64 {
        let q = a.len() - 1;
        let (prev, guess) = (a[q - 1], a[q]);
        let mut stage = None;
        for width in [1e-5, 1e-4, 1e-3, 1e-2] {
            if let Ok(seg) = bisect_segment(
                prev,
                q,
                guess * (1.0 - width),
                guess * (1.0 + width),
                mu,
                beta,
                j_max,
                opts.tol_a0,
            ) {
                stage = Some(seg);
                break;
            }
        }
        let Some(seg) = stage else { break };
        if seg.values.len() < 3 && !seg.converged {
            break;
        }
        summary.stages += 1;
        summary.bisection_steps += seg.steps;
        a.truncate(q);
        a.extend_from_slice(&seg.values);
        converged = seg.converged;
    }
    summary.reliable_prefix = a.len();

    let mut tail_closed = converged && a.len() <= j_max;
    if mu > 0.0 {
        let (mut logs, closed) = extend_guess(&a, mu, beta, j_max);
        tail_closed = closed;
        if opts.polish {
            summary.polish_iterations = polish_log(&mut logs, mu, beta)?;
        }
        a = logs
            .iter()
            .map(|u| u.exp())
            .take_while(|x| *x >= UNDERFLOW_CUTOFF)
            .collect();
        if a.len() < logs.len() {
            tail_closed = true;
        }
    }

    let residual = fixed_point_residual(&a, mu, beta, tail_closed);
    let alpha = alpha_from_rescaled(params, &a);
    if mu > 0.0 && params.in_proven_range() && !check_monotonicity(&a, true) {
        warnings.push("computed sequence is not strictly decreasing".into());
    }
    Ok(SteadyState {
        c: params.c,
        nu: params.nu,
        f0: params.f0,
        mu,
        beta,
        gamma: gamma(beta),
        j_dissipation: j_dis,
        a_rescaled: a,
        alpha,
        residual,
        tail_closed,
        shooting: summary,
        warnings,
    })
}

/// `ln(e^x + e^y)` without overflow or underflow.
fn log_add(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    let (hi, lo) = if x > y { (x, y) } else { (y, x) };
    hi + (lo - hi).exp().ln_1p()
}

/// Extends a reliable prefix to a full initial guess in log variables.
///
/// Each new entry assumes the next ratio equals the current one,
/// `A_{j+1}/A_j = A_j/A_{j-1} = x`, which turns the steady equation into
/// `x^3 + (m_j / A_{j-1}) x - 1 = 0`. Its positive root is close to 1 in the
/// inertial range and to `A_{j-1}/m_j` in the dissipation range. The guess
/// stops once it falls well below the underflow cutoff.
fn extend_guess(prefix: &[f64], mu: f64, beta: f64, j_max: usize) -> (Vec<f64>, bool) {
    let mut logs: Vec<f64> = prefix.iter().map(|x| x.ln()).collect();
    let floor = UNDERFLOW_CUTOFF.ln() - 40.0;
    let ln2 = std::f64::consts::LN_2;
    while logs.len() <= j_max {
        let j = logs.len();
        let prev = logs[j - 1];
        // ln(m_j / A_{j-1})
        let ln_k = mu.ln() + beta * j as f64 * ln2 - prev;
        logs.push(prev + similarity_ratio_ln(ln_k));
        if logs[j] < floor {
            return (logs, true);
        }
    }
    (logs, false)
}

/// `ln x` for the positive root of `x^3 + k x - 1 = 0`, given `ln k`.
fn similarity_ratio_ln(ln_k: f64) -> f64 {
    if ln_k > 30.0 {
        // x ~ 1/k
        return -ln_k;
    }
    let k = ln_k.exp();
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid * mid + k * mid - 1.0 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    (0.5 * (lo + hi)).ln()
}

/// Newton's method on `A_{j-1}^2 = A_j (A_{j+1} + m_j)` in the variables
/// `u_j = ln A_j`, with the residuals normalised by `A_{j-1}^2`.
///
/// Returns the iteration count.
fn polish_log(u: &mut [f64], mu: f64, beta: f64) -> Result<usize> {
    let n = u.len();
    let ln_m: Vec<f64> = (0..n)
        .map(|j| mu.ln() + beta * j as f64 * std::f64::consts::LN_2)
        .collect();
    let eval = |u: &[f64], r: &mut [f64], sub: &mut [f64], diag: &mut [f64], sup: &mut [f64]| {
        for j in 0..n {
            let left = if j == 0 { 0.0 } else { u[j - 1] };
            let right = if j + 1 < n { u[j + 1] } else { f64::NEG_INFINITY };
            let q = (u[j] - 2.0 * left + log_add(right, ln_m[j])).exp();
            let cross = (u[j] - 2.0 * left + right).exp();
            r[j] = 1.0 - q;
            sub[j] = if j == 0 { 0.0 } else { 2.0 * q };
            diag[j] = -q;
            sup[j] = if j + 1 < n { -cross } else { 0.0 };
        }
    };
    let norm = |r: &[f64]| r.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let merit = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (mut r, mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut trial = vec![0.0; n];
    let mut rt = vec![0.0; n];
    let (mut s2, mut d2, mut p2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    eval(u, &mut r, &mut sub, &mut diag, &mut sup);
    let mut res = norm(&r);
    let mut m0 = merit(&r);
    for it in 0..200 {
        if res < 1e-15 {
            return Ok(it);
        }
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let mut du = match solve_tridiagonal(&sub, &diag, &sup, &rhs) {
            Ok(du) => du,
            Err(Error::Singular(_)) => solve_tridiagonal_pinv(&sub, &diag, &sup, &rhs)?,
            Err(e) => return Err(e),
        };
        let big = du.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if big > 2.0 {
            du.iter_mut().for_each(|x| *x *= 2.0 / big);
        }
        let mut lambda = 1.0;
        loop {
            for k in 0..n {
                trial[k] = u[k] + lambda * du[k];
            }
            eval(&trial, &mut rt, &mut s2, &mut d2, &mut p2);
            let mt = merit(&rt);
            if mt.is_finite() && mt < m0 * (1.0 - 1e-4 * lambda) || lambda < 1e-6 {
                break;
            }
            lambda *= 0.5;
        }
        let step = lambda * du.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        u.copy_from_slice(&trial);
        std::mem::swap(&mut r, &mut rt);
        std::mem::swap(&mut sub, &mut s2);
        std::mem::swap(&mut diag, &mut d2);
        std::mem::swap(&mut sup, &mut p2);
        let prev = res;
        res = norm(&r);
        m0 = merit(&r);
        if step < 1e-15 || (res >= prev && res < 1e-12) {
            return Ok(it + 1);
        }
    }
    if res < 1e-12 {
        Ok(200)
    } else {
        Err(Error::SolveFailed(format!(
            "Newton polish did not converge, relative residual {res:e}"
        )))
    }
}

/// Strict (`A_{j-1} > A_j`) or non-strict monotone decrease.
pub fn check_monotonicity(a: &[f64], strict: bool) -> bool {
    a.windows(2)
        .all(|w| if strict { w[0] > w[1] } else { w[0] >= w[1] })
}

/// `A_{ceil(J)+k} / A_{ceil(J)+k-1}^2 <= 2^{-beta k}` for every computed `k >= 0`
/// (with `A_{-1} = 1`). Vacuous for `mu = 0`.
pub fn check_decay_bound(a: &[f64], mu: f64, beta: f64) -> bool {
    let Some(j_dis) = dissipation_index(mu, beta) else {
        return true;
    };
    let start = j_dis.ceil().max(0.0) as usize;
    (start..a.len()).all(|j| {
        let k = (j - start) as f64;
        let prev = if j == 0 { 1.0 } else { a[j - 1] };
        // a_j / prev <= 2^{-beta k} prev, arranged to avoid underflow of prev^2.
        a[j] / prev <= (-beta * k).exp2() * prev * (1.0 + 1e-12)
    })
}

/// Result of the `g_j` bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GjReport {
    /// `max_j g_j 2^{beta/2}`.
    pub max_scaled: f64,
    pub gamma: f64,
    /// `max_scaled < 1 - gamma`.
    pub holds: bool,
}

/// `g_j = A_{j+1} / (A_j + sqrt(A_{j+1} A_{j+2}))` against `(1 - gamma) 2^{-beta/2}`.
pub fn check_gj_bound(a: &[f64], _mu: f64, beta: f64) -> GjReport {
    let n = a.len();
    let g = gamma(beta);
    let max_scaled = (0..n)
        .filter(|&j| a[j] > 0.0)
        .map(|j| {
            let a1 = a.get(j + 1).copied().unwrap_or(0.0);
            let a2 = a.get(j + 2).copied().unwrap_or(0.0);
            a1 / (a[j] + (a1 * a2).sqrt())
        })
        .fold(0.0_f64, f64::max)
        * (beta / 2.0).exp2();
    GjReport {
        max_scaled,
        gamma: g,
        holds: max_scaled < 1.0 - g,
    }
}

/// Outcome of [`newton_oracle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewtonStatus {
    Converged,
    Diverged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub alpha: Vec<f64>,
    /// Max over shells of `|F_j|` divided by the magnitude of the terms of
    /// equation `j`.
    pub residual: f64,
    pub iterations: usize,
    pub status: NewtonStatus,
    /// Set when the Jacobian was singular and the pseudo-inverse was used.
    pub used_pseudo_inverse: bool,
}

impl NewtonReport {
    pub fn converged(&self) -> bool {
        self.status == NewtonStatus::Converged
    }
}

/// Default oracle guess: `alpha0_j exp(-2^j / kappa_d)` with `kappa_d = 2^J`.
pub fn oracle_guess(params: &ModelParams) -> Vec<f64> {
    let (mu, beta) = rescale_mu_beta(params);
    let kappa = dissipation_index(mu, beta).map(f64::exp2).unwrap_or(f64::INFINITY);
    inviscid_alpha(params, params.len())
        .into_iter()
        .enumerate()
        .map(|(j, x)| (x * (-(j as f64).exp2() / kappa).exp()).max(1e-300))
        .collect()
}

/// Damped Newton iteration on the truncated physical steady system
/// `f_j + 2^{c(j-1)} alpha_{j-1}^2 - 2^{cj} alpha_j alpha_{j+1} - nu 4^j alpha_j = 0`,
/// `alpha_{N+1} = 0`, independent of the rescaling used by the shooting solver.
pub fn newton_oracle(params: &ModelParams, initial_guess: Option<&[f64]>) -> Result<NewtonReport> {
    let model = ShellModel::new(*params)?;
    let n = params.len();
    let mut x = match initial_guess {
        Some(g) => {
            let mut v = g.to_vec();
            v.resize(n, 0.0);
            v
        }
        None => oracle_guess(params),
    };
    crate::model::check_finite(&x)?;

    // Each equation is normalised by the sum of magnitudes of its terms at the
    // current iterate, so shells of very different size weigh alike.
    let scaled = |x: &[f64], f: &mut [f64]| -> f64 {
        model.rhs_into(x, f);
        let mut worst = 0.0_f64;
        for j in 0..n {
            let left = if j == 0 {
                params.f0
            } else {
                (params.c * (j as f64 - 1.0)).exp2() * x[j - 1] * x[j - 1]
            };
            let right = if j + 1 < n { x[j + 1] } else { 0.0 };
            let loss = (params.c * j as f64).exp2() * (x[j] * right).abs();
            let damp = model.damping()[j] * x[j].abs();
            let scale = left.abs() + loss + damp;
            // Terms at the edge of the subnormal range carry no relative precision.
            let rel = f[j].abs() / scale.max(1e-280);
            worst = worst.max(rel);
        }
        worst
    };

    let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut f = vec![0.0; n];
    let mut ft = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut used_pinv = false;
    let mut res = scaled(&x, &mut f);
    let merit = |f: &[f64], w: &[f64]| -> f64 {
        f.iter().zip(w).map(|(v, s)| (v / s).powi(2)).sum::<f64>().sqrt()
    };
    for it in 0..100 {
        if res < 1e-13 {
            return Ok(NewtonReport {
                alpha: x,
                residual: res,
                iterations: it,
                status: NewtonStatus::Converged,
                used_pseudo_inverse: used_pinv,
            });
        }
        // Row weights frozen for this iteration's line search.
        let w: Vec<f64> = (0..n)
            .map(|j| {
                let left = if j == 0 {
                    params.f0
                } else {
                    (params.c * (j as f64 - 1.0)).exp2() * x[j - 1] * x[j - 1]
                };
                let d = model.damping()[j] * x[j].abs();
                (left.abs() + d).max(f64::MIN_POSITIVE)
            })
            .collect();
        model.jacobian_into(&x, &mut sub, &mut diag, &mut sup);
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let dx = match solve_tridiagonal(&sub, &diag, &sup, &rhs) {
            Ok(dx) => dx,
            Err(Error::Singular(_)) => {
                used_pinv = true;
                solve_tridiagonal_pinv(&sub, &diag, &sup, &rhs)?
            }
            Err(e) => return Err(e),
        };
        let m0 = merit(&f, &w);
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= 1e-8 {
            for k in 0..n {
                // Shells far down the tail cannot cross zero in one step.
                trial[k] = x[k] + lambda * dx[k];
                if x[k] > 0.0 {
                    trial[k] = trial[k].max(1e-3 * x[k]);
                }
            }
            if trial.iter().all(|v| v.is_finite()) {
                model.rhs_into(&trial, &mut ft);
                if merit(&ft, &w) < m0 * (1.0 - 1e-4 * lambda) {
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            // Take the full step anyway when already at rounding level.
            let rel_step = dx
                .iter()
                .zip(&x)
                .map(|(d, v)| d.abs() / v.abs().max(f64::MIN_POSITIVE))
                .fold(0.0_f64, f64::max);
            if res < 1e-11 && rel_step < 1e-10 {
                for k in 0..n {
                    x[k] += dx[k];
                }
                res = scaled(&x, &mut f);
                return Ok(NewtonReport {
                    alpha: x,
                    residual: res,
                    iterations: it + 1,
                    status: if res < 1e-12 {
                        NewtonStatus::Converged
                    } else {
                        NewtonStatus::Diverged
                    },
                    used_pseudo_inverse: used_pinv,
                });
            }
            return Ok(NewtonReport {
                alpha: x,
                residual: res,
                iterations: it + 1,
                status: NewtonStatus::Diverged,
                used_pseudo_inverse: used_pinv,
            });
        }
        x.copy_from_slice(&trial);
        res = scaled(&x, &mut f);
    }
    Ok(NewtonReport {
        alpha: x,
        residual: res,
        iterations: 100,
        status: if res < 1e-13 {
            NewtonStatus::Converged
        } else {
            NewtonStatus::MaxIterations
        },
        used_pseudo_inverse: used_pinv,
    })
}

/// Runs the oracle from its default guess and, failing that, by continuation
/// down from a ten-times larger viscosity per stage.
pub fn newton_oracle_continued(params: &ModelParams) -> Result<NewtonReport> {
    let direct = newton_oracle(params, None)?;
    if direct.converged() || params.nu == 0.0 {
        return Ok(direct);
    }
    for stages in 1..=8 {
        let mut guess: Option<Vec<f64>> = None;
        let mut ok = true;
        for k in (0..=stages).rev() {
            let p = ModelParams {
                nu: params.nu * 10f64.powi(k),
                ..*params
            };
            let rep = newton_oracle(&p, guess.as_deref())?;
            if !rep.converged() {
                ok = false;
                break;
            }
            guess = Some(rep.alpha);
        }
        if ok {
            return newton_oracle(params, guess.as_deref());
        }
    }
    Ok(direct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: f64, nu: f64, f0: f64, n: usize) -> ModelParams {
        ModelParams::new(c, nu, f0, n).unwrap()
    }

    #[test]
    fn mu_and_beta() {
        let (_, b) = rescale_mu_beta(&params(1.5, 0.1, 1.0, 4));
        assert!((b - 1.0).abs() < 1e-15);
        let (_, b) = rescale_mu_beta(&params(2.5, 0.1, 1.0, 4));
        assert!((b - 1.0 / 3.0).abs() < 1e-15);
        let (m, _) = rescale_mu_beta(&params(2.3, 0.0, 3.0, 4));
        assert_eq!(m, 0.0);
        let (m, _) = rescale_mu_beta(&params(2.0, 0.1, 1.0, 4));
        assert!((m - 0.125_992_104_989_487_3).abs() < 1e-15);
    }

    /// Substituting the rescaling into the physical steady equations must
    /// reproduce the rescaled ones with the chosen `mu`.
    #[test]
    fn rescaling_maps_physical_to_rescaled_equations() {
        let p = params(2.2, 0.07, 1.7, 10);
        let (mu, beta) = rescale_mu_beta(&p);
        let a: Vec<f64> = (0..11).map(|j| 0.9_f64.powi(j * j)).collect();
        let alpha = alpha_from_rescaled(&p, &a);
        let model = ShellModel::new(p).unwrap();
        let f = model.rhs(&alpha).unwrap();
        let k = amplitude_scale(&p);
        for j in 0..11usize {
            let left = if j == 0 { 1.0 } else { a[j - 1] };
            let right = if j + 1 < 11 { a[j + 1] } else { 0.0 };
            let rescaled = left * left - a[j] * right - mu * (beta * j as f64).exp2() * a[j];
            // Physical equation j divided by f0 for j = 0, by K^2 2^{c(j-1)/3} otherwise.
            let factor = if j == 0 {
                p.f0
            } else {
                k * k * (p.c * (j as f64 - 1.0) / 3.0).exp2()
            };
            assert!((f[j] / factor - rescaled).abs() < 1e-12, "j={j}");
        }
    }

    #[test]
    fn gamma_closed_form() {
        assert!(gamma(1.0).abs() < 1e-15);
        assert!(gamma(2.0 / 3.0) > 0.0);
        assert!(gamma(1.2) < 0.0);
        assert!((gamma(2.0 / 3.0) - 0.150_423_274_667_515).abs() < 1e-12);
    }

    #[test]
    fn inviscid_recursion_is_constant() {
        let s = steady_recursion(1.0, 0.0, 2.0 / 3.0, 40).unwrap();
        assert_eq!(s.classification, ShotClass::Converged);
        assert_eq!(s.sequence.len(), 41);
        assert!(s.sequence.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn inviscid_overshoot_from_large_a0() {
        let s = steady_recursion(1.1, 0.0, 2.0 / 3.0, 40).unwrap();
        assert_eq!(s.classification, ShotClass::Overshoot);
        assert_eq!(s.first_fail_index, Some(2));
        assert_eq!(s.side(), Some(Side::High));
    }

    #[test]
    fn viscous_small_a0_overshoots_at_first_shell() {
        let s = steady_recursion(0.5, 1.0, 2.0 / 3.0, 40).unwrap();
        assert_eq!(s.classification, ShotClass::Overshoot);
        assert_eq!(s.first_fail_index, Some(1));
        assert_eq!(s.side(), Some(Side::Low));
    }

    #[test]
    fn a0_at_inverse_mu_undershoots() {
        let s = steady_recursion(4.0, 0.25, 2.0 / 3.0, 40).unwrap();
        assert_eq!(s.classification, ShotClass::Undershoot);
        assert_eq!(s.first_fail_index, Some(1));
        assert_eq!(s.side(), Some(Side::High));
    }

    #[test]
    fn rejects_nonpositive_a0() {
        assert!(steady_recursion(0.0, 0.1, 0.5, 10).is_err());
        assert!(steady_recursion(-1.0, 0.1, 0.5, 10).is_err());
    }

    #[test]
    fn inviscid_solution_is_closed_form() {
        let p = params(2.0, 0.0, 1.0, 10);
        let s = solve_fixed_point(&p, &SolverOptions::default()).unwrap();
        assert!(s.a_rescaled.iter().all(|&x| x == 1.0));
        assert!(s.residual < 1e-14);
        assert!(s.j_dissipation.is_none());
    }

    #[test]
    fn viscous_solution_is_monotone_with_small_residual() {
        let p = params(2.0, 0.1, 1.0, 10);
        let s = solve_fixed_point(&p, &SolverOptions::default()).unwrap();
        assert!(s.residual < 1e-12, "{}", s.residual);
        assert!(check_monotonicity(&s.a_rescaled, true));
        assert!(check_decay_bound(&s.a_rescaled, s.mu, s.beta));
        assert!(check_gj_bound(&s.a_rescaled, s.mu, s.beta).holds);
        assert!(s.tail_closed);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn warns_outside_proven_range() {
        let p = params(1.4, 0.1, 1.0, 10);
        let s = solve_fixed_point(&p, &SolverOptions::default()).unwrap();
        assert!(s.warnings.iter().any(|w| w.contains("monotonicity unproven")));
    }

    #[test]
    fn inviscid_sequence_fails_only_strict_monotonicity() {
        let a = vec![1.0; 10];
        assert!(!check_monotonicity(&a, true));
        assert!(check_monotonicity(&a, false));
    }

    #[test]
    fn newton_recovers_exact_solution_immediately() {
        let p = params(2.0, 0.1, 1.0, 20);
        let s = solve_fixed_point(&p, &SolverOptions::default()).unwrap();
        let rep = newton_oracle(&p, Some(&s.alpha_on(20))).unwrap();
        assert!(rep.converged());
        assert!(rep.iterations <= 1, "{}", rep.iterations);
    }

    #[test]
    fn newton_reports_failure_for_truncated_inviscid_system() {
        let p = params(2.0, 0.0, 1.0, 12);
        let rep = newton_oracle(&p, None).unwrap();
        assert!(!rep.converged());
    }

    #[test]
    fn shooting_agrees_with_newton_oracle() {
        for &(c, nu) in &[(1.6, 1e-2), (2.0, 1e-4), (2.5, 1e-3), (2.5, 1e-5)] {
            let s = solve_fixed_point(&params(c, nu, 1.0, 4), &SolverOptions::default()).unwrap();
            assert!(s.residual < 1e-13, "c={c} nu={nu} res={}", s.residual);
            let n = s.alpha.iter().position(|&x| x < 1e-60).unwrap_or(s.alpha.len());
            let p = params(c, nu, 1.0, n);
            let rep = newton_oracle(&p, None).unwrap();
            assert!(rep.converged(), "c={c} nu={nu} {:?}", rep.status);
            let exact = s.alpha_on(n);
            for j in 0..=n {
                if exact[j] > 1e-30 {
                    let rel = (rep.alpha[j] / exact[j] - 1.0).abs();
                    assert!(rel < 1e-10, "c={c} nu={nu} j={j} rel={rel:e}");
                }
            }
        }
    }

    #[test]
    fn small_viscosity_bounds_hold() {
        let s = solve_fixed_point(&params(2.0, 1e-5, 1.0, 4), &SolverOptions::default()).unwrap();
        assert!(check_monotonicity(&s.a_rescaled, true));
        assert!(check_decay_bound(&s.a_rescaled, s.mu, s.beta));
        let gj = check_gj_bound(&s.a_rescaled, s.mu, s.beta);
        assert!(gj.holds, "{gj:?}");
        assert!(s.warnings.is_empty(), "{:?}", s.warnings);
    }

    #[test]
    fn continued_oracle_converges() {
        let rep = newton_oracle_continued(&params(2.0, 1e-3, 1.0, 21)).unwrap();
        assert!(rep.converged());
    }
}
