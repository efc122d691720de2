//! Invariant suite behind `shellflow verify`.

use std::fmt::Write as _;

use crate::cli::CheckRecord;
use crate::experiments::{distance_sq, fit_attractor, random_initial};
use crate::integrator::{energy_inequality_check, integrate_with, IntegratorConfig};
use crate::model::{balance_residual_with, ModelHooks, ModelParams, ShellModel};
use crate::steady::{
    check_decay_bound, check_gj_bound, check_monotonicity, fixed_point_residual, newton_oracle_continued,
    solve_fixed_point, SolverOptions,
};

const CS: [f64; 3] = [1.6, 2.0, 2.5];

fn record(name: String, pass: bool, detail: String) -> CheckRecord {
    CheckRecord { name, pass, detail }
}

fn failed(name: String, e: impl std::fmt::Display) -> CheckRecord {
    record(name, false, format!("error: {e}"))
}

/// Runs every check; `gain_shift` perturbs the gain exponent of the model
/// used for the dynamic checks.
pub fn run_suite(quick: bool, gain_shift: f64) -> Vec<CheckRecord> {
    let nus: &[f64] = if quick {
        &[1e-1, 1e-2, 1e-3]
    } else {
        &[1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
    };
    let f0s: &[f64] = if quick { &[1.0] } else { &[0.5, 1.0, 2.0] };
    let hooks = ModelHooks {
        gain_exponent_shift: gain_shift,
        ..Default::default()
    };
    let mut out = Vec::new();
    for &c in &CS {
        out.push(telescoping(c, hooks));
    }
    for &c in &CS {
        for &f0 in f0s {
            out.push(inviscid(c, f0));
        }
    }
    for &c in &CS {
        for &nu in nus {
            out.extend(steady_checks(c, nu));
        }
    }
    out.extend(trajectory(hooks, if quick { 20.0 } else { 40.0 }));
    out
}

fn telescoping(c: f64, hooks: ModelHooks) -> CheckRecord {
    let name = format!("energy telescoping c={c}");
    let run = || -> crate::Result<(f64, f64)> {
        let params = ModelParams::new(c, 0.1, 1.0, 12)?;
        let model = ShellModel::with_hooks(params, hooks)?;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for seed in 0..8 {
            let a = random_initial(&params, seed).a;
            let res = balance_residual_with(&model, &a)?;
            let da = model.rhs(&a)?;
            let s: f64 = a.iter().zip(&da).map(|(x, d)| (x * d).abs()).sum::<f64>()
                + model.injection(&a).abs()
                + model.dissipation(&a);
            worst = worst.max(res.abs() / s);
            scale = scale.max(s);
        }
        Ok((worst, scale))
    };
    match run() {
        Ok((worst, _)) => record(name, worst <= 1e-13, format!("max relative residual {worst:e}")),
        Err(e) => failed(name, e),
    }
}

fn inviscid(c: f64, f0: f64) -> CheckRecord {
    let name = format!("inviscid fixed point c={c} f0={f0}");
    let run = || -> crate::Result<(f64, f64)> {
        let params = ModelParams::new(c, 0.0, f0, 2)?;
        let s = solve_fixed_point(&params, &SolverOptions::default())?;
        let err = s
            .alpha
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let exact = (c / 6.0 - c * j as f64 / 3.0).exp2() * f0.sqrt();
                ((x - exact) / exact).abs()
            })
            .fold(0.0, f64::max);
        Ok((err, s.residual))
    };
    match run() {
        Ok((err, res)) => record(
            name,
            err < 1e-12 && res < 1e-12,
            format!("max rel error {err:e}, residual {res:e}"),
        ),
        Err(e) => failed(name, e),
    }
}

fn steady_checks(c: f64, nu: f64) -> Vec<CheckRecord> {
    let tag = format!("c={c} nu={nu:e}");
    let params = match ModelParams::new(c, nu, 1.0, 2) {
        Ok(p) => p,
        Err(e) => return vec![failed(format!("fixed point {tag}"), e)],
    };
    let s = match solve_fixed_point(&params, &SolverOptions::default()) {
        Ok(s) => s,
        Err(e) => return vec![failed(format!("fixed point {tag}"), e)],
    };
    let a = &s.a_rescaled;
    let mut out = vec![
        record(
            format!("fixed point residual {tag}"),
            s.residual < 1e-10 && fixed_point_residual(a, s.mu, s.beta, s.tail_closed).is_finite(),
            format!("relative residual {:e}", s.residual),
        ),
        record(
            format!("monotone {tag}"),
            check_monotonicity(a, true),
            format!("{} shells", a.len()),
        ),
        record(
            format!("decay bound {tag}"),
            check_decay_bound(a, s.mu, s.beta),
            format!("J = {:.3}", s.j_dissipation.unwrap_or(f64::NAN)),
        ),
    ];
    let g = check_gj_bound(a, s.mu, s.beta);
    out.push(record(
        format!("g_j bound {tag}"),
        g.holds,
        format!("max g_j 2^(beta/2) = {:.6} vs 1 - gamma = {:.6}", g.max_scaled, 1.0 - g.gamma),
    ));
    let n = crate::cli::newton_truncation(&s.alpha);
    let p = ModelParams { n_shells: n, ..params };
    out.push(match newton_oracle_continued(&p) {
        Ok(rep) => {
            let diff = crate::cli::max_rel_diff(&rep.alpha, &s.alpha_on(n));
            record(
                format!("newton agreement {tag}"),
                rep.converged() && diff < 1e-8,
                format!("N = {n}, {} iterations, max rel diff {diff:e}", rep.iterations),
            )
        }
        Err(e) => failed(format!("newton agreement {tag}"), e),
    });
    out
}

fn trajectory(hooks: ModelHooks, t_end: f64) -> Vec<CheckRecord> {
    let tag = "c=2 nu=0.5 N=12";
    let run = || -> crate::Result<Vec<CheckRecord>> {
        let params = ModelParams::new(2.0, 0.5, 1.0, 12)?;
        let model = ShellModel::with_hooks(params, hooks)?;
        let config = IntegratorConfig {
            t_end,
            sample_every: 0.05,
            ..Default::default()
        };
        let series = integrate_with(&model, &config, &random_initial(&params, 7))?;
        let steady = solve_fixed_point(&params, &SolverOptions::default())?;
        let alpha = steady.alpha_on(params.n_shells);
        let e = energy_inequality_check(&series)?;
        let fit = fit_attractor(&series, &alpha, steady.gamma);
        let b_end = distance_sq(&series, &alpha).last().copied().unwrap_or(f64::NAN).sqrt();
        let min_rel = series.step_stats.min_relative_amplitude;
        Ok(vec![
            record(
                format!("positivity {tag}"),
                min_rel >= -config.positivity_tol,
                format!("min a_j / max|a| = {min_rel:e}"),
            ),
            record(
                format!("energy balance {tag}"),
                e.within(config.rel_tol, 10.0),
                format!("max |residual| {:e} vs {:e}", e.max_abs, 10.0 * config.rel_tol * e.scale),
            ),
            record(
                format!("attractor {tag}"),
                fit.pass && fit.bound_holds && b_end < 1e-8,
                format!(
                    "rate {} vs 2 gamma nu = {:.4}, final |b| = {b_end:e}",
                    fit.rate.map_or("n/a".to_string(), |r| format!("{r:.4}")),
                    fit.gamma_bound
                ),
            ),
        ])
    };
    run().unwrap_or_else(|e| vec![failed(format!("trajectory {tag}"), e)])
}

/// Fixed-width table, one line per check.
pub fn render(report: &[CheckRecord]) -> String {
    let width = report.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in report {
        let _ = writeln!(
            s,
            "{}  {:<width$}  {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    s
}
