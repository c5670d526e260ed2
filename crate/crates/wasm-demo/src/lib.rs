//! Browser bindings: the ridge variance curve, one simulated experiment,
//! and a small coverage run. Every export returns a JSON string, errors
//! included, so the page never has to catch exceptions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use crossest::error::Result;
use crossest::estimate::{cv_cross_estimate_auto, difference_in_means, AteEstimate};
use crossest::data::stratified_folds;
use crossest::sim::{run_config, DesignLaw, EstimatorSpec, SignalKind, SimConfig, TrialGenerator};
use crossest::theory::{ridge_theory, SpectrumSpec};

fn respond(result: Result<Value>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn signal_kind(name: &str) -> Result<SignalKind> {
    Ok(match name {
        "dense" => SignalKind::Dense,
        "geometric" => SignalKind::Geometric,
        "sparse" => SignalKind::Sparse,
        "fig1" => SignalKind::Fig1,
        "fig2" => SignalKind::Fig2,
        other => return Err(crossest::error::Error::InvalidInput(format!("unknown signal {other:?}"))),
    })
}

fn config(n: usize, p: usize, rho: f64, signal: &str, sigma: f64, pi: f64, seed: u64) -> Result<SimConfig> {
    let mut c = SimConfig::new(n, p, DesignLaw::Gaussian, signal_kind(signal)?, sigma, pi);
    c.rho = rho;
    c.tau = 1.0;
    c.seed = seed;
    c.k = 5;
    c.validate()?;
    Ok(c)
}

/// Optimal-ridge variance `S` and the unadjusted limit over `points`
/// aspect ratios log-spaced in `[gamma_lo, gamma_hi]`.
pub fn ridge_curve_value(alpha2: f64, sigma: f64, pi: f64, gamma_lo: f64, gamma_hi: f64, points: usize) -> Result<Value> {
    if !(gamma_lo > 0.0 && gamma_hi > gamma_lo) || points < 2 {
        return Err(crossest::error::Error::InvalidInput("need 0 < gamma_lo < gamma_hi and points >= 2".into()));
    }
    let step = (gamma_hi / gamma_lo).ln() / (points - 1) as f64;
    let mut rows = Vec::with_capacity(points);
    for i in 0..points {
        let gamma = gamma_lo * (step * i as f64).exp();
        let t = ridge_theory(&SpectrumSpec::identity(gamma, pi, alpha2, sigma)?)?;
        rows.push(json!({ "gamma": gamma, "S": t.s, "unadjusted": t.unadjusted_limit }));
    }
    Ok(Value::Array(rows))
}

fn interval(e: &AteEstimate) -> Value {
    json!({ "tau_hat": e.tau_hat, "ci_low": e.ci_low, "ci_high": e.ci_high, "variance": e.variance, "lambda": e.lambda })
}

/// One simulated experiment analysed by difference in means and by the
/// cross-validated joint lasso.
pub fn experiment_value(n: usize, p: usize, rho: f64, signal: &str, sigma: f64, pi: f64, seed: u64) -> Result<Value> {
    let c = config(n, p, rho, signal, sigma, pi, seed)?;
    let (d, truth) = TrialGenerator::new(&c)?.trial(seed)?;
    let diff = difference_in_means(&d, c.alpha)?;
    let plan = stratified_folds(d.treatments(), c.k, seed)?;
    let cv = cv_cross_estimate_auto(&d, &plan, c.n_lambda, c.lambda_ratio, c.alpha)?;
    Ok(json!({ "tau_bar": truth.tau_bar, "diff": interval(&diff), "cvce": interval(&cv.estimate) }))
}

/// Coverage of both estimators over `reps` simulated experiments.
pub fn coverage_value(n: usize, p: usize, rho: f64, signal: &str, sigma: f64, pi: f64, reps: usize, seed: u64) -> Result<Value> {
    let mut c = config(n, p, rho, signal, sigma, pi, seed)?;
    c.reps = reps;
    c.estimators = vec![EstimatorSpec::Diff, EstimatorSpec::Cvce];
    let report = run_config(&c)?;
    let rows = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "method": r.method, "reps": r.reps, "coverage95": r.coverage95,
                "mean_vhat": r.mean_vhat, "var_tauhat": r.var_tauhat, "mean_halfwidth": r.mean_halfwidth,
            })
        })
        .collect();
    Ok(Value::Array(rows))
}

#[wasm_bindgen]
pub fn ridge_curve(alpha2: f64, sigma: f64, pi: f64, gamma_lo: f64, gamma_hi: f64, points: usize) -> String {
    respond(ridge_curve_value(alpha2, sigma, pi, gamma_lo, gamma_hi, points))
}

#[wasm_bindgen]
pub fn experiment(n: usize, p: usize, rho: f64, signal: &str, sigma: f64, pi: f64, seed: u64) -> String {
    respond(experiment_value(n, p, rho, signal, sigma, pi, seed))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn coverage(n: usize, p: usize, rho: f64, signal: &str, sigma: f64, pi: f64, reps: usize, seed: u64) -> String {
    respond(coverage_value(n, p, rho, signal, sigma, pi, reps, seed))
}
