//! Simulated trials and the Monte Carlo coverage engine.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_folds, Arm, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{cross_estimate, cv_cross_estimate_auto, difference_in_means, AteEstimate, TruthSpec};
use crate::forest::{ml_cross_estimate, ForestParams};
use crate::par;
use crate::regress::{CenteredFitter, Ols, Ridge};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::stats::{mean, sample_variance, two_sided_z};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignLaw {
    Gaussian,
    Bernoulli,
}

impl DesignLaw {
    pub fn name(self) -> &'static str {
        match self {
            DesignLaw::Gaussian => "gaussian",
            DesignLaw::Bernoulli => "bernoulli",
        }
    }
}

/// Slope vectors of the two arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// `beta0_j = 1/p`, `beta1_j = 1.1/p`.
    Dense,
    /// `beta0_j = 10^(-10 j/p)`, `beta1_j = 11^(-10 j/p)`.
    Geometric,
    /// `beta0_j = 10 [j = 1 mod 20]`, `beta1_j = 9 [j = 1 mod 20] + [j = 1 mod 10]`.
    Sparse,
    /// `e_1` in both arms.
    Fig1,
    /// A seeded permutation of `(1, 1/2, ..., 1/p)` scaled to norm 2, both arms.
    Fig2,
    Custom { beta0: Vec<f64>, beta1: Vec<f64> },
}

impl SignalKind {
    pub fn name(&self) -> &'static str {
        match self {
            SignalKind::Dense => "dense",
            SignalKind::Geometric => "geometric",
            SignalKind::Sparse => "sparse",
            SignalKind::Fig1 => "fig1",
            SignalKind::Fig2 => "fig2",
            SignalKind::Custom { .. } => "custom",
        }
    }
}

/// Estimators a simulation can run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorSpec {
    Diff,
    CeOls,
    CeRidge { lambda: f64 },
    /// Cross-validated cross-estimation with the joint lasso.
    Cvce,
    Forest,
}

fn default_tau() -> f64 {
    0.0
}
fn default_k() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.05
}
fn default_n_lambda() -> usize {
    30
}
fn default_lambda_ratio() -> f64 {
    1e-3
}
fn default_estimators() -> Vec<EstimatorSpec> {
    vec![EstimatorSpec::Diff, EstimatorSpec::Cvce]
}
fn default_trees() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub rho: f64,
    pub design: DesignLaw,
    pub signal: SignalKind,
    pub sigma: f64,
    pub pi: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(rename = "K", alias = "k", default = "default_k")]
    pub k: usize,
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    #[serde(default = "default_n_lambda")]
    pub n_lambda: usize,
    #[serde(default = "default_lambda_ratio")]
    pub lambda_ratio: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_trees")]
    pub num_trees: usize,
}

impl SimConfig {
    /// A config with the usual defaults and the given core fields.
    pub fn new(n: usize, p: usize, design: DesignLaw, signal: SignalKind, sigma: f64, pi: f64) -> SimConfig {
        SimConfig {
            n,
            p,
            rho: 0.0,
            design,
            signal,
            sigma,
            pi,
            tau: default_tau(),
            k: default_k(),
            reps: 1,
            alpha: default_alpha(),
            seed: 0,
            n_lambda: default_n_lambda(),
            lambda_ratio: default_lambda_ratio(),
            estimators: default_estimators(),
            num_trees: default_trees(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        if self.k < 2 || self.n < 2 * self.k {
            return bad(format!("need K >= 2 and n >= 2K, got n = {}, K = {}", self.n, self.k));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad(format!("pi must lie in (0, 1), got {}", self.pi));
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !self.tau.is_finite() {
            return bad("sigma must be nonnegative and tau finite".into());
        }
        two_sided_z(self.alpha)?;
        if self.n_lambda < 2 || !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return bad("need n_lambda >= 2 and lambda_ratio in (0, 1)".into());
        }
        if let SignalKind::Custom { beta0, beta1 } = &self.signal {
            if beta0.len() != self.p || beta1.len() != self.p {
                return bad(format!("custom signal vectors must have length p = {}", self.p));
            }
        }
        if self.estimators.is_empty() {
            return bad("no estimators requested".into());
        }
        Ok(())
    }
}

/// `Sigma_ij = rho^|i - j|` with `0^0 = 1`.
pub fn ar_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Symmetric square root through the eigendecomposition.
fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `(beta0, beta1)` for a signal kind; `seed` drives the `fig2` permutation.
pub fn make_signal(kind: &SignalKind, p: usize, seed: u64) -> Result<(DVector<f64>, DVector<f64>)> {
    let pf = p as f64;
    let idx = |f: &dyn Fn(f64) -> f64| DVector::from_fn(p, |j, _| f((j + 1) as f64));
    Ok(match kind {
        SignalKind::Dense => (DVector::from_element(p, 1.0 / pf), DVector::from_element(p, 1.1 / pf)),
        SignalKind::Geometric => (idx(&|j| 10f64.powf(-10.0 * j / pf)), idx(&|j| 11f64.powf(-10.0 * j / pf))),
        SignalKind::Sparse => {
            let b0 = DVector::from_fn(p, |j, _| if j % 20 == 0 { 10.0 } else { 0.0 });
            let b1 = DVector::from_fn(p, |j, _| if j % 20 == 0 { 9.0 } else { 0.0 } + if j % 10 == 0 { 1.0 } else { 0.0 });
            (b0, b1)
        }
        SignalKind::Fig1 => {
            let mut b = DVector::zeros(p);
            b[0] = 1.0;
            (b.clone(), b)
        }
        SignalKind::Fig2 => {
            let mut v: Vec<f64> = (1..=p).map(|j| 1.0 / j as f64).collect();
            v.shuffle(&mut stream_rng(seed, streams::SIGNAL));
            let b = DVector::from_vec(v);
            let b = &b * (2.0 / b.norm());
            (b.clone(), b)
        }
        SignalKind::Custom { beta0, beta1 } => {
            if beta0.len() != p || beta1.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: beta0.len().min(beta1.len()) });
            }
            (DVector::from_vec(beta0.clone()), DVector::from_vec(beta1.clone()))
        }
    })
}

/// Draws trials for one config; the covariance root and signal are computed once.
#[derive(Debug, Clone)]
pub struct TrialGenerator {
    config: SimConfig,
    root: Option<DMatrix<f64>>,
    pub beta0: DVector<f64>,
    pub beta1: DVector<f64>,
}

impl TrialGenerator {
    pub fn new(config: &SimConfig) -> Result<TrialGenerator> {
        config.validate()?;
        let root = (config.rho != 0.0).then(|| symmetric_sqrt(&ar_covariance(config.p, config.rho)));
        let (beta0, beta1) = make_signal(&config.signal, config.p, config.seed)?;
        Ok(TrialGenerator { config: config.clone(), root, beta0, beta1 })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Rows `X_i = Sigma^{1/2} Z_i`.
    pub fn design(&self, seed: u64) -> DMatrix<f64> {
        let (n, p) = (self.config.n, self.config.p);
        let mut rng = stream_rng(seed, streams::DESIGN);
        let z = match self.config.design {
            DesignLaw::Gaussian => DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DesignLaw::Bernoulli => DMatrix::from_fn(n, p, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
        };
        match &self.root {
            Some(root) => z * root,
            None => z,
        }
    }

    /// One trial: `W_i ~ Bernoulli(pi)` (redrawn if an arm is empty),
    /// `Y_i = X_i . beta^(W_i) + tau W_i + sigma eps_i`.
    pub fn trial(&self, seed: u64) -> Result<(Dataset, TruthSpec)> {
        let cfg = &self.config;
        let x = self.design(seed);
        let mut rng = stream_rng(seed, streams::ASSIGNMENT);
        let mut w = Vec::new();
        for attempt in 0..=100 {
            if attempt == 100 {
                return Err(Error::InvalidInput("assignment left an arm empty in 100 draws".into()));
            }
            w = (0..cfg.n).map(|_| Arm::from_indicator(rng.random_bool(cfg.pi))).collect::<Vec<_>>();
            if w.contains(&Arm::Control) && w.contains(&Arm::Treated) {
                break;
            }
        }
        let lin0 = &x * &self.beta0;
        let lin1 = &x * &self.beta1;
        let mut noise = stream_rng(seed, streams::NOISE);
        let y = (0..cfg.n)
            .map(|i| {
                let signal = match w[i] {
                    Arm::Control => lin0[i],
                    Arm::Treated => lin1[i] + cfg.tau,
                };
                signal + cfg.sigma * noise.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let xbar = DVector::from_fn(cfg.p, |j, _| x.column(j).mean());
        let tau_bar = xbar.dot(&(&self.beta1 - &self.beta0)) + cfg.tau;
        let d = Dataset::new(x, y, w)?;
        Ok((d, TruthSpec { tau: cfg.tau, tau_bar }))
    }
}

pub fn gen_design(config: &SimConfig, seed: u64) -> Result<DMatrix<f64>> {
    Ok(TrialGenerator::new(config)?.design(seed))
}

pub fn simulate_trial(config: &SimConfig, seed: u64) -> Result<(Dataset, TruthSpec)> {
    TrialGenerator::new(config)?.trial(seed)
}

/// An estimator run once per simulated trial. `seed` is private to the
/// replication and may drive fold plans or forests.
pub trait TrialEstimator: Sync {
    fn label(&self) -> String;
    fn estimate(&self, d: &Dataset, seed: u64) -> Result<AteEstimate>;
}

pub struct DiffEstimator {
    pub alpha: f64,
}

impl TrialEstimator for DiffEstimator {
    fn label(&self) -> String {
        "diff".into()
    }
    fn estimate(&self, d: &Dataset, _seed: u64) -> Result<AteEstimate> {
        difference_in_means(d, self.alpha)
    }
}

pub struct CrossEstimator {
    pub fitter: Box<dyn CenteredFitter>,
    pub k: usize,
    pub alpha: f64,
}

impl TrialEstimator for CrossEstimator {
    fn label(&self) -> String {
        format!("ce-{}", self.fitter.label())
    }
    fn estimate(&self, d: &Dataset, seed: u64) -> Result<AteEstimate> {
        let plan = stratified_folds(d.treatments(), self.k, seed)?;
        cross_estimate(d, &plan, self.fitter.as_ref(), self.alpha)
    }
}

pub struct CvceEstimator {
    pub k: usize,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub alpha: f64,
}

impl TrialEstimator for CvceEstimator {
    fn label(&self) -> String {
        "cvce".into()
    }
    fn estimate(&self, d: &Dataset, seed: u64) -> Result<AteEstimate> {
        let plan = stratified_folds(d.treatments(), self.k, seed)?;
        Ok(cv_cross_estimate_auto(d, &plan, self.n_lambda, self.lambda_ratio, self.alpha)?.estimate)
    }
}

pub struct ForestEstimator {
    pub params: ForestParams,
    pub alpha: f64,
}

impl TrialEstimator for ForestEstimator {
    fn label(&self) -> String {
        "forest".into()
    }
    fn estimate(&self, d: &Dataset, seed: u64) -> Result<AteEstimate> {
        Ok(ml_cross_estimate(d, &self.params, self.alpha, seed)?.to_ate())
    }
}

/// Instantiate the estimators named in a config.
pub fn build_estimators(config: &SimConfig) -> Vec<Box<dyn TrialEstimator>> {
    let alpha = config.alpha;
    config
        .estimators
        .iter()
        .map(|spec| -> Box<dyn TrialEstimator> {
            match spec {
                EstimatorSpec::Diff => Box::new(DiffEstimator { alpha }),
                EstimatorSpec::CeOls => Box::new(CrossEstimator { fitter: Box::new(Ols), k: config.k, alpha }),
                EstimatorSpec::CeRidge { lambda } => {
                    Box::new(CrossEstimator { fitter: Box::new(Ridge { lambda: *lambda }), k: config.k, alpha })
                }
                EstimatorSpec::Cvce => Box::new(CvceEstimator {
                    k: config.k,
                    n_lambda: config.n_lambda,
                    lambda_ratio: config.lambda_ratio,
                    alpha,
                }),
                EstimatorSpec::Forest => Box::new(ForestEstimator {
                    params: ForestParams { num_trees: config.num_trees, ..ForestParams::default() },
                    alpha,
                }),
            }
        })
        .collect()
}

/// Aggregates for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub design: String,
    pub signal: String,
    pub sigma: f64,
    pub pi: f64,
    /// Replications that produced an estimate.
    pub reps: usize,
    pub failures: usize,
    /// Coverage of `tau` by the 95% and 99% intervals.
    pub coverage95: f64,
    pub coverage99: f64,
    /// Coverage of the realized `tau_bar`.
    pub coverage95_tau_bar: f64,
    pub coverage99_tau_bar: f64,
    pub mean_vhat: f64,
    pub var_tauhat: f64,
    /// Mean interval half-width at the configured level.
    pub mean_halfwidth: f64,
    pub mean_tauhat: f64,
    pub mean_tau_bar: f64,
    /// Mean and Monte Carlo standard error of `tau_hat - tau_bar`.
    pub mean_error: f64,
    pub se_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

pub const CSV_HEADER: [&str; 14] = [
    "method",
    "n",
    "p",
    "rho",
    "design",
    "signal",
    "sigma",
    "pi",
    "reps",
    "coverage95",
    "coverage99",
    "mean_vhat",
    "var_tauhat",
    "mean_halfwidth",
];

impl CoverageReport {
    pub fn row(&self, method: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.n.to_string(),
                r.p.to_string(),
                r.rho.to_string(),
                r.design.clone(),
                r.signal.clone(),
                r.sigma.to_string(),
                r.pi.to_string(),
                r.reps.to_string(),
                r.coverage95.to_string(),
                r.coverage99.to_string(),
                r.mean_vhat.to_string(),
                r.var_tauhat.to_string(),
                r.mean_halfwidth.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed of replication `rep`.
pub fn replication_seed(config: &SimConfig, rep: usize) -> u64 {
    derive_seed(config.seed, rep as u64)
}

/// Run the config's own estimator list.
pub fn run_config(config: &SimConfig) -> Result<CoverageReport> {
    run_coverage(config, &build_estimators(config))
}

/// Monte Carlo coverage. Replications run in parallel; every aggregate is
/// reduced in replication order, so the report does not depend on the
/// number of workers. Failed replications are dropped when they are fewer
/// than 1% of `reps` and are a hard error otherwise.
pub fn run_coverage(config: &SimConfig, estimators: &[Box<dyn TrialEstimator>]) -> Result<CoverageReport> {
    let gen = TrialGenerator::new(config)?;
    let outcomes = par::map_indexed(config.reps, |rep| -> Result<(TruthSpec, Vec<Result<AteEstimate>>)> {
        let seed = replication_seed(config, rep);
        let (d, truth) = gen.trial(seed)?;
        let est_seed = derive_seed(seed, streams::ESTIMATOR);
        let results = estimators.iter().map(|e| e.estimate(&d, est_seed)).collect();
        Ok((truth, results))
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(estimators.len());
    for (e_idx, est) in estimators.iter().enumerate() {
        let mut ok: Vec<(&TruthSpec, &AteEstimate)> = Vec::with_capacity(config.reps);
        let mut failures = 0;
        let mut first = None;
        for (truth, results) in &outcomes {
            match &results[e_idx] {
                Ok(a) => ok.push((truth, a)),
                Err(err) => {
                    failures += 1;
                    first.get_or_insert_with(|| err.to_string());
                }
            }
        }
        if failures > 0 && failures as f64 >= 0.01 * config.reps as f64 {
            return Err(Error::TooManyFailures {
                method: est.label(),
                failures,
                reps: config.reps,
                first: first.unwrap_or_default(),
            });
        }
        rows.push(aggregate(config, est.label(), &ok, failures)?);
    }
    Ok(CoverageReport { rows })
}

fn aggregate(config: &SimConfig, method: String, ok: &[(&TruthSpec, &AteEstimate)], failures: usize) -> Result<CoverageRow> {
    let m = ok.len() as f64;
    let frac = |hit: &dyn Fn(&TruthSpec, &AteEstimate) -> Result<bool>| -> Result<f64> {
        let mut count = 0usize;
        for (t, a) in ok {
            if hit(t, a)? {
                count += 1;
            }
        }
        Ok(count as f64 / m)
    };
    let inside = |a: &AteEstimate, alpha: f64, target: f64| -> Result<bool> {
        let (lo, hi) = a.interval_at(alpha)?;
        Ok(lo <= target && target <= hi)
    };
    let taus: Vec<f64> = ok.iter().map(|(_, a)| a.tau_hat).collect();
    let errors: Vec<f64> = ok.iter().map(|(t, a)| a.tau_hat - t.tau_bar).collect();
    let spread = |v: &[f64]| if v.len() >= 2 { sample_variance(v) } else { 0.0 };
    Ok(CoverageRow {
        method,
        n: config.n,
        p: config.p,
        rho: config.rho,
        design: config.design.name().into(),
        signal: config.signal.name().into(),
        sigma: config.sigma,
        pi: config.pi,
        reps: ok.len(),
        failures,
        coverage95: frac(&|t, a| inside(a, 0.05, t.tau))?,
        coverage99: frac(&|t, a| inside(a, 0.01, t.tau))?,
        coverage95_tau_bar: frac(&|t, a| inside(a, 0.05, t.tau_bar))?,
        coverage99_tau_bar: frac(&|t, a| inside(a, 0.01, t.tau_bar))?,
        mean_vhat: mean(&ok.iter().map(|(_, a)| a.variance).collect::<Vec<_>>()),
        var_tauhat: spread(&taus),
        mean_halfwidth: mean(&ok.iter().map(|(_, a)| a.half_width()).collect::<Vec<_>>()),
        mean_tauhat: mean(&taus),
        mean_tau_bar: mean(&ok.iter().map(|(t, _)| t.tau_bar).collect::<Vec<_>>()),
        mean_error: mean(&errors),
        se_error: (spread(&errors) / m).sqrt(),
    })
}

/// One coverage run per sample size, rows concatenated in grid order.
pub fn run_figure_sweep(template: &SimConfig, n_grid: &[usize]) -> Result<CoverageReport> {
    if n_grid.is_empty() {
        return Err(Error::InvalidInput("sample-size grid is empty".into()));
    }
    let mut rows = Vec::new();
    for &n in n_grid {
        let config = SimConfig { n, ..template.clone() };
        rows.extend(run_config(&config)?.rows);
    }
    Ok(CoverageReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(signal: SignalKind) -> SimConfig {
        let mut c = SimConfig::new(60, 8, DesignLaw::Gaussian, signal, 1.0, 0.5);
        c.k = 5;
        c.reps = 20;
        c.seed = 11;
        c
    }

    #[test]
    fn ar_covariance_cases() {
        assert_eq!(ar_covariance(4, 0.0), DMatrix::identity(4, 4));
        assert_eq!(ar_covariance(2, 0.9), DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]));
        let min = ar_covariance(50, 0.8).symmetric_eigenvalues().min();
        assert!(min > 0.0);
    }

    #[test]
    fn square_root_squares_back() {
        let s = ar_covariance(6, 0.7);
        let r = symmetric_sqrt(&s);
        assert!((&r * &r - &s).amax() < 1e-12);
        assert!((&r - r.transpose()).amax() < 1e-12);
    }

    #[test]
    fn bernoulli_identity_design_is_signs() {
        let mut c = small(SignalKind::Dense);
        c.design = DesignLaw::Bernoulli;
        let x = gen_design(&c, 3).unwrap();
        assert!(x.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(x, gen_design(&c, 3).unwrap());
        assert_ne!(x, gen_design(&c, 4).unwrap());
    }

    #[test]
    fn design_covariance_converges() {
        let mut c = SimConfig::new(100_000, 3, DesignLaw::Gaussian, SignalKind::Dense, 1.0, 0.5);
        c.rho = 0.5;
        let x = gen_design(&c, 5).unwrap();
        let cov = x.transpose() * &x / 100_000.0;
        assert!((cov - ar_covariance(3, 0.5)).amax() < 0.02);
    }

    #[test]
    fn signal_definitions() {
        let (b0, b1) = make_signal(&SignalKind::Dense, 4, 0).unwrap();
        assert_eq!(b0.as_slice(), &[0.25; 4]);
        for j in 0..4 {
            assert_abs_diff_eq!(b1[j], 1.1 * 0.25, epsilon = 1e-15);
        }
        let (s0, s1) = make_signal(&SignalKind::Sparse, 40, 0).unwrap();
        let nz: Vec<usize> = (0..40).filter(|&j| s0[j] != 0.0).collect();
        assert_eq!(nz, vec![0, 20]);
        assert!(nz.iter().all(|&j| s0[j] == 10.0));
        assert_eq!((s1[0], s1[10], s1[20], s1[30], s1[5]), (10.0, 1.0, 10.0, 1.0, 0.0));
        let (g0, g1) = make_signal(&SignalKind::Geometric, 10, 0).unwrap();
        assert_abs_diff_eq!(g0[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(g1[9], 11f64.powi(-10), epsilon = 1e-20);
        let (e0, e1) = make_signal(&SignalKind::Fig1, 5, 0).unwrap();
        assert_eq!(e0, e1);
        assert_eq!(e0.sum(), 1.0);
        for p in [3, 50, 500] {
            let (f0, f1) = make_signal(&SignalKind::Fig2, p, 9).unwrap();
            assert_abs_diff_eq!(f0.norm(), 2.0, epsilon = 1e-12);
            assert_eq!(f0, f1);
        }
        let (a, _) = make_signal(&SignalKind::Fig2, 50, 1).unwrap();
        let (b, _) = make_signal(&SignalKind::Fig2, 50, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn noiseless_null_signal() {
        let mut c = small(SignalKind::Custom { beta0: vec![0.0; 8], beta1: vec![0.0; 8] });
        c.sigma = 0.0;
        c.tau = 1.5;
        let (d, truth) = simulate_trial(&c, 2).unwrap();
        for i in 0..d.n() {
            let expected = if d.treatments()[i] == Arm::Treated { 1.5 } else { 0.0 };
            assert_eq!(d.outcomes()[i], expected);
        }
        assert_eq!(truth.tau, truth.tau_bar);
    }

    #[test]
    fn homogeneous_truth_coincides() {
        let mut c = small(SignalKind::Fig1);
        c.tau = 0.7;
        let (_, truth) = simulate_trial(&c, 8).unwrap();
        assert_eq!(truth.tau, truth.tau_bar);
        let (_, het) = simulate_trial(&small(SignalKind::Dense), 8).unwrap();
        assert_ne!(het.tau, het.tau_bar);
    }

    #[test]
    fn outcome_moments() {
        // Y = X beta + tau W + eps with beta = (1, .5, 0, ...), Sigma = I:
        // E[Y] = tau pi, Var[Y] = |beta|^2 + sigma^2 + tau^2 pi (1 - pi).
        let mut beta = vec![0.0; 8];
        beta[0] = 1.0;
        beta[1] = 0.5;
        let mut c = SimConfig::new(
            100_000,
            8,
            DesignLaw::Gaussian,
            SignalKind::Custom { beta0: beta.clone(), beta1: beta },
            1.0,
            0.3,
        );
        c.tau = 2.0;
        let (d, _) = simulate_trial(&c, 4).unwrap();
        let y = d.outcomes();
        let var: f64 = 1.25 + 1.0 + 4.0 * 0.3 * 0.7;
        let m = mean(y);
        assert!((m - 0.6).abs() < 3.0 * (var / 1e5).sqrt(), "mean {m}");
        // Var of the sample variance is about 2 var^2 / n for near-Gaussian Y.
        let v = sample_variance(y);
        assert!((v - var).abs() < 4.0 * var * (2.0f64 / 1e5).sqrt(), "var {v}");
    }

    struct Infinite;
    impl TrialEstimator for Infinite {
        fn label(&self) -> String {
            "oracle".into()
        }
        fn estimate(&self, _d: &Dataset, _seed: u64) -> Result<AteEstimate> {
            Ok(AteEstimate {
                method: "oracle".into(),
                tau_hat: 0.0,
                variance: f64::INFINITY,
                ci_low: f64::NEG_INFINITY,
                ci_high: f64::INFINITY,
                alpha: 0.05,
                per_fold: vec![],
                lambda: None,
            })
        }
    }

    #[test]
    fn infinite_interval_always_covers() {
        let c = small(SignalKind::Fig1);
        let gen = TrialGenerator::new(&c).unwrap();
        let (d, truth) = gen.trial(1).unwrap();
        let a = Infinite.estimate(&d, 0).unwrap();
        assert!(a.covers(truth.tau));
        let r = run_coverage(&c, &[Box::new(Infinite)]).unwrap();
        assert_eq!(r.rows[0].coverage95, 1.0);
        assert_eq!(r.rows[0].coverage99_tau_bar, 1.0);
    }

    struct Flaky;
    impl TrialEstimator for Flaky {
        fn label(&self) -> String {
            "flaky".into()
        }
        fn estimate(&self, d: &Dataset, _seed: u64) -> Result<AteEstimate> {
            if d.outcomes()[0] > 0.0 {
                Err(Error::InvalidInput("boom".into()))
            } else {
                difference_in_means(d, 0.05)
            }
        }
    }

    #[test]
    fn frequent_failures_are_fatal() {
        let c = small(SignalKind::Fig1);
        let err = run_coverage(&c, &[Box::new(Flaky)]).unwrap_err();
        assert!(matches!(err, Error::TooManyFailures { .. }), "{err}");
    }

    #[test]
    fn coverage_report_shape_and_determinism() {
        let mut c = small(SignalKind::Fig1);
        c.estimators = vec![EstimatorSpec::Diff, EstimatorSpec::CeOls, EstimatorSpec::Cvce];
        let a = run_config(&c).unwrap();
        let b = run_config(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3);
        for r in &a.rows {
            assert!(r.coverage99 >= r.coverage95);
            assert!((0.0..=1.0).contains(&r.coverage95));
            assert!(r.var_tauhat >= 0.0);
            assert_eq!(r.reps, 20);
        }
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "method,n,p,rho,design,signal,sigma,pi,reps,coverage95,coverage99,mean_vhat,var_tauhat,mean_halfwidth"
        );
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn single_replication_row() {
        let mut c = small(SignalKind::Fig1);
        c.reps = 1;
        let r = run_config(&c).unwrap();
        for row in &r.rows {
            assert!(row.coverage95 == 0.0 || row.coverage95 == 1.0);
            assert_eq!(row.var_tauhat, 0.0);
        }
    }

    #[test]
    fn sweep_rows_follow_grid() {
        let mut c = small(SignalKind::Fig1);
        c.reps = 3;
        let r = run_figure_sweep(&c, &[40, 60]).unwrap();
        let ns: Vec<usize> = r.rows.iter().map(|r| r.n).collect();
        assert_eq!(ns, vec![40, 40, 60, 60]);
    }

    #[test]
    fn config_validation() {
        let mut c = small(SignalKind::Dense);
        c.n = 9;
        assert!(c.validate().is_err());
        let mut c = small(SignalKind::Dense);
        c.pi = 1.0;
        assert!(c.validate().is_err());
        let c = small(SignalKind::Custom { beta0: vec![0.0; 3], beta1: vec![0.0; 3] });
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let text = r#"{"n": 80, "p": 60, "design": "bernoulli", "signal": "geometric", "sigma": 1.0,
                       "pi": 0.5, "rho": 0.9, "K": 10, "reps": 5, "seed": 3,
                       "estimators": ["diff", "cvce", {"ce-ridge": {"lambda": 0.1}}]}"#;
        let c: SimConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.k, 10);
        assert_eq!(c.estimators[2], EstimatorSpec::CeRidge { lambda: 0.1 });
        let back: SimConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let custom = r#"{"n": 20, "p": 2, "design": "gaussian", "signal": {"custom": {"beta0": [1, 0], "beta1": [0, 1]}},
                         "sigma": 1, "pi": 0.5, "reps": 1, "seed": 0}"#;
        let c: SimConfig = serde_json::from_str(custom).unwrap();
        assert_eq!(c.signal.name(), "custom");
        assert!(serde_json::from_str::<SimConfig>(r#"{"n": 20, "bogus": 1}"#).is_err());
    }
}
