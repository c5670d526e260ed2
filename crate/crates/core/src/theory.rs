//! Closed-form variance limits and the ridge asymptotics built on the
//! companion Stieltjes transform.

use nalgebra::{DMatrix, DVector};

use crate::data::Arm;
use crate::error::{Error, Result};

/// `X ~ N(mean, covariance)` with outcome noise `noise_sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDesignSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub noise_sd: f64,
}

impl GaussianDesignSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, noise_sd: f64) -> Result<GaussianDesignSpec> {
        let p = mean.len();
        if covariance.shape() != (p, p) {
            return Err(Error::DimensionMismatch { expected: p, got: covariance.nrows() });
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 * (1.0 + covariance.amax()) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        if p > 0 {
            let trace = covariance.trace();
            let min = covariance.clone().symmetric_eigenvalues().min();
            if min < -1e-10 * trace.abs() / p as f64 {
                return Err(Error::InvalidInput(format!("covariance is not PSD (min eigenvalue {min:.3e})")));
            }
        }
        if !(noise_sd >= 0.0) {
            return Err(Error::InvalidInput(format!("noise_sd must be nonnegative, got {noise_sd}")));
        }
        Ok(GaussianDesignSpec { mean, covariance, noise_sd })
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }
}

/// Limiting setup for ridge asymptotics: aspect ratio `gamma = p / n`, a
/// population spectrum given as point masses, treated share `pi`, prior
/// variance `alpha^2 / p` per coefficient, and noise level `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSpec {
    pub aspect: f64,
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
    pub arm_share: f64,
    pub prior_scale: f64,
    pub noise_sd: f64,
}

impl SpectrumSpec {
    pub fn new(
        aspect: f64,
        atoms: Vec<f64>,
        weights: Vec<f64>,
        arm_share: f64,
        prior_scale: f64,
        noise_sd: f64,
    ) -> Result<SpectrumSpec> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(aspect > 0.0 && aspect.is_finite()) {
            return bad(format!("aspect ratio must be positive, got {aspect}"));
        }
        if !(arm_share > 0.0 && arm_share < 1.0) {
            return bad(format!("treated share pi must lie in (0, 1), got {arm_share}"));
        }
        if !(prior_scale > 0.0 && prior_scale.is_finite()) {
            return bad(format!("alpha^2 must be positive, got {prior_scale}"));
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {noise_sd}"));
        }
        if atoms.is_empty() || atoms.len() != weights.len() {
            return bad("spectrum needs matching, non-empty eigenvalue and weight lists".into());
        }
        if atoms.iter().any(|&t| !(t >= 0.0 && t.is_finite())) || weights.iter().any(|&w| !(w >= 0.0)) {
            return bad("eigenvalues and weights must be nonnegative".into());
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("spectrum weights must sum to 1, got {total}"));
        }
        Ok(SpectrumSpec { aspect, atoms, weights, arm_share, prior_scale, noise_sd })
    }

    /// `Sigma = I`.
    pub fn identity(aspect: f64, arm_share: f64, prior_scale: f64, noise_sd: f64) -> Result<SpectrumSpec> {
        SpectrumSpec::new(aspect, vec![1.0], vec![1.0], arm_share, prior_scale, noise_sd)
    }

    /// `p / n_w`: `gamma / (1 - pi)` for control, `gamma / pi` for treated.
    pub fn arm_aspect(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.aspect / (1.0 - self.arm_share),
            Arm::Treated => self.aspect / self.arm_share,
        }
    }

    /// `tr(Sigma) / p`.
    pub fn mean_eigenvalue(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(t, w)| t * w).sum()
    }
}

/// `v^T Sigma v`.
pub fn sigma_norm(v: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.shape() != (v.len(), v.len()) {
        return Err(Error::DimensionMismatch { expected: v.len(), got: sigma.nrows() });
    }
    Ok(v.dot(&(sigma * v)))
}

/// `(1/n0 + 1/n1) (sigma^2 + excess)`.
pub fn conditional_variance_a(n0: usize, n1: usize, sigma: f64, excess: f64) -> f64 {
    (1.0 / n0 as f64 + 1.0 / n1 as f64) * (sigma * sigma + excess)
}

fn check_share(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("pi must lie in (0, 1), got {pi}")))
    }
}

/// `sigma^2 / (pi (1 - pi))`.
pub fn efficient_variance(sigma: f64, pi: f64) -> Result<f64> {
    check_share(pi)?;
    Ok(sigma * sigma / (pi * (1.0 - pi)))
}

/// `sigma0^2 / (1 - pi) + sigma1^2 / pi + gap`, where `gap` is `||beta1 - beta0||_Sigma^2`.
pub fn hetero_variance(sigma0_bar: f64, sigma1_bar: f64, pi: f64, beta_gap_norm: f64) -> Result<f64> {
    check_share(pi)?;
    Ok(sigma0_bar * sigma0_bar / (1.0 - pi) + sigma1_bar * sigma1_bar / pi + beta_gap_norm)
}

const MAX_ITER: usize = 10_000;
const DAMPING: f64 = 0.5;
const TOL: f64 = 1e-10;

/// Companion Stieltjes transform `v(-lambda)` for aspect ratio `aspect` and
/// population spectrum `sum_k w_k delta_{t_k}`, from the fixed point
///
/// ```text
/// v = 1 / (lambda + aspect * sum_k w_k t_k / (1 + t_k v))
/// ```
///
/// iterated as `v <- (1 - eta) v + eta T(v)` from `v = 1 / lambda`.
pub fn companion_stieltjes_atoms(atoms: &[f64], weights: &[f64], aspect: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let map = |v: f64| {
        let s: f64 = atoms.iter().zip(weights).map(|(&t, &w)| w * t / (1.0 + t * v)).sum();
        1.0 / (lambda + aspect * s)
    };
    let mut v = 1.0 / lambda;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let t = map(v);
        residual = (t - v).abs() / v;
        if residual < TOL {
            return Ok(t);
        }
        v = (1.0 - DAMPING) * v + DAMPING * t;
    }
    Err(Error::FixedPoint { iterations: MAX_ITER, residual })
}

/// `v_w(-lambda)` for the arm's own aspect ratio.
pub fn companion_stieltjes(spec: &SpectrumSpec, arm: Arm, lambda: f64) -> Result<f64> {
    companion_stieltjes_atoms(&spec.atoms, &spec.weights, spec.arm_aspect(arm), lambda)
}

/// Positive root of `lambda v^2 + (lambda + aspect - 1) v - 1 = 0`, the
/// companion transform for `Sigma = I`.
pub fn marchenko_pastur_companion(aspect: f64, lambda: f64) -> f64 {
    let b = lambda + aspect - 1.0;
    (-b + (b * b + 4.0 * lambda).sqrt()) / (2.0 * lambda)
}

/// Prediction-optimal ridge penalty `gamma_w sigma^2 / alpha^2`, in the
/// scaling `(X^T X / n_w + lambda I) beta = X^T y / n_w`. The per-arm
/// objective used by [`crate::regress::fit_ridge`] takes half of this value.
pub fn ridge_optimal_lambda(spec: &SpectrumSpec, arm: Arm) -> f64 {
    spec.arm_aspect(arm) * spec.noise_sd * spec.noise_sd / spec.prior_scale
}

/// Limit of `||beta_hat_w - beta_w||_Sigma^2` for optimally tuned ridge:
/// `sigma^2 (1 / (lambda* v(-lambda*)) - 1)`.
pub fn ridge_risk_limit(spec: &SpectrumSpec, arm: Arm) -> Result<f64> {
    let s2 = spec.noise_sd * spec.noise_sd;
    if s2 == 0.0 {
        return Ok(0.0);
    }
    let lambda = ridge_optimal_lambda(spec, arm);
    let v = companion_stieltjes(spec, arm, lambda)?;
    Ok((s2 * (1.0 / (lambda * v) - 1.0)).max(0.0))
}

/// Limiting `n Var(tau_hat - tau_bar)` with optimally tuned ridge adjustments:
///
/// ```text
/// S = 2 sigma^2 + (alpha^2 / gamma) (pi / v_0(-lambda*_0) + (1 - pi) / v_1(-lambda*_1))
/// ```
pub fn ridge_asymptotic_s(spec: &SpectrumSpec) -> Result<f64> {
    let pi = spec.arm_share;
    let v0 = companion_stieltjes(spec, Arm::Control, ridge_optimal_lambda(spec, Arm::Control))?;
    let v1 = companion_stieltjes(spec, Arm::Treated, ridge_optimal_lambda(spec, Arm::Treated))?;
    let s2 = spec.noise_sd * spec.noise_sd;
    Ok(2.0 * s2 + spec.prior_scale / spec.aspect * (pi / v0 + (1.0 - pi) / v1))
}

/// Limiting `n Var(tau_hat - tau_bar)` of the difference in means when the
/// two slope vectors are drawn independently:
/// `(sigma^2 + (pi^2 + (1 - pi)^2) alpha^2 tr(Sigma)/p) / (pi (1 - pi))`.
pub fn unadjusted_limit(spec: &SpectrumSpec) -> f64 {
    let pi = spec.arm_share;
    let coef = pi * pi + (1.0 - pi) * (1.0 - pi);
    (spec.noise_sd.powi(2) + coef * spec.prior_scale * spec.mean_eigenvalue()) / (pi * (1.0 - pi))
}

/// Same limit with coefficient `pi^2 + (1 - pi^2) = 1` on the signal term,
/// which is the variance when both arms share one slope vector.
pub fn unadjusted_limit_unit_coefficient(spec: &SpectrumSpec) -> f64 {
    let pi = spec.arm_share;
    (spec.noise_sd.powi(2) + spec.prior_scale * spec.mean_eigenvalue()) / (pi * (1.0 - pi))
}

/// Everything the `ridge-theory` command reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeTheory {
    pub v0: f64,
    pub v1: f64,
    pub lambda_star_0: f64,
    pub lambda_star_1: f64,
    pub s: f64,
    pub unadjusted_limit: f64,
    pub unadjusted_limit_unit_coefficient: f64,
}

pub fn ridge_theory(spec: &SpectrumSpec) -> Result<RidgeTheory> {
    let lambda_star_0 = ridge_optimal_lambda(spec, Arm::Control);
    let lambda_star_1 = ridge_optimal_lambda(spec, Arm::Treated);
    Ok(RidgeTheory {
        v0: companion_stieltjes(spec, Arm::Control, lambda_star_0)?,
        v1: companion_stieltjes(spec, Arm::Treated, lambda_star_1)?,
        lambda_star_0,
        lambda_star_1,
        s: ridge_asymptotic_s(spec)?,
        unadjusted_limit: unadjusted_limit(spec),
        unadjusted_limit_unit_coefficient: unadjusted_limit_unit_coefficient(spec),
    })
}
