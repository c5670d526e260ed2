//! Centered per-arm regression adjustments.
//!
//! Every fitter sees only arm-centered data and sets intercepts so that the
//! arm-mean prediction equals the arm-mean outcome:
//! `Ybar_w = Xbar_w . beta_w + c_w`.
//!
//! Penalties follow the per-arm objectives
//!
//! ```text
//! ridge:  sum_{W_i = w} 1/2 (Y~_i - X~_i . b)^2 + n_w * lambda * ||b||_2^2
//! lasso:  sum_{W_i = w} 1/2 (Y~_i - X~_i . b)^2 + n_w * lambda * ||b||_1
//! ```
//!
//! so the ridge normal equations carry `2 * n_w * lambda` on the diagonal.
//! Other tools often put `n_w * lambda` (no factor 2) there.

mod lasso;
pub(crate) mod suff;

use nalgebra::{DMatrix, DVector};

pub use lasso::{soft_threshold, SolverOptions};
pub(crate) use lasso::{lambda_max as stats_lambda_max, solve as solve_lasso_stats, solve_path as solve_lasso_path_stats};
use suff::SuffStats;

use crate::data::{center_by_arm, Arm, ArmMoments, CenteredDataset, Dataset, FoldPlan};
use crate::error::{Error, Result};

/// Per-arm linear adjustments `mu_w(x) = x . beta_w + c_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub beta0: DVector<f64>,
    pub beta1: DVector<f64>,
    pub c0: f64,
    pub c1: f64,
    /// Penalty used (0 for OLS and for the zero adjustment).
    pub lambda: f64,
}

impl RegressionFit {
    /// Attach intercepts chosen by the centering rule.
    pub fn from_coefficients(beta0: DVector<f64>, beta1: DVector<f64>, moments: &ArmMoments, lambda: f64) -> RegressionFit {
        let c0 = moments.ybar0 - moments.xbar0.dot(&beta0);
        let c1 = moments.ybar1 - moments.xbar1.dot(&beta1);
        RegressionFit { beta0, beta1, c0, c1, lambda }
    }

    pub fn zero(moments: &ArmMoments) -> RegressionFit {
        let p = moments.xbar.len();
        RegressionFit::from_coefficients(DVector::zeros(p), DVector::zeros(p), moments, 0.0)
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    pub fn beta(&self, arm: Arm) -> &DVector<f64> {
        match arm {
            Arm::Control => &self.beta0,
            Arm::Treated => &self.beta1,
        }
    }

    pub fn intercept(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.c0,
            Arm::Treated => self.c1,
        }
    }

    /// `(n1 * beta0 + n0 * beta1) / n`: the combination whose excess risk
    /// drives the variance of the adjusted estimator.
    pub fn pooled_beta(&self, n0: usize, n1: usize) -> DVector<f64> {
        let n = (n0 + n1) as f64;
        (&self.beta0 * n1 as f64 + &self.beta1 * n0 as f64) / n
    }
}

/// `x . beta_arm + c_arm`.
pub fn predict(fit: &RegressionFit, x: &[f64], arm: Arm) -> Result<f64> {
    let beta = fit.beta(arm);
    if x.len() != beta.len() {
        return Err(Error::DimensionMismatch { expected: beta.len(), got: x.len() });
    }
    Ok(x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() + fit.intercept(arm))
}

/// A regression procedure that depends on the data only through its
/// arm-centered version.
pub trait CenteredFitter: Sync {
    fn label(&self) -> String;
    /// Penalty level, for penalized fitters.
    fn penalty(&self) -> Option<f64> {
        None
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit>;
}

impl<T: CenteredFitter + ?Sized> CenteredFitter for Box<T> {
    fn label(&self) -> String {
        (**self).label()
    }
    fn penalty(&self) -> Option<f64> {
        (**self).penalty()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        (**self).fit(data, moments)
    }
}

fn arm_stats(data: &CenteredDataset, arm: Arm) -> SuffStats {
    let (x, y) = data.arm_block(arm);
    SuffStats::from_rows(&x, &y)
}

fn check_dims(data: &CenteredDataset, moments: &ArmMoments) -> Result<()> {
    if moments.xbar.len() != data.p() {
        return Err(Error::DimensionMismatch { expected: data.p(), got: moments.xbar.len() });
    }
    for arm in Arm::BOTH {
        if !data.treatments.contains(&arm) {
            return Err(Error::EmptyArm(arm));
        }
    }
    Ok(())
}

fn check_penalty(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("penalty must be positive and finite, got {lambda}")))
    }
}

fn ols_arm(stats: &SuffStats, arm: Arm) -> Result<DVector<f64>> {
    let p = stats.p();
    if stats.n <= p {
        return Err(Error::OlsIllPosed { arm, n: stats.n, p, reason: "n_w <= p" });
    }
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let max_diag = (0..p).map(|j| stats.gram[(j, j)]).fold(0.0, f64::max);
    let chol = nalgebra::Cholesky::new(stats.gram.clone())
        .ok_or(Error::OlsIllPosed { arm, n: stats.n, p, reason: "design is rank deficient" })?;
    let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * max_diag) {
        return Err(Error::OlsIllPosed { arm, n: stats.n, p, reason: "design is rank deficient" });
    }
    Ok(chol.solve(&stats.xty))
}

/// Per-arm ordinary least squares on centered data.
pub fn fit_ols(data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
    check_dims(data, moments)?;
    let b0 = ols_arm(&arm_stats(data, Arm::Control), Arm::Control)?;
    let b1 = ols_arm(&arm_stats(data, Arm::Treated), Arm::Treated)?;
    Ok(RegressionFit::from_coefficients(b0, b1, moments, 0.0))
}

/// Solve `(X^T X + ridge I) b = X^T y`, through the `n x n` dual system when `p > n`.
pub(crate) fn ridge_solve(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> DVector<f64> {
    let (n, p) = x.shape();
    let yv = DVector::from_column_slice(y);
    let xt = x.transpose();
    if p <= n {
        let mut a = &xt * x;
        for j in 0..p {
            a[(j, j)] += ridge;
        }
        let rhs = &xt * &yv;
        nalgebra::Cholesky::new(a).expect("ridge system is positive definite").solve(&rhs)
    } else {
        let mut k = x * &xt;
        for i in 0..n {
            k[(i, i)] += ridge;
        }
        let alpha = nalgebra::Cholesky::new(k).expect("ridge system is positive definite").solve(&yv);
        &xt * alpha
    }
}

/// Per-arm ridge regression, closed form.
pub fn fit_ridge(data: &CenteredDataset, moments: &ArmMoments, lambda: f64) -> Result<RegressionFit> {
    check_dims(data, moments)?;
    check_penalty(lambda)?;
    let mut betas = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let (x, y) = data.arm_block(arm);
        betas.push(ridge_solve(&x, &y, 2.0 * y.len() as f64 * lambda));
    }
    let b1 = betas.pop().unwrap();
    let b0 = betas.pop().unwrap();
    Ok(RegressionFit::from_coefficients(b0, b1, moments, lambda))
}

/// Per-arm lasso by coordinate descent.
pub fn fit_lasso(data: &CenteredDataset, moments: &ArmMoments, lambda: f64) -> Result<RegressionFit> {
    fit_lasso_with(data, moments, lambda, &SolverOptions::default())
}

pub fn fit_lasso_with(
    data: &CenteredDataset,
    moments: &ArmMoments,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<RegressionFit> {
    check_dims(data, moments)?;
    check_penalty(lambda)?;
    let b0 = solve_lasso_stats(&arm_stats(data, Arm::Control), lambda, None, opts)?.beta;
    let b1 = solve_lasso_stats(&arm_stats(data, Arm::Treated), lambda, None, opts)?.beta;
    Ok(RegressionFit::from_coefficients(b0, b1, moments, lambda))
}

/// Per-arm lasso fits along a decreasing grid, warm-started.
pub fn lasso_path(data: &CenteredDataset, moments: &ArmMoments, grid: &[f64]) -> Result<Vec<RegressionFit>> {
    check_dims(data, moments)?;
    for &l in grid {
        check_penalty(l)?;
    }
    let opts = SolverOptions::default();
    let p0 = solve_lasso_path_stats(&arm_stats(data, Arm::Control), grid, &opts)?;
    let p1 = solve_lasso_path_stats(&arm_stats(data, Arm::Treated), grid, &opts)?;
    Ok(p0
        .into_iter()
        .zip(p1)
        .zip(grid)
        .map(|((s0, s1), &l)| RegressionFit::from_coefficients(s0.beta, s1.beta, moments, l))
        .collect())
}

/// Joint treatment/control lasso with shared main effects `beta` and
/// interactions `gamma`; the arm coefficients are `beta -/+ gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLassoFit {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub lambda: f64,
    pub fit: RegressionFit,
}

impl JointLassoFit {
    pub(crate) fn from_stacked(theta: &DVector<f64>, moments: &ArmMoments, lambda: f64) -> JointLassoFit {
        let p = theta.len() / 2;
        let beta = theta.rows(0, p).into_owned();
        let gamma = theta.rows(p, p).into_owned();
        let fit = RegressionFit::from_coefficients(&beta - &gamma, &beta + &gamma, moments, lambda);
        JointLassoFit { beta, gamma, lambda, fit }
    }
}

/// Minimizes
///
/// ```text
/// 1/2 sum_i (Y~_i - X~_i . beta - (2 W_i - 1) X~_i . gamma)^2 + n * lambda * (||beta||_1 + ||gamma||_1)
/// ```
///
/// over the `2p`-column design `[X~ | (2W - 1) X~]`. Up to the rescaling
/// `lambda' = 2 n lambda` this is the plain squared-error form with penalty
/// `lambda' (||beta||_1 + ||gamma||_1)`, and the argmin path is the same.
pub fn fit_joint_lasso(data: &CenteredDataset, moments: &ArmMoments, lambda: f64) -> Result<JointLassoFit> {
    check_dims(data, moments)?;
    check_penalty(lambda)?;
    let stats = SuffStats::joint(&arm_stats(data, Arm::Control), &arm_stats(data, Arm::Treated));
    let sol = solve_lasso_stats(&stats, lambda, None, &SolverOptions::default())?;
    Ok(JointLassoFit::from_stacked(&sol.beta, moments, lambda))
}

/// `n_lambda` log-spaced values from `max` down to `ratio * max`.
pub fn log_spaced_grid(max: f64, n_lambda: usize, ratio: f64) -> Result<Vec<f64>> {
    if n_lambda < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 grid points, got {n_lambda}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("grid ratio must lie in (0, 1), got {ratio}")));
    }
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::InvalidInput(
            "lambda_max is zero: outcomes are orthogonal to every centered feature".into(),
        ));
    }
    let last = (n_lambda - 1) as f64;
    Ok((0..n_lambda)
        .map(|i| if i == 0 { max } else { max * ratio.powf(i as f64 / last) })
        .collect())
}

/// Smallest per-arm lasso penalty that zeroes both arms.
pub fn lasso_lambda_max(data: &CenteredDataset) -> f64 {
    Arm::BOTH
        .iter()
        .map(|&arm| stats_lambda_max(&arm_stats(data, arm)))
        .fold(0.0, f64::max)
}

/// Smallest joint-lasso penalty that zeroes both `beta` and `gamma`.
pub fn joint_lambda_max(data: &CenteredDataset) -> f64 {
    let stats = SuffStats::joint(&arm_stats(data, Arm::Control), &arm_stats(data, Arm::Treated));
    stats_lambda_max(&stats)
}

/// Per-arm lasso penalty grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_path(data: &CenteredDataset, n_lambda: usize, ratio: f64) -> Result<Vec<f64>> {
    log_spaced_grid(lasso_lambda_max(data), n_lambda, ratio)
}

/// Joint-lasso penalty grid.
pub fn joint_lambda_path(data: &CenteredDataset, n_lambda: usize, ratio: f64) -> Result<Vec<f64>> {
    log_spaced_grid(joint_lambda_max(data), n_lambda, ratio)
}

/// K-fold cross-validation of the per-arm lasso. Each training split is
/// re-centered by its own arm means. Returns the selected penalty
/// (ties go to the larger penalty) and the held-out squared error per grid point.
pub fn cv_lasso(data: &Dataset, plan: &FoldPlan, grid: &[f64]) -> Result<(f64, Vec<f64>)> {
    plan.validate(data.treatments())?;
    let mut errors = vec![0.0; grid.len()];
    for fold in 0..plan.k() {
        let train = data.subset(&plan.train_rows(fold));
        let test_rows = plan.fold_rows(fold);
        let (centered, moments) = center_by_arm(&train).map_err(|e| e.in_fold(fold))?;
        let fits = lasso_path(&centered, &moments, grid).map_err(|e| e.in_fold(fold))?;
        for (g, fit) in fits.iter().enumerate() {
            for &i in &test_rows {
                let x: Vec<f64> = data.features().row(i).iter().cloned().collect();
                let r = data.outcomes()[i] - predict(fit, &x, data.treatments()[i])?;
                errors[g] += r * r;
            }
        }
    }
    Ok((grid[argmin_prefer_first(&errors)], errors))
}

/// Index of the smallest value; the earliest index wins ties.
pub(crate) fn argmin_prefer_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Ordinary least squares per arm.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ols;

#[derive(Debug, Clone, Copy)]
pub struct Ridge {
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Lasso {
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct JointLasso {
    pub lambda: f64,
}

/// Always returns zero slopes: cross-estimation with it reduces to
/// fold-wise difference in means.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroAdjustment;

/// Runs the inner fitter on unit-RMS feature columns and maps the slopes back.
#[derive(Debug, Clone, Copy)]
pub struct Standardized<F>(pub F);

impl CenteredFitter for Ols {
    fn label(&self) -> String {
        "ols".into()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        fit_ols(data, moments)
    }
}

impl CenteredFitter for Ridge {
    fn penalty(&self) -> Option<f64> {
        Some(self.lambda)
    }
    fn label(&self) -> String {
        "ridge".into()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        fit_ridge(data, moments, self.lambda)
    }
}

impl CenteredFitter for Lasso {
    fn penalty(&self) -> Option<f64> {
        Some(self.lambda)
    }
    fn label(&self) -> String {
        "lasso".into()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        fit_lasso(data, moments, self.lambda)
    }
}

impl CenteredFitter for JointLasso {
    fn penalty(&self) -> Option<f64> {
        Some(self.lambda)
    }
    fn label(&self) -> String {
        "joint-lasso".into()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        Ok(fit_joint_lasso(data, moments, self.lambda)?.fit)
    }
}

impl CenteredFitter for ZeroAdjustment {
    fn label(&self) -> String {
        "zero".into()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        check_dims(data, moments)?;
        Ok(RegressionFit::zero(moments))
    }
}

impl<F: CenteredFitter> CenteredFitter for Standardized<F> {
    fn label(&self) -> String {
        format!("{}-std", self.0.label())
    }
    fn penalty(&self) -> Option<f64> {
        self.0.penalty()
    }
    fn fit(&self, data: &CenteredDataset, moments: &ArmMoments) -> Result<RegressionFit> {
        let (scaled, scales) = data.standardized();
        let inner = self.0.fit(&scaled, moments)?;
        let s = DVector::from_vec(scales);
        let b0 = inner.beta0.component_div(&s);
        let b1 = inner.beta1.component_div(&s);
        Ok(RegressionFit::from_coefficients(b0, b1, moments, inner.lambda))
    }
}
