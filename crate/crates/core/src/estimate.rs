//! Average-treatment-effect estimators: difference in means, the plug-in
//! regression-adjusted estimator, K-fold cross-estimation and its
//! cross-validated variant.

use nalgebra::DVector;

use crate::data::{arm_moments, center_by_arm, Arm, ArmMoments, CenteredDataset, Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::par;
use crate::regress::suff::SuffStats;
use crate::regress::{
    log_spaced_grid, solve_lasso_stats, stats_lambda_max, CenteredFitter, JointLassoFit, RegressionFit, SolverOptions,
};
use crate::stats::{mean, sample_variance, two_sided_z};

/// One fold's contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldEstimate {
    pub tau_k: f64,
    pub v_k: f64,
    pub n_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteEstimate {
    pub method: String,
    pub tau_hat: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    /// Empty for estimators without a fold structure.
    pub per_fold: Vec<FoldEstimate>,
    pub lambda: Option<f64>,
}

impl AteEstimate {
    fn new(method: impl Into<String>, tau_hat: f64, variance: f64, alpha: f64) -> Result<AteEstimate> {
        let (ci_low, ci_high) = confidence_interval(tau_hat, variance, alpha)?;
        Ok(AteEstimate {
            method: method.into(),
            tau_hat,
            variance,
            ci_low,
            ci_high,
            alpha,
            per_fold: Vec::new(),
            lambda: None,
        })
    }

    /// `tau = sum_k tau_k n_k / n`, `V = sum_k (n_k / n)^2 V_k`.
    pub fn from_folds(method: impl Into<String>, per_fold: Vec<FoldEstimate>, alpha: f64) -> Result<AteEstimate> {
        let n: usize = per_fold.iter().map(|f| f.n_k).sum();
        let nf = n as f64;
        let tau_hat = per_fold.iter().map(|f| f.tau_k * f.n_k as f64 / nf).sum();
        let variance = per_fold.iter().map(|f| (f.n_k as f64 / nf).powi(2) * f.v_k).sum();
        let mut est = AteEstimate::new(method, tau_hat, variance, alpha)?;
        est.per_fold = per_fold;
        Ok(est)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    /// Interval at a different level, same point estimate and variance.
    pub fn interval_at(&self, alpha: f64) -> Result<(f64, f64)> {
        confidence_interval(self.tau_hat, self.variance, alpha)
    }
}

/// Population and realized conditional effects of a simulated trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSpec {
    pub tau: f64,
    pub tau_bar: f64,
}

/// `tau_hat +/- z_{1 - alpha/2} sqrt(variance)`. An infinite variance gives the whole line.
pub fn confidence_interval(tau_hat: f64, variance: f64, alpha: f64) -> Result<(f64, f64)> {
    let z = two_sided_z(alpha)?;
    if !(variance >= 0.0) {
        return Err(Error::InvalidInput(format!("variance must be nonnegative, got {variance}")));
    }
    let h = z * variance.sqrt();
    Ok((tau_hat - h, tau_hat + h))
}

fn arm_outcomes(d: &Dataset, arm: Arm) -> Vec<f64> {
    d.outcomes().iter().zip(d.treatments()).filter(|(_, &w)| w == arm).map(|(&y, _)| y).collect()
}

pub fn difference_in_means(d: &Dataset, alpha: f64) -> Result<AteEstimate> {
    d.require_both_arms()?;
    let y0 = arm_outcomes(d, Arm::Control);
    let y1 = arm_outcomes(d, Arm::Treated);
    for (arm, y) in [(Arm::Control, &y0), (Arm::Treated, &y1)] {
        if y.len() < 2 {
            return Err(Error::TooFewForVariance { arm, count: y.len() });
        }
    }
    let tau = mean(&y1) - mean(&y0);
    let v = sample_variance(&y0) / y0.len() as f64 + sample_variance(&y1) / y1.len() as f64;
    AteEstimate::new("diff", tau, v, alpha)
}

/// `Ybar_1 - Ybar_0 + (Xbar - Xbar_1) . beta_1 - (Xbar - Xbar_0) . beta_0`.
pub fn plug_in_ate(fit: &RegressionFit, moments: &ArmMoments) -> Result<f64> {
    let p = moments.xbar.len();
    for got in [fit.beta0.len(), fit.beta1.len()] {
        if got != p {
            return Err(Error::DimensionMismatch { expected: p, got });
        }
    }
    let adj1 = (&moments.xbar - &moments.xbar1).dot(&fit.beta1);
    let adj0 = (&moments.xbar - &moments.xbar0).dot(&fit.beta0);
    Ok(moments.ybar1 - moments.ybar0 + adj1 - adj0)
}

/// Plug-in variance of one fold: per arm, the sample variance of
/// `Y_i - X_i . pooled` over the fold's members, divided by their count.
pub fn fold_variance(fold: &Dataset, pooled: &DVector<f64>) -> Result<f64> {
    if pooled.len() != fold.p() {
        return Err(Error::DimensionMismatch { expected: fold.p(), got: pooled.len() });
    }
    let fitted = fold.features() * pooled;
    let mut total = 0.0;
    for arm in Arm::BOTH {
        let r: Vec<f64> = (0..fold.n())
            .filter(|&i| fold.treatments()[i] == arm)
            .map(|i| fold.outcomes()[i] - fitted[i])
            .collect();
        if r.len() < 2 {
            return Err(Error::TooFewForVariance { arm, count: r.len() });
        }
        total += sample_variance(&r) / r.len() as f64;
    }
    Ok(total)
}

/// How training folds are centered before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Subtract the arm means of the whole training split.
    #[default]
    TrainingArms,
    /// Subtract each fold's own arm means, the layout used by
    /// cross-validated cross-estimation.
    PerFold,
}

/// Arm counts used to pool the two slope vectors in the fold variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolingCounts {
    /// Counts of the training split (all folds but the held-out one).
    #[default]
    OutOfFold,
    /// Counts of the full sample.
    Global,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrossOptions {
    pub centering: Centering,
    pub pooling: PoolingCounts,
}

/// Every row centered by the arm means of its own fold.
pub fn center_within_folds(d: &Dataset, plan: &FoldPlan) -> Result<CenteredDataset> {
    plan.validate(d.treatments())?;
    let mut x = d.features().clone();
    let mut y = d.outcomes().to_vec();
    for fold in 0..plan.k() {
        let rows = plan.fold_rows(fold);
        let m = arm_moments(&d.subset(&rows)).map_err(|e| e.in_fold(fold))?;
        for &i in &rows {
            let w = d.treatments()[i];
            let xbar = m.xbar_arm(w);
            for j in 0..d.p() {
                x[(i, j)] -= xbar[j];
            }
            y[i] -= m.ybar_arm(w);
        }
    }
    Ok(CenteredDataset { features_c: x, outcomes_c: y, treatments: d.treatments().to_vec() })
}

fn pooling_counts(d: &Dataset, train: &Dataset, pooling: PoolingCounts) -> (usize, usize) {
    let src = match pooling {
        PoolingCounts::OutOfFold => train,
        PoolingCounts::Global => d,
    };
    (src.arm_count(Arm::Control), src.arm_count(Arm::Treated))
}

fn fold_estimate(held: &Dataset, fit: &RegressionFit, n0: usize, n1: usize) -> Result<FoldEstimate> {
    let m = arm_moments(held)?;
    let tau_k = plug_in_ate(fit, &m)?;
    let v_k = fold_variance(held, &fit.pooled_beta(n0, n1))?;
    Ok(FoldEstimate { tau_k, v_k, n_k: held.n() })
}

/// K-fold cross-estimation: fold `k` is adjusted with slopes fitted on the
/// other `K - 1` folds.
pub fn cross_estimate(d: &Dataset, plan: &FoldPlan, fitter: &dyn CenteredFitter, alpha: f64) -> Result<AteEstimate> {
    cross_estimate_with(d, plan, fitter, alpha, &CrossOptions::default())
}

pub fn cross_estimate_with(
    d: &Dataset,
    plan: &FoldPlan,
    fitter: &dyn CenteredFitter,
    alpha: f64,
    opts: &CrossOptions,
) -> Result<AteEstimate> {
    two_sided_z(alpha)?;
    plan.validate(d.treatments())?;
    let per_fold_centered = match opts.centering {
        Centering::PerFold => Some(center_within_folds(d, plan)?),
        Centering::TrainingArms => None,
    };
    let results = par::map_indexed(plan.k(), |fold| -> Result<FoldEstimate> {
        let train_rows = plan.train_rows(fold);
        let train = d.subset(&train_rows);
        let fit = match &per_fold_centered {
            None => {
                let (c, m) = center_by_arm(&train)?;
                fitter.fit(&c, &m)?
            }
            Some(all) => fitter.fit(&all.subset(&train_rows), &arm_moments(&train)?)?,
        };
        let (n0, n1) = pooling_counts(d, &train, opts.pooling);
        fold_estimate(&d.subset(&plan.fold_rows(fold)), &fit, n0, n1)
    });
    let per_fold = results
        .into_iter()
        .enumerate()
        .map(|(fold, r)| r.map_err(|e| e.in_fold(fold)))
        .collect::<Result<Vec<_>>>()?;
    let mut est = AteEstimate::from_folds(format!("ce-{}", fitter.label()), per_fold, alpha)?;
    est.lambda = fitter.penalty();
    Ok(est)
}

/// Result of cross-validated cross-estimation.
#[derive(Debug, Clone)]
pub struct CvCrossEstimate {
    pub estimate: AteEstimate,
    pub lambda: f64,
    /// The grid as supplied, or the visited prefix of an automatic grid.
    pub grid: Vec<f64>,
    /// Pooled held-out squared error for each grid entry.
    pub cv_error: Vec<f64>,
}

/// Per-fold, per-arm statistics of the fold-centered data, and the joint
/// statistics of each training split.
struct CvceStats {
    fold: Vec<[SuffStats; 2]>,
    train: Vec<SuffStats>,
}

impl CvceStats {
    fn new(d: &Dataset, plan: &FoldPlan) -> Result<CvceStats> {
        let centered = center_within_folds(d, plan)?;
        let fold: Vec<[SuffStats; 2]> = (0..plan.k())
            .map(|k| {
                let rows = plan.fold_rows(k);
                Arm::BOTH.map(|arm| {
                    let sel: Vec<usize> = rows.iter().copied().filter(|&i| d.treatments()[i] == arm).collect();
                    let x = centered.features_c.select_rows(&sel);
                    let y: Vec<f64> = sel.iter().map(|&i| centered.outcomes_c[i]).collect();
                    SuffStats::from_rows(&x, &y)
                })
            })
            .collect();
        let p = d.p();
        let train = (0..fold.len())
            .map(|k| {
                let mut arms = [SuffStats::zeros(p), SuffStats::zeros(p)];
                for (j, stats) in fold.iter().enumerate() {
                    if j != k {
                        arms[0].add_assign(&stats[0]);
                        arms[1].add_assign(&stats[1]);
                    }
                }
                SuffStats::joint(&arms[0], &arms[1])
            })
            .collect();
        Ok(CvceStats { fold, train })
    }

    fn lambda_max(&self) -> f64 {
        self.train.iter().map(stats_lambda_max).fold(0.0, f64::max)
    }
}

/// Largest penalty at which every training split's joint lasso is zero.
pub fn cvce_lambda_max(d: &Dataset, plan: &FoldPlan) -> Result<f64> {
    Ok(CvceStats::new(d, plan)?.lambda_max())
}

/// Grid points evaluated per block by [`cv_cross_estimate_auto`].
pub const AUTO_BLOCK: usize = 3;
/// Grid points that must follow the held-out minimum before
/// [`cv_cross_estimate_auto`] stops descending.
pub const AUTO_PATIENCE: usize = 3;

/// Cross-validated cross-estimation on an automatic grid: `n_lambda`
/// log-spaced penalties from the joint-lasso `lambda_max` down to
/// `ratio * lambda_max`. The grid is walked downward in blocks of
/// [`AUTO_BLOCK`] and the walk stops once the pooled held-out error has its
/// minimum at least [`AUTO_PATIENCE`] points above the last penalty solved.
/// The small-penalty tail, where the solves are slowest, is only visited
/// when the error is still falling. The returned `grid` holds the visited
/// prefix; the estimate equals [`cv_cross_estimate`] on that prefix.
pub fn cv_cross_estimate_auto(
    d: &Dataset,
    plan: &FoldPlan,
    n_lambda: usize,
    ratio: f64,
    alpha: f64,
) -> Result<CvCrossEstimate> {
    two_sided_z(alpha)?;
    let stats = CvceStats::new(d, plan)?;
    let grid = log_spaced_grid(stats.lambda_max(), n_lambda, ratio)?;
    let mut paths = vec![FoldPath::default(); plan.k()];
    let mut done = 0;
    while done < grid.len() {
        let end = (done + AUTO_BLOCK).min(grid.len());
        extend_paths(&stats, d.p(), &grid[done..end], &mut paths)?;
        done = end;
        let best = best_index(&pooled_error(&paths, done));
        if best + AUTO_PATIENCE < done {
            break;
        }
    }
    let cv_error = pooled_error(&paths, done);
    let best = best_index(&cv_error);
    finish_cvce(d, plan, &paths, best, grid[best], grid[..done].to_vec(), cv_error, alpha)
}

/// Cross-validated cross-estimation with the joint lasso. Data are centered
/// within each fold and arm; one fold plan serves both for choosing the
/// penalty (pooled held-out squared error, ties to the larger penalty) and
/// for the cross-estimate itself.
pub fn cv_cross_estimate(d: &Dataset, plan: &FoldPlan, grid: &[f64], alpha: f64) -> Result<CvCrossEstimate> {
    two_sided_z(alpha)?;
    if grid.is_empty() {
        return Err(Error::InvalidInput("penalty grid is empty".into()));
    }
    for &l in grid {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidInput(format!("penalty must be positive and finite, got {l}")));
        }
    }
    let stats = CvceStats::new(d, plan)?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let descending: Vec<f64> = order.iter().map(|&g| grid[g]).collect();
    let mut paths = vec![FoldPath::default(); plan.k()];
    extend_paths(&stats, d.p(), &descending, &mut paths)?;
    let sorted_error = pooled_error(&paths, grid.len());
    let best = best_index(&sorted_error);
    let mut cv_error = vec![0.0; grid.len()];
    for (pos, &g) in order.iter().enumerate() {
        cv_error[g] = sorted_error[pos];
    }
    finish_cvce(d, plan, &paths, best, descending[best], grid.to_vec(), cv_error, alpha)
}

/// One fold's joint-lasso path over a descending run of penalties.
#[derive(Debug, Clone, Default)]
struct FoldPath {
    thetas: Vec<DVector<f64>>,
    sse: Vec<f64>,
}

/// Continue every fold's path over `lambdas` (descending), warm-starting from
/// the last solution.
fn extend_paths(stats: &CvceStats, p: usize, lambdas: &[f64], paths: &mut [FoldPath]) -> Result<()> {
    let opts = SolverOptions::default();
    let blocks = par::map_indexed(paths.len(), |k| -> Result<FoldPath> {
        let train = &stats.train[k];
        let [held0, held1] = &stats.fold[k];
        let mut warm = paths[k].thetas.last().cloned();
        let mut out = FoldPath::default();
        for &lambda in lambdas {
            let sol = solve_lasso_stats(train, lambda, warm.as_ref(), &opts).map_err(|e| Error::FoldLambda {
                fold: k,
                lambda,
                source: Box::new(e),
            })?;
            let beta = sol.beta.rows(0, p);
            let gamma = sol.beta.rows(p, p);
            out.sse.push(held0.rss(&(beta - gamma)) + held1.rss(&(beta + gamma)));
            out.thetas.push(sol.beta.clone());
            warm = Some(sol.beta);
        }
        Ok(out)
    });
    for (path, block) in paths.iter_mut().zip(blocks) {
        let block = block?;
        path.thetas.extend(block.thetas);
        path.sse.extend(block.sse);
    }
    Ok(())
}

fn pooled_error(paths: &[FoldPath], len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for path in paths {
        for (acc, e) in total.iter_mut().zip(&path.sse) {
            *acc += e;
        }
    }
    total
}

/// First minimum of errors listed from the largest penalty down.
fn best_index(errors: &[f64]) -> usize {
    let mut best = 0;
    for (g, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = g;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn finish_cvce(
    d: &Dataset,
    plan: &FoldPlan,
    paths: &[FoldPath],
    best: usize,
    lambda: f64,
    grid: Vec<f64>,
    cv_error: Vec<f64>,
    alpha: f64,
) -> Result<CvCrossEstimate> {
    let per_fold = par::map_indexed(plan.k(), |k| -> Result<FoldEstimate> {
        let train = d.subset(&plan.train_rows(k));
        let m = arm_moments(&train)?;
        let fit = JointLassoFit::from_stacked(&paths[k].thetas[best], &m, lambda).fit;
        fold_estimate(&d.subset(&plan.fold_rows(k)), &fit, m.n0, m.n1)
    })
    .into_iter()
    .enumerate()
    .map(|(k, r)| r.map_err(|e| e.in_fold(k)))
    .collect::<Result<Vec<_>>>()?;

    let mut estimate = AteEstimate::from_folds("cvce", per_fold, alpha)?;
    estimate.lambda = Some(lambda);
    Ok(CvCrossEstimate { estimate, lambda, grid, cv_error })
}
