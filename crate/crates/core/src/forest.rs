//! Subsampled regression forests and the out-of-bag cross-estimator.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{confidence_interval, AteEstimate};
use crate::regress::RegressionFit;
use crate::par;
use crate::rng::{derive_seed, stream_rng, streams};
use crate::stats::{sample_variance, two_sided_z};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Rows drawn without replacement per tree; `None` means `ceil(n^0.7)`.
    pub subsample: Option<usize>,
    /// Candidate features per split; `None` means `ceil(p / 3)`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { num_trees: 500, subsample: None, mtry: None, min_leaf: 5 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Split { feature: usize, threshold: f64, left: u32, right: u32 },
    Leaf { value: f64, start: u32, len: u32 },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    /// Training rows of every leaf, stored contiguously.
    leaf_rows: Vec<u32>,
}

impl Tree {
    fn leaf(&self, x: &[f64]) -> &Node {
        let mut node = &self.nodes[0];
        loop {
            match *node {
                Node::Split { feature, threshold, left, right } => {
                    node = &self.nodes[if x[feature] <= threshold { left } else { right } as usize];
                }
                Node::Leaf { .. } => return node,
            }
        }
    }

    fn predict(&self, x: &[f64]) -> f64 {
        match *self.leaf(x) {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    /// Sorted subsample of every tree.
    inbag: Vec<Vec<u32>>,
    /// Row-major training features.
    x: Vec<f64>,
    y: Vec<f64>,
    p: usize,
    subsample: usize,
    mtry: usize,
    min_leaf: usize,
}

struct Grower<'a, R: Rng> {
    x: &'a [f64],
    y: &'a [f64],
    p: usize,
    mtry: usize,
    min_leaf: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
    leaf_rows: Vec<u32>,
    pairs: Vec<(f64, f64)>,
}

impl<R: Rng> Grower<'_, R> {
    fn make_leaf(&mut self, rows: &[u32]) -> Node {
        let value = rows.iter().map(|&i| self.y[i as usize]).sum::<f64>() / rows.len() as f64;
        let start = self.leaf_rows.len() as u32;
        self.leaf_rows.extend_from_slice(rows);
        Node::Leaf { value, start, len: rows.len() as u32 }
    }

    /// Best split over `mtry` random features, by largest drop in squared error.
    fn best_split(&mut self, rows: &[u32]) -> Option<(usize, f64)> {
        let m = rows.len();
        let total: f64 = rows.iter().map(|&i| self.y[i as usize]).sum();
        let parent = total * total / m as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        for feature in sample(self.rng, self.p, self.mtry).into_iter() {
            self.pairs.clear();
            self.pairs.extend(rows.iter().map(|&i| (self.x[i as usize * self.p + feature], self.y[i as usize])));
            self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = 0.0;
            for cut in 1..m {
                left += self.pairs[cut - 1].1;
                if cut < self.min_leaf || m - cut < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (self.pairs[cut - 1].0, self.pairs[cut].0);
                if lo == hi {
                    continue;
                }
                let right = total - left;
                let score = left * left / cut as f64 + right * right / (m - cut) as f64;
                if score > parent * (1.0 + 1e-12) + 1e-300 && best.is_none_or(|b| score > b.2) {
                    best = Some((feature, 0.5 * (lo + hi), score));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn grow(&mut self, rows: &mut [u32]) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0, start: 0, len: 0 });
        let y0 = self.y[rows[0] as usize];
        let constant = rows.iter().all(|&i| self.y[i as usize] == y0);
        let split = if rows.len() >= 2 * self.min_leaf && !constant { self.best_split(rows) } else { None };
        let node = match split {
            None => self.make_leaf(rows),
            Some((feature, threshold)) => {
                let (x, p) = (self.x, self.p);
                let mut cut = 0;
                for k in 0..rows.len() {
                    if x[rows[k] as usize * p + feature] <= threshold {
                        rows.swap(k, cut);
                        cut += 1;
                    }
                }
                let (l, r) = rows.split_at_mut(cut);
                let left = self.grow(l);
                let right = self.grow(r);
                Node::Split { feature, threshold, left, right }
            }
        };
        self.nodes[id as usize] = node;
        id
    }
}

/// Grow a forest on one arm's rows. Each tree sees an independent subsample
/// drawn without replacement; tree `t` uses the stream derived from `(seed, t)`.
pub fn fit_forest(x: &DMatrix<f64>, y: &[f64], params: &ForestParams, seed: u64) -> Result<Forest> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if params.num_trees == 0 || params.min_leaf == 0 {
        return Err(Error::InvalidInput("num_trees and min_leaf must be positive".into()));
    }
    if n < 2 || n < params.min_leaf {
        return Err(Error::InvalidInput(format!(
            "forest needs at least max(2, min_leaf = {}) rows, got {n}",
            params.min_leaf
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("forest needs at least one feature".into()));
    }
    let subsample = params.subsample.unwrap_or_else(|| (n as f64).powf(0.7).ceil() as usize).min(n);
    if subsample == 0 || params.subsample.is_some_and(|s| s > n) {
        return Err(Error::InvalidInput(format!("subsample size must lie in 1..={n}")));
    }
    let mtry = params.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p);
    let mut rowmajor = Vec::with_capacity(n * p);
    for i in 0..n {
        rowmajor.extend(x.row(i).iter());
    }

    let grown = par::map_indexed(params.num_trees, |t| {
        let mut rng = stream_rng(seed, t as u64);
        let mut rows: Vec<u32> = sample(&mut rng, n, subsample).into_iter().map(|i| i as u32).collect();
        rows.sort_unstable();
        let inbag = rows.clone();
        let mut g = Grower {
            x: &rowmajor,
            y,
            p,
            mtry,
            min_leaf: params.min_leaf,
            rng: &mut rng,
            nodes: Vec::new(),
            leaf_rows: Vec::with_capacity(subsample),
            pairs: Vec::with_capacity(subsample),
        };
        g.grow(&mut rows);
        (Tree { nodes: g.nodes, leaf_rows: g.leaf_rows }, inbag)
    });
    let (trees, inbag): (Vec<_>, Vec<_>) = grown.into_iter().unzip();
    let forest = Forest { trees, inbag, x: rowmajor, y: y.to_vec(), p, subsample, mtry, min_leaf: params.min_leaf };

    if params.num_trees >= 50 && subsample as f64 <= 0.7 * n as f64 {
        let uncovered = (0..n).filter(|&i| forest.oob_trees(i).next().is_none()).count();
        if uncovered > 0 {
            log::warn!("{uncovered} training rows are in every tree's subsample; refit with more trees");
        }
    }
    Ok(forest)
}

impl Forest {
    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn mtry(&self) -> usize {
        self.mtry
    }

    pub fn min_leaf(&self) -> usize {
        self.min_leaf
    }

    /// Sorted training rows of tree `t`.
    pub fn inbag(&self, t: usize) -> &[u32] {
        &self.inbag[t]
    }

    fn train_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn oob_trees(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.trees.len()).filter(move |&t| self.inbag[t].binary_search(&(i as u32)).is_err())
    }

    /// Average of all trees at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: x.len() });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Average over the trees whose subsample excludes training row `i`.
    pub fn oob_predict(&self, i: usize) -> Result<f64> {
        if i >= self.n_train() {
            return Err(Error::InvalidInput(format!("row {i} is not a training row")));
        }
        let x = self.train_row(i);
        let (mut sum, mut count) = (0.0, 0usize);
        for t in self.oob_trees(i) {
            sum += self.trees[t].predict(x);
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoOobTrees { row: i });
        }
        Ok(sum / count as f64)
    }

    /// Jackknife spread of the forest at the probe points: for each probe,
    /// `sum_i (mu^(-i)(x) - mu(x))^2`, averaged over probes. Deleting row
    /// `i` keeps every tree's splits and only removes `i` from its leaf
    /// (a leaf holding only `i` keeps its value).
    pub fn jackknife_compat_stat(&self, probes: &DMatrix<f64>) -> Result<f64> {
        if probes.ncols() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: probes.ncols() });
        }
        if probes.nrows() == 0 {
            return Ok(0.0);
        }
        let b = self.trees.len() as f64;
        let mut shift = vec![0.0; self.n_train()];
        let mut total = 0.0;
        let mut x = vec![0.0; self.p];
        for r in 0..probes.nrows() {
            for (j, v) in x.iter_mut().enumerate() {
                *v = probes[(r, j)];
            }
            shift.iter_mut().for_each(|s| *s = 0.0);
            for tree in &self.trees {
                if let Node::Leaf { value, start, len } = *tree.leaf(&x) {
                    if len < 2 {
                        continue;
                    }
                    let m1 = (len - 1) as f64;
                    for &i in &tree.leaf_rows[start as usize..(start + len) as usize] {
                        shift[i as usize] += (value - self.y[i as usize]) / m1 / b;
                    }
                }
            }
            total += shift.iter().map(|s| s * s).sum::<f64>();
        }
        Ok(total / probes.nrows() as f64)
    }
}

/// Supplies `mu^(w,-i)(X_i)` for every row `i` of a dataset.
pub trait OutcomeAdjuster {
    fn held_out_prediction(&self, d: &Dataset, arm: Arm, row: usize) -> Result<f64>;
}

/// Always predicts 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroAdjuster;

impl OutcomeAdjuster for ZeroAdjuster {
    fn held_out_prediction(&self, _d: &Dataset, _arm: Arm, _row: usize) -> Result<f64> {
        Ok(0.0)
    }
}

/// Full-sample predictions of a linear fit (no hold-out).
#[derive(Debug, Clone)]
pub struct LinearAdjuster(pub RegressionFit);

impl OutcomeAdjuster for LinearAdjuster {
    fn held_out_prediction(&self, d: &Dataset, arm: Arm, row: usize) -> Result<f64> {
        let x: Vec<f64> = d.features().row(row).iter().copied().collect();
        crate::regress::predict(&self.0, &x, arm)
    }
}

/// Any fixed function `(arm, x) -> prediction`.
pub struct FnAdjuster<F>(pub F);

impl<F: Fn(Arm, &[f64]) -> f64> OutcomeAdjuster for FnAdjuster<F> {
    fn held_out_prediction(&self, d: &Dataset, arm: Arm, row: usize) -> Result<f64> {
        let x: Vec<f64> = d.features().row(row).iter().copied().collect();
        Ok((self.0)(arm, &x))
    }
}

/// One forest per arm. Own-arm rows get out-of-bag predictions, other-arm
/// rows the full forest.
#[derive(Debug, Clone)]
pub struct ForestAdjuster {
    pub forests: [Forest; 2],
    /// Position of each dataset row inside its arm's training set.
    position: Vec<usize>,
}

impl ForestAdjuster {
    pub fn fit(d: &Dataset, params: &ForestParams, seed: u64) -> Result<ForestAdjuster> {
        d.require_both_arms()?;
        let mut position = vec![0; d.n()];
        let forests = Arm::BOTH.map(|arm| {
            let rows = d.arm_rows(arm);
            for (k, &i) in rows.iter().enumerate() {
                position[i] = k;
            }
            let x = d.features().select_rows(&rows);
            let y: Vec<f64> = rows.iter().map(|&i| d.outcomes()[i]).collect();
            fit_forest(&x, &y, params, derive_seed(seed, streams::FOREST * 2 + arm.index() as u64))
        });
        let [f0, f1] = forests;
        Ok(ForestAdjuster { forests: [f0?, f1?], position })
    }

    /// Jackknife statistic of each arm's forest probed at (up to 200 of) the
    /// other arm's rows, averaged over arms.
    pub fn jackknife_stat(&self, d: &Dataset) -> Result<f64> {
        let mut sum = 0.0;
        for arm in Arm::BOTH {
            let rows: Vec<usize> = d.arm_rows(arm.other()).into_iter().take(200).collect();
            sum += self.forests[arm.index()].jackknife_compat_stat(&d.features().select_rows(&rows))?;
        }
        Ok(sum / 2.0)
    }
}

impl OutcomeAdjuster for ForestAdjuster {
    fn held_out_prediction(&self, d: &Dataset, arm: Arm, row: usize) -> Result<f64> {
        let forest = &self.forests[arm.index()];
        if d.treatments()[row] == arm {
            forest.oob_predict(self.position[row])
        } else {
            let x: Vec<f64> = d.features().row(row).iter().copied().collect();
            forest.predict(&x)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlAteEstimate {
    pub method: String,
    pub tau_hat: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    /// Only for forest adjusters.
    pub jackknife_stat: Option<f64>,
}

impl MlAteEstimate {
    pub fn to_ate(&self) -> AteEstimate {
        AteEstimate {
            method: self.method.clone(),
            tau_hat: self.tau_hat,
            variance: self.variance,
            ci_low: self.ci_low,
            ci_high: self.ci_high,
            alpha: self.alpha,
            per_fold: Vec::new(),
            lambda: None,
        }
    }
}

/// The hold-out-adjusted estimator
///
/// ```text
/// tau = 1/n sum_i (mu1(X_i) - mu0(X_i)) + 1/n1 sum_{W=1} (Y_i - mu1(X_i)) - 1/n0 sum_{W=0} (Y_i - mu0(X_i))
/// ```
///
/// with variance `sum_w s_w^2 / n_w`, where `s_w^2` is the within-arm sample
/// variance of `Y_i - (n0/n) mu1(X_i) - (n1/n) mu0(X_i)`.
pub fn ml_estimate_with(d: &Dataset, adjuster: &dyn OutcomeAdjuster, alpha: f64) -> Result<MlAteEstimate> {
    two_sided_z(alpha)?;
    d.require_both_arms()?;
    let n = d.n();
    let (n0, n1) = (d.arm_count(Arm::Control), d.arm_count(Arm::Treated));
    let mut mu = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        for arm in Arm::BOTH {
            mu[arm.index()].push(adjuster.held_out_prediction(d, arm, i)?);
        }
    }
    let mut cross = 0.0;
    let mut resid_sum = [0.0; 2];
    let mut combined = [Vec::with_capacity(n0), Vec::with_capacity(n1)];
    let (f0, f1) = (n0 as f64 / n as f64, n1 as f64 / n as f64);
    for i in 0..n {
        let (m0, m1) = (mu[0][i], mu[1][i]);
        cross += m1 - m0;
        let w = d.treatments()[i].index();
        let y = d.outcomes()[i];
        resid_sum[w] += y - mu[w][i];
        combined[w].push(y - f0 * m1 - f1 * m0);
    }
    let tau_hat = cross / n as f64 + resid_sum[1] / n1 as f64 - resid_sum[0] / n0 as f64;
    let mut variance = 0.0;
    for arm in Arm::BOTH {
        let r = &combined[arm.index()];
        if r.len() < 2 {
            return Err(Error::TooFewForVariance { arm, count: r.len() });
        }
        variance += sample_variance(r) / r.len() as f64;
    }
    let (ci_low, ci_high) = confidence_interval(tau_hat, variance, alpha)?;
    Ok(MlAteEstimate { method: "adjusted".into(), tau_hat, variance, ci_low, ci_high, alpha, jackknife_stat: None })
}

/// Forest-adjusted estimate with out-of-bag predictions.
pub fn ml_cross_estimate(d: &Dataset, params: &ForestParams, alpha: f64, seed: u64) -> Result<MlAteEstimate> {
    two_sided_z(alpha)?;
    let adjuster = ForestAdjuster::fit(d, params, seed)?;
    let mut est = ml_estimate_with(d, &adjuster, alpha)?;
    est.method = "forest".into();
    est.jackknife_stat = Some(adjuster.jackknife_stat(d)?);
    Ok(est)
}
