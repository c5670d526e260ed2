//! Experiment data: the `(X_i, Y_i, W_i)` sample, per-arm moments, arm-wise
//! centering and stratified fold plans.
//!
//! Features are stored column-major (`n x p`) so per-feature scans and Gram
//! products stay contiguous.

use std::fmt;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Treatment arm of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control = 0,
    Treated = 1,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_indicator(w: bool) -> Arm {
        if w {
            Arm::Treated
        } else {
            Arm::Control
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }

    /// `2W - 1`.
    pub fn sign(self) -> f64 {
        match self {
            Arm::Control => -1.0,
            Arm::Treated => 1.0,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Control => f.write_str("control"),
            Arm::Treated => f.write_str("treated"),
        }
    }
}

/// The experiment sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    outcomes: Vec<f64>,
    treatments: Vec<Arm>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, outcomes: Vec<f64>, treatments: Vec<Arm>) -> Result<Self> {
        let n = outcomes.len();
        if features.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, got: features.nrows() });
        }
        if treatments.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: treatments.len() });
        }
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 observations, got {n}")));
        }
        if features.iter().chain(outcomes.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features and outcomes must be finite".into()));
        }
        Ok(Dataset { features, outcomes, treatments })
    }

    /// Build from 0/1 treatment indicators.
    pub fn from_indicators(features: DMatrix<f64>, outcomes: Vec<f64>, w: &[u8]) -> Result<Self> {
        let treatments = w
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0 => Ok(Arm::Control),
                1 => Ok(Arm::Treated),
                other => Err(Error::BadTreatment { record: i + 1, value: other.to_string() }),
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(features, outcomes, treatments)
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[Arm] {
        &self.treatments
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.treatments.iter().filter(|&&w| w == arm).count()
    }

    pub fn arm_rows(&self, arm: Arm) -> Vec<usize> {
        arm_rows(&self.treatments, arm)
    }

    pub fn require_both_arms(&self) -> Result<()> {
        for arm in Arm::BOTH {
            if self.arm_count(arm) == 0 {
                return Err(Error::EmptyArm(arm));
            }
        }
        Ok(())
    }

    /// Rows `rows` (in the given order) as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            outcomes: rows.iter().map(|&i| self.outcomes[i]).collect(),
            treatments: rows.iter().map(|&i| self.treatments[i]).collect(),
        }
    }

    /// Swap treatment and control labels.
    pub fn relabeled(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            outcomes: self.outcomes.clone(),
            treatments: self.treatments.iter().map(|w| w.other()).collect(),
        }
    }

    /// Add `shift` to every outcome.
    pub fn with_outcome_shift(&self, shift: f64) -> Dataset {
        Dataset {
            features: self.features.clone(),
            outcomes: self.outcomes.iter().map(|y| y + shift).collect(),
            treatments: self.treatments.clone(),
        }
    }

    /// `x_i . beta` for every row.
    pub fn linear_predictor(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.len() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), got: beta.len() });
        }
        Ok(&self.features * beta)
    }

    /// Read a CSV file with header `w,y,x1,...,xp` (columns matched by name).
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let layout = CsvLayout::from_header(&header)?;

        let mut w = Vec::new();
        let mut y = Vec::new();
        let mut x_rows: Vec<f64> = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            let rec_no = idx + 1;
            let cell = |col: usize| -> Result<&str> {
                record.get(col).ok_or_else(|| Error::Parse {
                    record: rec_no,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                })
            };
            let number = |col: usize| -> Result<f64> {
                let raw = cell(col)?;
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    record: rec_no,
                    message: format!("column {:?}: {:?} is not a number", &header[col], raw),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        record: rec_no,
                        message: format!("column {:?}: non-finite value", &header[col]),
                    });
                }
                Ok(v)
            };
            let w_raw = cell(layout.w)?;
            let arm = match w_raw.parse::<f64>() {
                Ok(v) if v == 0.0 => Arm::Control,
                Ok(v) if v == 1.0 => Arm::Treated,
                _ => return Err(Error::BadTreatment { record: rec_no, value: w_raw.to_string() }),
            };
            w.push(arm);
            y.push(number(layout.y)?);
            for &col in &layout.x {
                x_rows.push(number(col)?);
            }
        }
        let n = y.len();
        let p = layout.x.len();
        let features = DMatrix::from_row_slice(n, p, &x_rows);
        let data = Dataset::new(features, y, w)?;
        data.require_both_arms()?;
        Ok(data)
    }
}

struct CsvLayout {
    w: usize,
    y: usize,
    x: Vec<usize>,
}

impl CsvLayout {
    fn from_header(header: &csv::StringRecord) -> Result<CsvLayout> {
        let mut w = None;
        let mut y = None;
        let mut xs: Vec<(usize, usize)> = Vec::new();
        for (col, name) in header.iter().enumerate() {
            match name {
                "w" => w = Some(col),
                "y" => y = Some(col),
                other => {
                    let j = other
                        .strip_prefix('x')
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|&j| j >= 1)
                        .ok_or_else(|| Error::InvalidInput(format!("unexpected column {other:?}")))?;
                    xs.push((j, col));
                }
            }
        }
        let w = w.ok_or_else(|| Error::InvalidInput("missing column \"w\"".into()))?;
        let y = y.ok_or_else(|| Error::InvalidInput("missing column \"y\"".into()))?;
        xs.sort_unstable();
        for (expected, &(j, _)) in (1..).zip(xs.iter()) {
            if j != expected {
                return Err(Error::InvalidInput(format!("missing column \"x{expected}\"")));
            }
        }
        Ok(CsvLayout { w, y, x: xs.into_iter().map(|(_, col)| col).collect() })
    }
}

pub(crate) fn arm_rows(treatments: &[Arm], arm: Arm) -> Vec<usize> {
    treatments.iter().enumerate().filter(|(_, &w)| w == arm).map(|(i, _)| i).collect()
}

/// Per-arm and pooled sample means.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmMoments {
    pub xbar0: DVector<f64>,
    pub xbar1: DVector<f64>,
    pub ybar0: f64,
    pub ybar1: f64,
    pub xbar: DVector<f64>,
    pub n0: usize,
    pub n1: usize,
}

impl ArmMoments {
    pub fn xbar_arm(&self, arm: Arm) -> &DVector<f64> {
        match arm {
            Arm::Control => &self.xbar0,
            Arm::Treated => &self.xbar1,
        }
    }

    pub fn ybar_arm(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.ybar0,
            Arm::Treated => self.ybar1,
        }
    }

    pub fn count(&self, arm: Arm) -> usize {
        match arm {
            Arm::Control => self.n0,
            Arm::Treated => self.n1,
        }
    }

    pub fn n(&self) -> usize {
        self.n0 + self.n1
    }
}

pub fn arm_moments(d: &Dataset) -> Result<ArmMoments> {
    d.require_both_arms()?;
    let p = d.p();
    let mut sums = [DVector::zeros(p), DVector::zeros(p)];
    let mut ysum = [0.0; 2];
    let mut counts = [0usize; 2];
    for (i, &w) in d.treatments.iter().enumerate() {
        let a = w.index();
        counts[a] += 1;
        ysum[a] += d.outcomes[i];
    }
    for j in 0..p {
        let col = d.features.column(j);
        for (i, &w) in d.treatments.iter().enumerate() {
            sums[w.index()][j] += col[i];
        }
    }
    let [s0, s1] = sums;
    let n = d.n() as f64;
    let xbar = (&s0 + &s1) / n;
    Ok(ArmMoments {
        xbar0: s0 / counts[0] as f64,
        xbar1: s1 / counts[1] as f64,
        ybar0: ysum[0] / counts[0] as f64,
        ybar1: ysum[1] / counts[1] as f64,
        xbar,
        n0: counts[0],
        n1: counts[1],
    })
}

/// Data after subtracting the arm means: `(X_i - Xbar_{W_i}, Y_i - Ybar_{W_i}, W_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredDataset {
    pub features_c: DMatrix<f64>,
    pub outcomes_c: Vec<f64>,
    pub treatments: Vec<Arm>,
}

impl CenteredDataset {
    pub fn n(&self) -> usize {
        self.outcomes_c.len()
    }

    pub fn p(&self) -> usize {
        self.features_c.ncols()
    }

    pub fn arm_rows(&self, arm: Arm) -> Vec<usize> {
        arm_rows(&self.treatments, arm)
    }

    /// Centered rows of one arm.
    pub fn arm_block(&self, arm: Arm) -> (DMatrix<f64>, Vec<f64>) {
        let rows = self.arm_rows(arm);
        let x = self.features_c.select_rows(&rows);
        let y = rows.iter().map(|&i| self.outcomes_c[i]).collect();
        (x, y)
    }

    pub fn subset(&self, rows: &[usize]) -> CenteredDataset {
        CenteredDataset {
            features_c: self.features_c.select_rows(rows),
            outcomes_c: rows.iter().map(|&i| self.outcomes_c[i]).collect(),
            treatments: rows.iter().map(|&i| self.treatments[i]).collect(),
        }
    }

    /// Divide each feature column by its root mean square; returns the scales
    /// (zero columns keep scale 1).
    pub fn standardized(&self) -> (CenteredDataset, Vec<f64>) {
        let n = self.n().max(1) as f64;
        let mut x = self.features_c.clone();
        let mut scales = Vec::with_capacity(self.p());
        for mut col in x.column_iter_mut() {
            let rms = (col.norm_squared() / n).sqrt();
            let s = if rms > 0.0 { rms } else { 1.0 };
            col /= s;
            scales.push(s);
        }
        (
            CenteredDataset { features_c: x, outcomes_c: self.outcomes_c.clone(), treatments: self.treatments.clone() },
            scales,
        )
    }
}

pub fn center_by_arm(d: &Dataset) -> Result<(CenteredDataset, ArmMoments)> {
    let m = arm_moments(d)?;
    let mut x = d.features.clone();
    for j in 0..d.p() {
        let means = [m.xbar0[j], m.xbar1[j]];
        let mut col = x.column_mut(j);
        for (i, &w) in d.treatments.iter().enumerate() {
            col[i] -= means[w.index()];
        }
    }
    let ybars = [m.ybar0, m.ybar1];
    let y = d.outcomes.iter().zip(&d.treatments).map(|(y, w)| y - ybars[w.index()]).collect();
    Ok((CenteredDataset { features_c: x, outcomes_c: y, treatments: d.treatments.clone() }, m))
}

/// Assignment of each observation to one of `K` folds, balanced within each arm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldPlan {
    /// Wrap an explicit assignment (fold indices `0..k`). Every fold must be non-empty.
    pub fn from_assignment(fold_of: Vec<usize>, k: usize) -> Result<FoldPlan> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("need K >= 2 folds, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &f in &fold_of {
            if f >= k {
                return Err(Error::InvalidInput(format!("fold index {f} out of range for K = {k}")));
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidInput("every fold must contain at least one observation".into()));
        }
        Ok(FoldPlan { fold_of, k })
    }

    /// Zero-based fold of every observation.
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Check the plan against a treatment vector: matching length and both
    /// arms present in every fold.
    pub fn validate(&self, treatments: &[Arm]) -> Result<()> {
        if treatments.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: treatments.len() });
        }
        let mut counts = vec![[0usize; 2]; self.k];
        for (&f, &w) in self.fold_of.iter().zip(treatments) {
            counts[f][w.index()] += 1;
        }
        for (fold, c) in counts.iter().enumerate() {
            for arm in Arm::BOTH {
                if c[arm.index()] == 0 {
                    return Err(Error::EmptyArm(arm).in_fold(fold));
                }
            }
        }
        Ok(())
    }
}

/// Shuffle each arm with a seeded stream and deal its rows round-robin over
/// the folds. The treated deal continues where the control deal stopped, so
/// total fold sizes also differ by at most one.
pub fn stratified_folds(treatments: &[Arm], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2 folds, got {k}")));
    }
    let mut fold_of = vec![0usize; treatments.len()];
    let mut offset = 0;
    for arm in Arm::BOTH {
        let mut rows = arm_rows(treatments, arm);
        if rows.len() < k {
            return Err(Error::CannotStratify { arm, count: rows.len(), folds: k });
        }
        let mut rng = stream_rng(seed, streams::FOLDS * 2 + arm.index() as u64);
        rows.shuffle(&mut rng);
        for (pos, &i) in rows.iter().enumerate() {
            fold_of[i] = (offset + pos) % k;
        }
        offset = (offset + rows.len()) % k;
    }
    Ok(FoldPlan { fold_of, k })
}
