use nalgebra::{DMatrix, DVector};

/// Sufficient statistics of a least-squares problem on centered data:
/// `X^T X`, `X^T y`, `y^T y` and the row count.
#[derive(Debug, Clone)]
pub(crate) struct SuffStats {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
}

impl SuffStats {
    pub fn zeros(p: usize) -> SuffStats {
        SuffStats { gram: DMatrix::zeros(p, p), xty: DVector::zeros(p), yty: 0.0, n: 0 }
    }

    pub fn from_rows(x: &DMatrix<f64>, y: &[f64]) -> SuffStats {
        let xt = x.transpose();
        let yv = DVector::from_column_slice(y);
        SuffStats { gram: &xt * x, xty: &xt * &yv, yty: yv.norm_squared(), n: y.len() }
    }

    pub fn p(&self) -> usize {
        self.xty.len()
    }

    pub fn add_assign(&mut self, other: &SuffStats) {
        self.gram += &other.gram;
        self.xty += &other.xty;
        self.yty += other.yty;
        self.n += other.n;
    }

    /// Statistics of the augmented design `[X | (2W - 1) X]` built from
    /// per-arm statistics.
    pub fn joint(control: &SuffStats, treated: &SuffStats) -> SuffStats {
        let p = control.p();
        let main = &control.gram + &treated.gram;
        let cross = &treated.gram - &control.gram;
        let mut gram = DMatrix::zeros(2 * p, 2 * p);
        gram.view_mut((0, 0), (p, p)).copy_from(&main);
        gram.view_mut((p, p), (p, p)).copy_from(&main);
        gram.view_mut((0, p), (p, p)).copy_from(&cross);
        gram.view_mut((p, 0), (p, p)).copy_from(&cross);
        let mut xty = DVector::zeros(2 * p);
        xty.rows_mut(0, p).copy_from(&(&control.xty + &treated.xty));
        xty.rows_mut(p, p).copy_from(&(&treated.xty - &control.xty));
        SuffStats { gram, xty, yty: control.yty + treated.yty, n: control.n + treated.n }
    }

    /// `||y - X b||^2` from the statistics alone.
    pub fn rss(&self, b: &DVector<f64>) -> f64 {
        let nz: Vec<usize> = (0..b.len()).filter(|&j| b[j] != 0.0).collect();
        let mut quad = 0.0;
        for &j in &nz {
            let col = self.gram.column(j);
            let s: f64 = nz.iter().map(|&k| col[k] * b[k]).sum();
            quad += b[j] * s;
        }
        let lin: f64 = nz.iter().map(|&j| b[j] * self.xty[j]).sum();
        (self.yty - 2.0 * lin + quad).max(0.0)
    }
}
