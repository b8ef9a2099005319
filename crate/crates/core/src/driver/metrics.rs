use crate::error::{Error, Result};

/// Accuracy bookkeeping for a run. `acc[k][j]` is the accuracy on task
/// `j`'s test set after learning task `k` (`j <= k`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub acc: Vec<Vec<f64>>,
    /// Test-set size per task, for sample-weighted seen-class accuracy.
    pub test_counts: Vec<usize>,
    pub aa: Vec<f64>,
    /// Running average incremental accuracy after each task.
    pub aia: Vec<f64>,
    /// Backward forgetting after each task (0 after the first).
    pub bwf: Vec<f64>,
}

impl MetricsTable {
    pub fn tasks(&self) -> usize {
        self.aa.len()
    }

    pub fn final_aia(&self) -> f64 {
        self.aia.last().copied().unwrap_or(0.0)
    }

    pub fn final_aa(&self) -> f64 {
        self.aa.last().copied().unwrap_or(0.0)
    }

    /// Records the row for the task just learned and updates the running
    /// metrics.
    pub fn push(&mut self, row: Vec<f64>, test_count: usize) -> Result<()> {
        if row.len() != self.acc.len() + 1 {
            return Err(Error::State(format!(
                "accuracy row for task {} has {} entries",
                self.acc.len(),
                row.len()
            )));
        }
        self.acc.push(row);
        self.test_counts.push(test_count);
        let m = compute_metrics(&self.acc, &self.test_counts)?;
        self.aa = m.aa;
        self.aia.push(m.aia);
        self.bwf.push(m.bwf);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub aa: Vec<f64>,
    pub aia: f64,
    pub bwf: f64,
}

pub fn aia(aa: &[f64]) -> Result<f64> {
    if aa.is_empty() {
        return Err(Error::Input("AIA needs at least one task".into()));
    }
    Ok(mean(aa))
}

/// Mean rounded once from the exact sum (compensated sum plus an fma residual).
pub fn mean(xs: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &x in xs {
        let s = hi + x;
        lo += if hi.abs() >= x.abs() { (hi - s) + x } else { (x - s) + hi };
        hi = s;
    }
    let n = xs.len() as f64;
    let q = hi / n;
    q + ((-q).mul_add(n, hi) + lo) / n
}

/// `(1/(K-1)) Σ_{j<K} (a[j][j] - a[K][j])`, and 0 for a single task.
pub fn bwf(acc: &[Vec<f64>]) -> Result<f64> {
    let k = acc.len();
    if k == 0 {
        return Err(Error::Input("BWF needs at least one task".into()));
    }
    if k == 1 {
        return Ok(0.0);
    }
    let last = &acc[k - 1];
    let drops: Vec<f64> = (0..k - 1).map(|j| acc[j][j] - last[j]).collect();
    Ok(mean(&drops))
}

/// Seen-class accuracy per task (weighted by test-set size), AIA and BWF
/// from a lower-triangular accuracy matrix.
pub fn compute_metrics(acc: &[Vec<f64>], test_counts: &[usize]) -> Result<Metrics> {
    if acc.is_empty() {
        return Err(Error::Input("metrics need K >= 1".into()));
    }
    if test_counts.len() != acc.len() {
        return Err(Error::shape("compute_metrics", &[acc.len()], &[test_counts.len()]));
    }
    let mut aa = Vec::with_capacity(acc.len());
    for (k, row) in acc.iter().enumerate() {
        if row.len() < k + 1 {
            return Err(Error::Input(format!("accuracy row {k} is not filled up to the diagonal")));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input(format!("accuracy row {k} leaves [0, 1]")));
        }
        let n: usize = test_counts[..=k].iter().sum();
        if n == 0 {
            return Err(Error::Input("empty test sets".into()));
        }
        let hits: f64 = (0..=k).map(|j| row[j] * test_counts[j] as f64).sum();
        aa.push(hits / n as f64);
    }
    Ok(Metrics {
        aia: aia(&aa)?,
        bwf: bwf(acc)?,
        aa,
    })
}
