use crate::error::{DpatError, Result};

/// Lower-triangular accuracy matrix: entry `(j, i)`, both 1-based with
/// `i ≤ j`, is the accuracy on task `i`'s test split after training task `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![None; n * n],
        }
    }

    /// Builds a full matrix from rows; row `j` must hold at least `j`
    /// entries and anything beyond the diagonal is ignored.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for (j, row) in rows.iter().enumerate() {
            if row.len() <= j {
                return Err(DpatError::UndefinedMetric(format!("row {} has {} entries", j + 1, row.len())));
            }
            for (i, &v) in row.iter().take(j + 1).enumerate() {
                r.set(j + 1, i + 1, v)?;
            }
        }
        Ok(r)
    }

    pub fn tasks(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, after: usize, task: usize, accuracy: f64) -> Result<()> {
        if task == 0 || task > after || after > self.n {
            return Err(DpatError::Protocol(format!(
                "R[{after}][{task}] lies outside the lower triangle of a {0}x{0} matrix",
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(DpatError::Protocol(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.cells[(after - 1) * self.n + task - 1] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        if after == 0 || task == 0 || after > self.n || task > self.n {
            return None;
        }
        self.cells[(after - 1) * self.n + task - 1]
    }

    /// Number of leading rows that are fully populated.
    pub fn complete_rows(&self) -> usize {
        (1..=self.n)
            .take_while(|&j| (1..=j).all(|i| self.get(j, i).is_some()))
            .count()
    }

    pub fn is_complete(&self) -> bool {
        self.complete_rows() == self.n
    }

    /// Mean over `R[j][1..=j]`: accuracy over seen tasks after task `j`.
    pub fn seen_mean(&self, j: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> = (1..=j).map(|i| self.get(j, i)).collect();
        let vals = vals?;
        Some(vals.iter().sum::<f64>() / j as f64)
    }

    /// Learning curve over the populated rows.
    pub fn curve(&self) -> Vec<f64> {
        (1..=self.complete_rows()).filter_map(|j| self.seen_mean(j)).collect()
    }

    /// `N` lines of `N` comma-separated cells, empty above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 1..=self.n {
            let row: Vec<String> = (1..=self.n)
                .map(|i| self.get(j, i).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut r = Self::new(rows.len());
        for (j, line) in rows.iter().enumerate() {
            for (i, cell) in line.split(',').enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|e| DpatError::Data(format!("bad R cell {cell:?}: {e}")))?;
                r.set(j + 1, i + 1, v)?;
            }
        }
        Ok(r)
    }
}

fn require_complete(r: &AccuracyMatrix) -> Result<()> {
    if r.tasks() == 0 {
        return Err(DpatError::UndefinedMetric("empty accuracy matrix".into()));
    }
    if !r.is_complete() {
        return Err(DpatError::UndefinedMetric(format!(
            "accuracy matrix has {} of {} rows",
            r.complete_rows(),
            r.tasks()
        )));
    }
    Ok(())
}

/// `Acc = (1/N) Σ_i R[N][i]`.
pub fn average_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    require_complete(r)?;
    let n = r.tasks();
    Ok((1..=n).map(|i| r.get(n, i).expect("complete")).sum::<f64>() / n as f64)
}

/// `BWF = (1/(N−1)) Σ_{i<N} (R[i][i] − R[N][i])`; undefined for `N < 2`.
pub fn backward_forgetting(r: &AccuracyMatrix) -> Result<f64> {
    require_complete(r)?;
    let n = r.tasks();
    if n < 2 {
        return Err(DpatError::UndefinedMetric("forgetting needs at least two tasks".into()));
    }
    let sum: f64 = (1..n)
        .map(|i| r.get(i, i).expect("complete") - r.get(n, i).expect("complete"))
        .sum();
    Ok(sum / (n - 1) as f64)
}

/// `(Acc, BWF)`.
pub fn compute_metrics(r: &AccuracyMatrix) -> Result<(f64, f64)> {
    Ok((average_accuracy(r)?, backward_forgetting(r)?))
}
