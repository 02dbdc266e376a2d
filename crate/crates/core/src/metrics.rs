//! Accuracy matrix and the stability/plasticity metrics derived from it.
//!
//! Indices are zero-based: `a[i][t]` is the test accuracy on task `i` after
//! training finished on task `t`. Only `i <= t` is required.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seventeen significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            cells: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn from_rows(cells: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let tasks = cells.len();
        if let Some(row) = cells.iter().find(|r| r.len() != tasks) {
            return Err(Error::LengthMismatch {
                what: "accuracy matrix row",
                expected: tasks,
                found: row.len(),
            });
        }
        let m = AccuracyMatrix { tasks, cells };
        m.validate()?;
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.cells.get(task)?.get(after).copied().flatten()
    }

    pub fn set(&mut self, task: usize, after: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::AccuracyOutOfRange { task, after, value });
        }
        let cell = self
            .cells
            .get_mut(task)
            .and_then(|r| r.get_mut(after))
            .ok_or(Error::LengthMismatch {
                what: "accuracy matrix index",
                expected: self.tasks,
                found: task.max(after),
            })?;
        *cell = Some(value);
        Ok(())
    }

    fn require(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after)
            .ok_or(Error::IncompleteMatrix { task, after })
    }

    pub fn validate(&self) -> Result<()> {
        for (task, row) in self.cells.iter().enumerate() {
            for (after, v) in row.iter().enumerate() {
                if let Some(value) = *v {
                    if !(0.0..=1.0).contains(&value) {
                        return Err(Error::AccuracyOutOfRange { task, after, value });
                    }
                }
            }
        }
        Ok(())
    }

    /// `T` lines of `T` comma-separated cells; missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.cells {
            let line: Vec<String> = row
                .iter()
                .map(|v| v.map(fmt_f64).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|e| Error::Csv(format!("line {}: {e}: {cell:?}", n + 1)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        AccuracyMatrix::from_rows(rows)
    }
}

/// Per-task forgetting `F_i = max_{t>=i} a[i][t] − a[i][T−1]` for every task
/// but the last, and their mean.
pub fn forgetting(m: &AccuracyMatrix) -> Result<(Vec<f64>, f64)> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::BadConfig("forgetting needs at least 2 tasks".into()));
    }
    let last = t - 1;
    let mut per_task = Vec::with_capacity(last);
    for i in 0..last {
        let mut peak = f64::NEG_INFINITY;
        for after in i..t {
            peak = peak.max(m.require(i, after)?);
        }
        per_task.push(peak - m.require(i, last)?);
    }
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok((per_task, mean))
}

/// Mean accuracy over all tasks after the last one.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix { task: 0, after: 0 });
    }
    let mut sum = 0.0;
    for i in 0..t {
        sum += m.require(i, t - 1)?;
    }
    Ok(sum / t as f64)
}

/// Mean of the last task's final accuracy and the average final accuracy.
pub fn psm(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix { task: 0, after: 0 });
    }
    let a_final = m.require(t - 1, t - 1)?;
    Ok((a_final + average_accuracy(m)?) / 2.0)
}

/// Mean of `a[i][T−1] − a[i][i]` over all tasks but the last.
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::BadConfig(
            "backward transfer needs at least 2 tasks".into(),
        ));
    }
    let last = t - 1;
    let mut sum = 0.0;
    for i in 0..last {
        sum += m.require(i, last)? - m.require(i, i)?;
    }
    Ok(sum / last as f64)
}

/// Average forgetting over the tasks seen so far, after each task `t >= 1`.
/// Entry `j` of the result belongs to `after = j + 1`.
pub fn forgetting_curve(m: &AccuracyMatrix) -> Result<Vec<f64>> {
    let t = m.tasks();
    let mut curve = Vec::with_capacity(t.saturating_sub(1));
    for after in 1..t {
        let mut sum = 0.0;
        for i in 0..after {
            let mut peak = f64::NEG_INFINITY;
            for s in i..=after {
                peak = peak.max(m.require(i, s)?);
            }
            sum += peak - m.require(i, after)?;
        }
        curve.push(sum / after as f64);
    }
    Ok(curve)
}
