//! Gradient-conflict statistics: per-step pair outcomes, per-epoch
//! summaries, pairwise affinity matrices and variance across sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_mto::{is_conflicting, GradientSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub i: usize,
    pub j: usize,
    pub cosine: f64,
    pub conflicting: bool,
    pub degenerate: bool,
}

/// Outcomes for every unordered task pair at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConflicts {
    pub task_count: usize,
    pub pairs: Vec<PairOutcome>,
}

/// Tests all `T(T-1)/2` unordered pairs of a gradient set. Pair indices are
/// positions in the set.
pub fn record_step(set: &GradientSet) -> StepConflicts {
    let t = set.len();
    let mut pairs = Vec::with_capacity(t * t.saturating_sub(1) / 2);
    for i in 0..t {
        for j in i + 1..t {
            let c = is_conflicting(&set.grads[i], &set.grads[j]);
            pairs.push(PairOutcome {
                i,
                j,
                cosine: c.cosine,
                conflicting: c.conflicting,
                degenerate: c.degenerate,
            });
        }
    }
    StepConflicts { task_count: t, pairs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub epoch: usize,
    pub total: usize,
    pub conflicting: usize,
    pub fraction: f64,
    /// Symmetric `T x T` conflicting-observation counts, zero diagonal.
    pub pair_conflicts: Vec<Vec<usize>>,
    /// Symmetric `T x T` observation counts, zero diagonal.
    pub pair_totals: Vec<Vec<usize>>,
}

impl ConflictRecord {
    /// Per-pair conflict fraction; `None` where the pair was never observed.
    pub fn pair_fraction(&self, i: usize, j: usize) -> Option<f64> {
        let n = self.pair_totals[i][j];
        (n > 0).then(|| self.pair_conflicts[i][j] as f64 / n as f64)
    }

    pub fn task_count(&self) -> usize {
        self.pair_totals.len()
    }
}

/// Aggregates the pair observations of one epoch.
pub fn epoch_summary(epoch: usize, steps: &[StepConflicts]) -> Result<ConflictRecord> {
    let t = steps
        .first()
        .ok_or_else(|| Error::data("epoch summary needs at least one step"))?
        .task_count;
    let mut pair_conflicts = vec![vec![0usize; t]; t];
    let mut pair_totals = vec![vec![0usize; t]; t];
    let (mut total, mut conflicting) = (0, 0);
    for s in steps {
        if s.task_count != t {
            return Err(Error::data("steps of one epoch disagree on the task count"));
        }
        for p in &s.pairs {
            total += 1;
            pair_totals[p.i][p.j] += 1;
            pair_totals[p.j][p.i] += 1;
            if p.conflicting {
                conflicting += 1;
                pair_conflicts[p.i][p.j] += 1;
                pair_conflicts[p.j][p.i] += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::data("epoch has no pair observations"));
    }
    Ok(ConflictRecord {
        epoch,
        total,
        conflicting,
        fraction: conflicting as f64 / total as f64,
        pair_conflicts,
        pair_totals,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Entry `(i, j)` is the median over epochs of the pair's conflict fraction
/// (epochs where the pair was not observed are skipped).
pub fn affinity_matrix(records: &[ConflictRecord]) -> Result<Vec<Vec<f64>>> {
    let t = records
        .first()
        .ok_or_else(|| Error::data("affinity matrix needs at least one epoch"))?
        .task_count();
    let mut m = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in i + 1..t {
            let values: Vec<f64> = records.iter().filter_map(|r| r.pair_fraction(i, j)).collect();
            let v = median(&values).unwrap_or(0.0);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Median of each row's off-diagonal entries.
pub fn row_medians(matrix: &[Vec<f64>]) -> Vec<f64> {
    matrix
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let off: Vec<f64> = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
            median(&off).unwrap_or(0.0)
        })
        .collect()
}

/// Per-epoch conflict fractions of a set of runs indexed by hyperparameter
/// values, one value per named axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunGrid {
    pub axes: Vec<String>,
    pub cells: BTreeMap<Vec<String>, Vec<f64>>,
}

impl RunGrid {
    pub fn new(axes: Vec<String>) -> Self {
        Self {
            axes,
            cells: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, values: Vec<String>, fractions: Vec<f64>) -> Result<()> {
        if values.len() != self.axes.len() {
            return Err(Error::Dimension {
                context: "run grid key",
                expected: self.axes.len(),
                actual: values.len(),
            });
        }
        self.cells.insert(values, fractions);
        Ok(())
    }
}

/// For every fixed combination of the other axes, the population variance
/// across `axis` of the time-averaged conflict fraction; returns the median
/// of these variances.
pub fn variance_analysis(grid: &RunGrid, axis: &str) -> Result<f64> {
    let k = grid
        .axes
        .iter()
        .position(|a| a == axis)
        .ok_or_else(|| Error::config(format!("unknown axis '{axis}'")))?;
    let axis_values: BTreeSet<&String> = grid.cells.keys().map(|key| &key[k]).collect();
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for (key, fractions) in &grid.cells {
        if fractions.is_empty() {
            return Err(Error::data(format!("run {key:?} has no epochs")));
        }
        let mut rest = key.clone();
        rest.remove(k);
        let avg = fractions.iter().sum::<f64>() / fractions.len() as f64;
        groups.entry(rest).or_default().push(avg);
    }
    let mut missing = Vec::new();
    for rest in groups.keys() {
        for v in &axis_values {
            let mut key = rest.clone();
            key.insert(k, (*v).clone());
            if !grid.cells.contains_key(&key) {
                let cell: Vec<String> = grid.axes.iter().zip(&key).map(|(a, v)| format!("{a}={v}")).collect();
                missing.push(cell.join(","));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteGrid {
            axis: axis.to_string(),
            missing,
        });
    }
    let variances: Vec<f64> = groups
        .values()
        .map(|avgs| {
            let n = avgs.len() as f64;
            let mean = avgs.iter().sum::<f64>() / n;
            avgs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n
        })
        .collect();
    median(&variances).ok_or_else(|| Error::data("empty run grid"))
}

/// Observer collecting per-step conflicts every `stride` steps and closing
/// them into one record per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictProfiler {
    stride: usize,
    pending: Vec<StepConflicts>,
    records: Vec<ConflictRecord>,
}

impl ConflictProfiler {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("profiler stride must be positive"));
        }
        Ok(Self {
            stride,
            pending: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn wants(&self, step_in_epoch: usize) -> bool {
        step_in_epoch % self.stride == 0
    }

    pub fn observe(&mut self, set: &GradientSet) {
        self.pending.push(record_step(set));
    }

    pub fn finish_epoch(&mut self, epoch: usize) -> Result<Option<&ConflictRecord>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let rec = epoch_summary(epoch, &std::mem::take(&mut self.pending))?;
        self.records.push(rec);
        Ok(self.records.last())
    }

    pub fn records(&self) -> &[ConflictRecord] {
        &self.records
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fraction).collect()
    }
}

/// Per-epoch CSV: `epoch, fraction, conflict_<i>_<j>` (pair fractions, empty
/// when the pair was not observed).
pub fn write_conflict_csv<W: Write>(writer: W, records: &[ConflictRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let t = records.first().map(ConflictRecord::task_count).unwrap_or(0);
    let mut header = vec!["epoch".to_string(), "fraction".to_string()];
    for i in 0..t {
        for j in i + 1..t {
            header.push(format!("conflict_{i}_{j}"));
        }
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.fraction.to_string()];
        for i in 0..t {
            for j in i + 1..t {
                row.push(r.pair_fraction(i, j).map(|v| v.to_string()).unwrap_or_default());
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(conflicts: &[bool]) -> StepConflicts {
        StepConflicts {
            task_count: 2,
            pairs: conflicts
                .iter()
                .map(|c| PairOutcome {
                    i: 0,
                    j: 1,
                    cosine: if *c { -0.5 } else { 0.5 },
                    conflicting: *c,
                    degenerate: false,
                })
                .collect(),
        }
    }

    #[test]
    fn pair_counts() {
        let g = |t: usize| GradientSet::new((0..t).map(|k| vec![k as f64 + 1.0, 1.0]).collect()).unwrap();
        assert_eq!(record_step(&g(2)).pairs.len(), 1);
        assert_eq!(record_step(&g(6)).pairs.len(), 15);
        let same = GradientSet::new(vec![vec![1.0, -2.0]; 4]).unwrap();
        assert!(record_step(&same).pairs.iter().all(|p| !p.conflicting));
    }

    #[test]
    fn ten_steps_four_conflicts() {
        let steps: Vec<StepConflicts> = (0..10).map(|k| step(&[k < 4])).collect();
        let r = epoch_summary(3, &steps).unwrap();
        assert_eq!((r.total, r.conflicting), (10, 4));
        assert_eq!(r.fraction, 0.4);
        assert_eq!(r.pair_conflicts[0][0], 0);
        assert_eq!(r.pair_conflicts[0][1], r.pair_conflicts[1][0]);
    }

    #[test]
    fn hand_variance() {
        let mut grid = RunGrid::new(vec!["lr".into(), "width".into()]);
        grid.insert(vec!["a".into(), "w1".into()], vec![0.1]).unwrap();
        grid.insert(vec!["b".into(), "w1".into()], vec![0.3]).unwrap();
        grid.insert(vec!["a".into(), "w2".into()], vec![0.2]).unwrap();
        grid.insert(vec!["b".into(), "w2".into()], vec![0.1, 0.3]).unwrap();
        let v = variance_analysis(&grid, "lr").unwrap();
        assert!((v - 0.005).abs() < 1e-15, "{v}");
    }

    #[test]
    fn incomplete_grid_lists_cells() {
        let mut grid = RunGrid::new(vec!["lr".into(), "width".into()]);
        grid.insert(vec!["a".into(), "w1".into()], vec![0.1]).unwrap();
        grid.insert(vec!["b".into(), "w1".into()], vec![0.3]).unwrap();
        grid.insert(vec!["a".into(), "w2".into()], vec![0.2]).unwrap();
        match variance_analysis(&grid, "lr") {
            Err(Error::IncompleteGrid { missing, .. }) => assert_eq!(missing, vec!["lr=b,width=w2".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_columns() {
        let r = epoch_summary(0, &[step(&[true])]).unwrap();
        let mut buf = Vec::new();
        write_conflict_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,fraction,conflict_0_1\n0,1,1\n");
    }
}
