//! Finite zero-sum games. The row player minimizes `cost[r][c]`, the column
//! player maximizes it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        Matrix { rows: rows.len(), cols, data: rows.iter().flatten().cloned().collect() }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolverSpec {
    /// Simplex pivoting on the condensed tableau.
    Exact,
    /// Multiplicative-weights row player against best-responding columns.
    MultiplicativeWeights { iterations: usize },
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec::Exact
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameSolution {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    /// `max_c (row^T cost)_c`: what the row strategy guarantees.
    pub upper: f64,
    /// `min_r (cost col)_r`: what the column strategy guarantees.
    pub lower: f64,
    pub iterations: usize,
}

impl GameSolution {
    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }
}

pub fn solve(cost: &Matrix, spec: SolverSpec) -> Result<GameSolution> {
    match spec {
        SolverSpec::Exact => solve_exact(cost),
        SolverSpec::MultiplicativeWeights { iterations } => Ok(solve_mw(cost, iterations)),
    }
}

fn certify(cost: &Matrix, row: Vec<f64>, col: Vec<f64>, iterations: usize) -> GameSolution {
    let mut upper = f64::NEG_INFINITY;
    for c in 0..cost.cols {
        let v: f64 = (0..cost.rows).filter(|&r| row[r] > 0.0).map(|r| row[r] * cost.at(r, c)).sum();
        upper = upper.max(v);
    }
    let mut lower = f64::INFINITY;
    for r in 0..cost.rows {
        let v: f64 = cost.row(r).iter().zip(&col).map(|(a, b)| a * b).sum();
        lower = lower.min(v);
    }
    GameSolution { row, col, upper, lower, iterations }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

const PIVOT_EPS: f64 = 1e-11;

/// Shifts costs to a positive gain matrix `B = K - cost` and solves
/// `max sum w  s.t.  B w <= 1, w >= 0` on a condensed tableau. The column
/// strategy is `w / sum w`; the row strategy comes from the slack duals.
pub fn solve_exact(cost: &Matrix) -> Result<GameSolution> {
    let (rows, cols) = (cost.rows, cost.cols);
    if rows == 0 || cols == 0 {
        return Err(Error::Solver("empty game".into()));
    }
    let max = cost.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = cost.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = (max - min).max(1e-300);
    // Gains in [1, 2] keep pivots well conditioned.
    let width = cols + 1;
    let mut t = vec![0.0; (rows + 1) * width];
    for r in 0..rows {
        for c in 0..cols {
            t[r * width + c] = 1.0 + (max - cost.at(r, c)) / scale;
        }
        t[r * width + cols] = 1.0;
    }
    for c in 0..cols {
        t[rows * width + c] = -1.0;
    }
    // Labels: 0..cols are the w variables, cols..cols+rows the slacks.
    let mut row_label: Vec<usize> = (0..rows).map(|r| cols + r).collect();
    let mut col_label: Vec<usize> = (0..cols).collect();
    let mut iterations = 0usize;
    let mut degenerate_streak = 0usize;
    let limit = 50 * (rows + cols) + 1000;
    loop {
        let obj = &t[rows * width..rows * width + cols];
        let bland = degenerate_streak > 20;
        let entering = if bland {
            (0..cols).filter(|&c| obj[c] < -PIVOT_EPS).min_by_key(|&c| col_label[c])
        } else {
            let mut best = None;
            let mut best_val = -PIVOT_EPS;
            for (c, &v) in obj.iter().enumerate() {
                if v < best_val {
                    best_val = v;
                    best = Some(c);
                }
            }
            best
        };
        let Some(pc) = entering else { break };
        let mut leaving: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for r in 0..rows {
            let a = t[r * width + pc];
            if a > PIVOT_EPS {
                let ratio = t[r * width + cols] / a;
                let better = match leaving {
                    None => true,
                    Some(l) => {
                        ratio < best_ratio - 1e-14
                            || (ratio <= best_ratio + 1e-14 && row_label[r] < row_label[l])
                    }
                };
                if better {
                    best_ratio = ratio;
                    leaving = Some(r);
                }
            }
        }
        let Some(pr) = leaving else {
            return Err(Error::Solver("unbounded tableau".into()));
        };
        if best_ratio.abs() < 1e-14 {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
        pivot(&mut t, rows + 1, width, pr, pc);
        std::mem::swap(&mut row_label[pr], &mut col_label[pc]);
        iterations += 1;
        if iterations > limit {
            return Err(Error::Solver(format!("no convergence after {limit} pivots")));
        }
    }
    let mut w = vec![0.0; cols];
    for r in 0..rows {
        if row_label[r] < cols {
            w[row_label[r]] = t[r * width + cols];
        }
    }
    let mut u = vec![0.0; rows];
    for c in 0..cols {
        if col_label[c] >= cols {
            u[col_label[c] - cols] = t[rows * width + c];
        }
    }
    Ok(certify(cost, normalized(u), normalized(w), iterations))
}

fn pivot(t: &mut [f64], height: usize, width: usize, pr: usize, pc: usize) {
    let p = t[pr * width + pc];
    let pivot_row: Vec<f64> = t[pr * width..(pr + 1) * width].to_vec();
    for r in 0..height {
        if r == pr {
            continue;
        }
        let factor = t[r * width + pc];
        if factor == 0.0 {
            continue;
        }
        let f = factor / p;
        let row = &mut t[r * width..(r + 1) * width];
        for (c, x) in row.iter_mut().enumerate() {
            if c != pc {
                *x -= f * pivot_row[c];
            }
        }
        row[pc] = -f;
    }
    for c in 0..width {
        if c != pc {
            t[pr * width + c] /= p;
        }
    }
    t[pr * width + pc] = 1.0 / p;
}

/// Hedge over rows with the column best-responding each iteration; returns the
/// averaged row strategy and the empirical column distribution.
pub fn solve_mw(cost: &Matrix, iterations: usize) -> GameSolution {
    let (rows, cols) = (cost.rows, cost.cols);
    let iterations = iterations.max(1);
    let max = cost.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = cost.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = (max - min).max(1e-300);
    let eta = (8.0 * (rows.max(2) as f64).ln() / iterations as f64).sqrt();
    let mut log_w = vec![0.0; rows];
    let mut avg = vec![0.0; rows];
    let mut col_counts = vec![0.0; cols];
    for _ in 0..iterations {
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        let mut best_c = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..cols {
            let v: f64 = (0..rows).map(|r| p[r] * cost.at(r, c)).sum();
            if v > best_v {
                best_v = v;
                best_c = c;
            }
        }
        col_counts[best_c] += 1.0;
        for r in 0..rows {
            avg[r] += p[r];
            log_w[r] -= eta * (cost.at(r, best_c) - min) / span;
        }
    }
    certify(cost, normalized(avg), normalized(col_counts), iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_pennies() {
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let s = solve_exact(&m).unwrap();
        assert!(s.upper.abs() < 1e-12 && s.lower.abs() < 1e-12);
        assert!((s.row[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dominated_row() {
        // Row 1 is always cheaper.
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 2.0], vec![5.0, 0.5]]);
        let s = solve_exact(&m).unwrap();
        assert!(s.gap() < 1e-12);
        let mw = solve_mw(&m, 2000);
        assert!(mw.upper >= s.upper - 1e-12);
        assert!(mw.upper - s.upper < 0.05);
    }

    #[test]
    fn zero_matrix_value_zero() {
        let s = solve_exact(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(s.upper, 0.0);
        assert!((s.row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
