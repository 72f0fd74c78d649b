//! Maximum-score bipartite assignment.
//!
//! [`solve_hungarian`] runs the potential-based Hungarian method on negated
//! scores and then walks rows in order, pinning each to the smallest column
//! that still admits an optimal completion. The result is the
//! lexicographically smallest optimal assignment, which makes tracking runs
//! reproducible when scores tie (e.g. repeated unidentified columns).
//! [`solve_bruteforce`] enumerates every injective mapping and serves as the
//! oracle for the former.

use crate::error::{DanError, Result};

/// Largest side accepted by the exhaustive solver.
pub const BRUTEFORCE_MAX: usize = 9;

/// Scores of a `rows × cols` problem, `rows ≤ cols`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentProblem {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

/// Row `i` is assigned to column `cols[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub cols: Vec<usize>,
    pub total: f64,
}

impl AssignmentProblem {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(DanError::Shape(format!(
                "{rows}x{cols} problem needs {} scores, got {}",
                rows * cols,
                scores.len()
            )));
        }
        if rows > cols {
            return Err(DanError::Shape(format!("more rows ({rows}) than columns ({cols})")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(DanError::Contract("assignment scores must be finite".into()));
        }
        Ok(AssignmentProblem { rows, cols, scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(DanError::Shape("ragged score rows".into()));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn score(&self, r: usize, c: usize) -> f64 {
        self.scores[r * self.cols + c]
    }

    pub fn total(&self, cols: &[usize]) -> f64 {
        cols.iter().enumerate().map(|(r, &c)| self.score(r, c)).sum()
    }

    /// Absolute slack under which two totals count as equal.
    fn tolerance(&self) -> f64 {
        let scale = self.scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        1e-9 * (1.0 + scale * self.rows as f64)
    }
}

/// Minimum-cost assignment of every row of `cost` (n × m, n ≤ m) using the
/// shortest-augmenting-path formulation with row/column potentials.
fn min_cost_assignment(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Best total over rows `free_rows` restricted to `free_cols`.
fn best_total(p: &AssignmentProblem, free_rows: &[usize], free_cols: &[usize]) -> f64 {
    let (n, m) = (free_rows.len(), free_cols.len());
    let mut cost = Vec::with_capacity(n * m);
    for &r in free_rows {
        for &c in free_cols {
            cost.push(-p.score(r, c));
        }
    }
    min_cost_assignment(&cost, n, m)
        .iter()
        .enumerate()
        .map(|(k, &j)| p.score(free_rows[k], free_cols[j]))
        .sum()
}

/// Some optimal assignment, without the lexicographic tie-break. Use when
/// only the total (or any maximizer) matters and problems are large.
pub fn max_total_assignment(p: &AssignmentProblem) -> Assignment {
    let cost: Vec<f64> = p.scores.iter().map(|s| -s).collect();
    let cols = min_cost_assignment(&cost, p.rows, p.cols);
    Assignment {
        total: p.total(&cols),
        cols,
    }
}

/// Optimal assignment; among optima, the lexicographically smallest column
/// vector.
pub fn solve_hungarian(p: &AssignmentProblem) -> Result<Assignment> {
    let (n, m) = (p.rows, p.cols);
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let cost: Vec<f64> = p.scores.iter().map(|s| -s).collect();
    let mut current = min_cost_assignment(&cost, n, m);
    let optimum = p.total(&current);
    let tol = p.tolerance();

    // Pin rows in order to the smallest column with an optimal completion.
    let mut taken = vec![false; m];
    let mut fixed = 0.0;
    for r in 0..n {
        let rest_rows = &all_rows[r + 1..];
        for c in 0..current[r] {
            if taken[c] {
                continue;
            }
            let rest_cols: Vec<usize> = all_cols.iter().copied().filter(|&k| !taken[k] && k != c).collect();
            let total = fixed + p.score(r, c) + best_total(p, rest_rows, &rest_cols);
            if total >= optimum - tol {
                // Re-solve the remainder so later rows start from an optimal completion.
                let mut cost = Vec::with_capacity(rest_rows.len() * rest_cols.len());
                for &rr in rest_rows {
                    for &cc in &rest_cols {
                        cost.push(-p.score(rr, cc));
                    }
                }
                let sub = min_cost_assignment(&cost, rest_rows.len(), rest_cols.len());
                current[r] = c;
                for (k, &j) in sub.iter().enumerate() {
                    current[r + 1 + k] = rest_cols[j];
                }
                break;
            }
        }
        taken[current[r]] = true;
        fixed += p.score(r, current[r]);
    }
    Ok(Assignment {
        total: p.total(&current),
        cols: current,
    })
}

pub fn solve_bruteforce(p: &AssignmentProblem) -> Result<Assignment> {
    if p.cols > BRUTEFORCE_MAX {
        return Err(DanError::TooLarge { rows: p.rows, cols: p.cols });
    }
    let tol = p.tolerance();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack = Vec::with_capacity(p.rows);
    let mut used = vec![false; p.cols];

    fn walk(
        p: &AssignmentProblem,
        tol: f64,
        stack: &mut Vec<usize>,
        used: &mut [bool],
        partial: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if stack.len() == p.rows {
            // Enumeration is lexicographic, so only a strictly better total replaces.
            if best.as_ref().is_none_or(|(b, _)| partial > *b + tol) {
                *best = Some((partial, stack.clone()));
            }
            return;
        }
        let r = stack.len();
        for c in 0..p.cols {
            if used[c] {
                continue;
            }
            used[c] = true;
            stack.push(c);
            walk(p, tol, stack, used, partial + p.score(r, c), best);
            stack.pop();
            used[c] = false;
        }
    }

    walk(p, tol, &mut stack, &mut used, 0.0, &mut best);
    let (_, cols) = best.unwrap_or_default();
    Ok(Assignment {
        total: p.total(&cols),
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob(rows: &[Vec<f64>]) -> AssignmentProblem {
        AssignmentProblem::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matrix() {
        let a = solve_hungarian(&prob(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(a.cols, vec![0, 1]);
        assert_eq!(a.total, 2.0);
    }

    #[test]
    fn single_cell() {
        assert_eq!(solve_hungarian(&prob(&[vec![5.0]])).unwrap().cols, vec![0]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let p = prob(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(solve_bruteforce(&p).unwrap().cols, vec![0, 1]);
        assert_eq!(solve_hungarian(&p).unwrap().cols, vec![0, 1]);
    }

    #[test]
    fn wide_single_row() {
        let p = prob(&[vec![1.0, 9.0, 2.0]]);
        assert_eq!(solve_bruteforce(&p).unwrap().cols, vec![1]);
        assert_eq!(solve_hungarian(&p).unwrap().cols, vec![1]);
    }

    #[test]
    fn repeated_columns_pick_first_copies() {
        let p = prob(&[vec![0.0, 1.0, 1.0, 1.0], vec![0.0, 1.0, 1.0, 1.0], vec![5.0, 0.0, 0.0, 0.0]]);
        assert_eq!(solve_hungarian(&p).unwrap().cols, vec![1, 2, 0]);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            AssignmentProblem::new(2, 1, vec![0.0, 0.0]),
            Err(DanError::Shape(_))
        ));
        let big = AssignmentProblem::new(1, 10, vec![0.0; 10]).unwrap();
        assert!(matches!(solve_bruteforce(&big), Err(DanError::TooLarge { .. })));
        assert!(AssignmentProblem::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn empty_problem() {
        let p = AssignmentProblem::new(0, 3, vec![]).unwrap();
        assert!(solve_hungarian(&p).unwrap().cols.is_empty());
        assert!(solve_bruteforce(&p).unwrap().cols.is_empty());
    }
}
