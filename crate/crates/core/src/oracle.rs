//! Exact reference solvers used to check the production code paths.
//!
//! Nothing in here shares code with the Sinkhorn solver or the analytic
//! gradients: the LP is solved by a dense two-phase simplex, balanced hard
//! assignment by exhaustive search, and gradients by central differences.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const EXACT_OT_MAX_POINTS: usize = 12;
pub const EXACT_OT_MAX_CLUSTERS: usize = 6;
pub const BALANCED_MAX_POINTS: usize = 12;
pub const BALANCED_MAX_CLUSTERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPlan {
    pub plan: Array2<f64>,
    pub objective: f64,
}

/// Global minimizer of `<Gamma, D>` over couplings with row sums `1/N` and
/// column sums `1/J`.
pub fn exact_ot(cost: ArrayView2<'_, f64>) -> Result<ExactPlan> {
    let (n, j) = cost.dim();
    if n == 0 || j == 0 || n > EXACT_OT_MAX_POINTS || j > EXACT_OT_MAX_CLUSTERS {
        return Err(Error::Size(format!(
            "{n} x {j} (limits {EXACT_OT_MAX_POINTS} x {EXACT_OT_MAX_CLUSTERS})"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("cost matrix has non-finite entries".into()));
    }
    // Scale the marginals by N*J so every vertex of the transportation
    // polytope is integral: rows supply J units, columns demand N units.
    let vars = n * j;
    let mut rows = Vec::with_capacity(n + j);
    for i in 0..n {
        let mut a = vec![0.0; vars];
        a[i * j..(i + 1) * j].iter_mut().for_each(|v| *v = 1.0);
        rows.push((a, j as f64));
    }
    for c in 0..j {
        let mut a = vec![0.0; vars];
        for i in 0..n {
            a[i * j + c] = 1.0;
        }
        rows.push((a, n as f64));
    }
    let objective: Vec<f64> = cost.iter().copied().collect();
    let x = simplex_equality(&rows, &objective)?;
    let scale = (n * j) as f64;
    let plan = Array2::from_shape_fn((n, j), |(i, c)| x[i * j + c] / scale);
    let objective = (&plan * &cost).sum();
    Ok(ExactPlan { plan, objective })
}

const PIVOT_EPS: f64 = 1e-9;

/// Minimize `c.x` subject to `A x = b`, `x >= 0`, `b >= 0`, with a two-phase
/// tableau simplex and Bland's rule (no cycling on degenerate vertices).
fn simplex_equality(rows: &[(Vec<f64>, f64)], c: &[f64]) -> Result<Vec<f64>> {
    let m = rows.len();
    let n = c.len();
    let width = n + m + 1;
    let rhs = width - 1;
    let mut t = vec![vec![0.0; width]; m];
    let mut basis: Vec<usize> = (n..n + m).collect();
    for (r, (a, b)) in rows.iter().enumerate() {
        t[r][..n].copy_from_slice(a);
        t[r][n + r] = 1.0;
        t[r][rhs] = *b;
    }

    // Phase I: minimize the sum of artificials.
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run_simplex(&mut t, &mut basis, &phase1, n + m)?;
    let infeasibility: f64 = basis
        .iter()
        .zip(&t)
        .filter(|(&b, _)| b >= n)
        .map(|(_, row)| row[rhs])
        .sum();
    if infeasibility > 1e-7 {
        return Err(Error::Numerical("transport LP is infeasible".into()));
    }

    // Drive zero-level artificials out of the basis; rows where that is
    // impossible are redundant and are dropped.
    let mut r = 0;
    while r < t.len() {
        if basis[r] >= n {
            match (0..n).find(|&col| t[r][col].abs() > PIVOT_EPS) {
                Some(col) => pivot(&mut t, &mut basis, r, col),
                None => {
                    t.remove(r);
                    basis.remove(r);
                    continue;
                }
            }
        }
        r += 1;
    }

    // Phase II over the structural columns only.
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, m));
    run_simplex(&mut t, &mut basis, &phase2, n)?;

    let mut x = vec![0.0; n];
    for (row, &b) in t.iter().zip(&basis) {
        if b < n {
            x[b] = row[rhs];
        }
    }
    Ok(x)
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize) {
    let p = t[row][col];
    t[row].iter_mut().for_each(|v| *v /= p);
    let pivot_row = t[row].clone();
    for (r, other) in t.iter_mut().enumerate() {
        if r == row {
            continue;
        }
        let f = other[col];
        if f != 0.0 {
            other.iter_mut().zip(&pivot_row).for_each(|(v, &pv)| *v -= f * pv);
        }
    }
    basis[row] = col;
}

/// Bland's rule simplex on a tableau already in canonical form for `basis`.
/// Only columns `< enter_limit` may enter.
fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], enter_limit: usize) -> Result<()> {
    let rhs = t.first().map_or(0, |r| r.len() - 1);
    for _ in 0..100_000 {
        // reduced cost r_k = c_k - sum_rows c_B a_rk
        let entering = (0..enter_limit).find(|&k| {
            if basis.contains(&k) {
                return false;
            }
            let reduced = cost[k]
                - t.iter()
                    .zip(basis.iter())
                    .map(|(row, &b)| cost[b] * row[k])
                    .sum::<f64>();
            reduced < -PIVOT_EPS
        });
        let Some(k) = entering else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for (r, row) in t.iter().enumerate() {
            if row[k] > PIVOT_EPS {
                let ratio = row[rhs] / row[k];
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - PIVOT_EPS
                            || ((ratio - lratio).abs() <= PIVOT_EPS && basis[r] < basis[lr])
                        {
                            Some((r, ratio))
                        } else {
                            Some((lr, lratio))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::Numerical("transport LP is unbounded".into()));
        };
        pivot(t, basis, r, k);
    }
    Err(Error::Numerical("simplex iteration limit reached".into()))
}

/// Minimum-cost hard labelling with exactly `N/J` points per cluster, by
/// exhaustive search. Among equal-cost optima the lexicographically smallest
/// label vector wins.
pub fn balanced_hard_assign(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (n, j) = cost.dim();
    if n == 0 || j == 0 || n > BALANCED_MAX_POINTS || j > BALANCED_MAX_CLUSTERS {
        return Err(Error::Size(format!(
            "{n} x {j} (limits {BALANCED_MAX_POINTS} x {BALANCED_MAX_CLUSTERS})"
        )));
    }
    if n % j != 0 {
        return Err(Error::Divisibility {
            points: n,
            clusters: j,
        });
    }
    // Each point takes exactly one label, so subtracting row minima leaves the
    // optimum unchanged and makes every step cost non-negative for pruning.
    let mut shifted = cost.to_owned();
    for mut row in shifted.rows_mut() {
        let min = row.fold(f64::INFINITY, |m, &v| m.min(v));
        row.mapv_inplace(|v| v - min);
    }
    let mut search = BalancedSearch {
        cost: shifted.view(),
        remaining: vec![n / j; j],
        current: Vec::with_capacity(n),
        best: None,
    };
    search.descend(0.0);
    Ok(search.best.expect("a balanced labelling always exists").1)
}

struct BalancedSearch<'a> {
    cost: ArrayView2<'a, f64>,
    remaining: Vec<usize>,
    current: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl BalancedSearch<'_> {
    fn descend(&mut self, partial: f64) {
        let i = self.current.len();
        if i == self.cost.nrows() {
            if self.best.as_ref().is_none_or(|(b, _)| partial < *b) {
                self.best = Some((partial, self.current.clone()));
            }
            return;
        }
        for c in 0..self.cost.ncols() {
            if self.remaining[c] == 0 {
                continue;
            }
            let next = partial + self.cost[[i, c]];
            if self.best.as_ref().is_some_and(|(b, _)| next >= *b) {
                continue;
            }
            self.remaining[c] -= 1;
            self.current.push(c);
            self.descend(next);
            self.current.pop();
            self.remaining[c] += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name of the parameter with the largest relative error.
    pub worst: Option<String>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rel_tol
    }
}

/// Compare `analytic` against central differences of `loss` around `theta`,
/// scoring each coordinate by `|a - fd| / (|a| + 1e-8)`.
pub fn grad_check<F>(
    mut loss: F,
    theta: &[f64],
    analytic: &[f64],
    names: &[String],
    h: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != theta.len() || names.len() != theta.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} names",
            theta.len(),
            analytic.len(),
            names.len()
        )));
    }
    let mut report = GradCheckReport {
        checked: theta.len(),
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        rel_tol,
    };
    let mut probe = theta.to_vec();
    for k in 0..theta.len() {
        probe[k] = theta[k] + h;
        let plus = loss(&probe);
        probe[k] = theta[k] - h;
        let minus = loss(&probe);
        probe[k] = theta[k];
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[k] - numeric).abs() / (analytic[k].abs() + 1e-8);
        if rel > report.max_rel_error || report.worst.is_none() || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = Some(names[k].clone());
            report.worst_analytic = analytic[k];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
