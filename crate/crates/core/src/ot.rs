//! Prototype estimation, transport costs and soft-label assignment.
//!
//! Points are softly assigned to `J` clusters by solving an entropically
//! regularized optimal-transport problem whose marginals force every cluster
//! to receive the same share of the cloud. The cost of sending point `i` to
//! cluster `j` mixes its squared distance to the cluster's geometric
//! prototype and to its feature prototype.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column mass below which a prototype falls back to the global mean.
pub const EMPTY_CLUSTER_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub iters: usize,
    pub tol: f64,
    pub lambda: f64,
    pub learn_lambda: bool,
    pub clusters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            iters: 20,
            tol: 1e-6,
            lambda: 0.5,
            learn_lambda: false,
            clusters: 64,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.clusters < 2 {
            return Err(Error::Config(format!("need at least 2 clusters, got {}", self.clusters)));
        }
        Ok(())
    }
}

/// Score-weighted cluster centroids in coordinate and feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `J x 3`
    pub geometric: Array2<f64>,
    /// `J x d`
    pub feature: Array2<f64>,
}

impl Prototypes {
    pub fn clusters(&self) -> usize {
        self.geometric.nrows()
    }
}

fn weighted_centroids(
    values: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    mass: &Array1<f64>,
) -> Array2<f64> {
    let mut centroids = scores.t().dot(&values);
    let fallback = values.mean_axis(Axis(0)).expect("at least one row");
    for (mut row, &m) in centroids.rows_mut().into_iter().zip(mass) {
        if m < EMPTY_CLUSTER_MASS {
            row.assign(&fallback);
        } else {
            row.mapv_inplace(|v| v / m);
        }
    }
    centroids
}

fn check_rows(points: ArrayView2<'_, f64>, features: ArrayView2<'_, f64>, scores: ArrayView2<'_, f64>) -> Result<()> {
    if points.ncols() != 3 {
        return Err(Error::Shape(format!("points must be N x 3, got {:?}", points.dim())));
    }
    let n = points.nrows();
    if n == 0 || features.nrows() != n || scores.nrows() != n {
        return Err(Error::Shape(format!(
            "row counts differ: points {}, features {}, scores {}",
            n,
            features.nrows(),
            scores.nrows()
        )));
    }
    Ok(())
}

/// `c_j = sum_i s_ij x_i / sum_i s_ij` in both spaces.
pub fn compute_prototypes(
    points: ArrayView2<'_, f64>,
    features: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
) -> Result<Prototypes> {
    check_rows(points, features, scores)?;
    let mass = scores.sum_axis(Axis(0));
    Ok(Prototypes {
        geometric: weighted_centroids(points, scores, &mass),
        feature: weighted_centroids(features, scores, &mass),
    })
}

/// Pull gradients on the prototypes back onto the scores and features.
///
/// Returns `(dL/dS, dL/dF)`. Points are constants. Fallback prototypes (empty
/// clusters) do not depend on the scores; they pass `1/N` of their gradient
/// to every feature row.
pub fn prototypes_backward(
    points: ArrayView2<'_, f64>,
    features: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    protos: &Prototypes,
    d_geometric: ArrayView2<'_, f64>,
    d_feature: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_rows(points, features, scores)?;
    if d_geometric.dim() != protos.geometric.dim() || d_feature.dim() != protos.feature.dim() {
        return Err(Error::Shape("prototype gradients do not match prototypes".into()));
    }
    let n = points.nrows();
    let mass = scores.sum_axis(Axis(0));
    let live: Vec<bool> = mass.iter().map(|&m| m >= EMPTY_CLUSTER_MASS).collect();

    // dc_j/ds_ij = (x_i - c_j) / m_j, so dS_ij = <g_j, x_i - c_j> / m_j
    //            = (<g_j, x_i> - <g_j, c_j>) / m_j.
    let mut d_scores = points.dot(&d_geometric.t()) + features.dot(&d_feature.t());
    for (j, mut col) in d_scores.columns_mut().into_iter().enumerate() {
        if !live[j] {
            col.fill(0.0);
            continue;
        }
        let offset = d_geometric.row(j).dot(&protos.geometric.row(j))
            + d_feature.row(j).dot(&protos.feature.row(j));
        col.mapv_inplace(|v| (v - offset) / mass[j]);
    }

    // dF_i = sum_j (s_ij / m_j) g_j
    let mut weights = scores.to_owned();
    let mut fallback = Array1::<f64>::zeros(d_feature.ncols());
    for (j, mut col) in weights.columns_mut().into_iter().enumerate() {
        if live[j] {
            col.mapv_inplace(|v| v / mass[j]);
        } else {
            col.fill(0.0);
            fallback.scaled_add(1.0 / n as f64, &d_feature.row(j));
        }
    }
    let mut d_features = weights.dot(&d_feature);
    d_features += &fallback;
    Ok((d_scores, d_features))
}

/// `D = lambda * D^E + (1 - lambda) * D^F`, with both parts kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub geometric: Array2<f64>,
    pub feature: Array2<f64>,
    pub lambda: f64,
}

impl CostMatrix {
    /// A bare cost matrix with no geometric/feature decomposition.
    pub fn from_values(values: Array2<f64>) -> Self {
        let geometric = values.clone();
        let feature = Array2::zeros(values.dim());
        Self {
            values,
            geometric,
            feature,
            lambda: 1.0,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

fn squared_distances(rows: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((rows.nrows(), centers.nrows()), |(i, j)| {
        rows.row(i)
            .iter()
            .zip(centers.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

pub fn compute_cost(
    points: ArrayView2<'_, f64>,
    features: ArrayView2<'_, f64>,
    protos: &Prototypes,
    lambda: f64,
) -> Result<CostMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if features.nrows() != points.nrows()
        || protos.feature.ncols() != features.ncols()
        || protos.geometric.ncols() != points.ncols()
    {
        return Err(Error::Shape("points, features and prototypes disagree".into()));
    }
    let geometric = squared_distances(points, protos.geometric.view());
    let feature = squared_distances(features, protos.feature.view());
    let values = &geometric * lambda + &feature * (1.0 - lambda);
    Ok(CostMatrix {
        values,
        geometric,
        feature,
        lambda,
    })
}

/// A coupling between `N` points (mass `1/N` each) and `J` clusters
/// (mass `1/J` each).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub gamma: Array2<f64>,
}

impl TransportPlan {
    pub fn row_residual(&self) -> f64 {
        let target = 1.0 / self.gamma.nrows() as f64;
        max_deviation(&self.gamma.sum_axis(Axis(1)), target)
    }

    pub fn col_residual(&self) -> f64 {
        let target = 1.0 / self.gamma.ncols() as f64;
        max_deviation(&self.gamma.sum_axis(Axis(0)), target)
    }

    pub fn max_marginal_residual(&self) -> f64 {
        self.row_residual().max(self.col_residual())
    }

    /// `<Gamma, D>`
    pub fn cost(&self, d: ArrayView2<'_, f64>) -> f64 {
        (&self.gamma * &d).sum()
    }
}

fn max_deviation(sums: &Array1<f64>, target: f64) -> f64 {
    sums.iter().fold(0.0, |m, &s| m.max((s - target).abs()))
}

/// Entropic OT by alternating row/column scaling, exactly `iters` rounds.
///
/// The kernel is `exp(-(D_ij - a_i - b_j) / eps)` with `a_i` the row minima
/// and `b_j` the column minima of `D - a`. Those shifts are absorbed by the
/// scalings, and they put a unit entry in every row and every column, so no
/// marginal can underflow to zero even when `D / eps` spans thousands.
pub fn sinkhorn(cost: ArrayView2<'_, f64>, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    if iters == 0 {
        return Err(Error::Config("sinkhorn needs at least one iteration".into()));
    }
    let mut solver = Scaling::new(cost, epsilon)?;
    for _ in 0..iters {
        solver.round()?;
    }
    Ok(solver.finish())
}

/// Solve until both marginal residuals are below `tol`. Returns the plan and
/// the total number of rounds (scaling rounds plus Newton steps).
///
/// Plain scaling converges very slowly once `D / eps` spans hundreds and
/// the optimum is nearly degenerate. This works on log-domain potentials,
/// anneals epsilon down from the cost range, and at each stage follows a few
/// scaling rounds with Newton steps on the column potentials. The entropic
/// optimum for a given epsilon is unique, so the result is the fixed point
/// [`sinkhorn`] converges to.
pub fn sinkhorn_to_tolerance(
    cost: ArrayView2<'_, f64>,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(TransportPlan, usize)> {
    check_cost(cost, epsilon)?;
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    let (n, j) = cost.dim();
    let range = cost.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - cost.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let mut stages = vec![epsilon];
    while stages.last().is_some_and(|&e| e < range) {
        let e = stages.last().unwrap() * 3.0;
        stages.push(e);
    }
    stages.reverse();

    let mut pot = Potentials {
        cost,
        f: Array1::zeros(n),
        g: Array1::zeros(j),
        log_row: -(n as f64).ln(),
        log_col: -(j as f64).ln(),
    };
    let mut rounds = 0;
    let last = stages.len() - 1;
    for (k, &eps) in stages.iter().enumerate() {
        let stage_tol = if k == last { tol } else { tol.max(1e-5 / n as f64) };
        for _ in 0..SETTLE_ROUNDS {
            if pot.row_residual_then_update(eps, stage_tol) {
                break;
            }
            rounds += 1;
        }
        loop {
            let residual = pot.newton_step(eps, stage_tol)?;
            if residual < stage_tol {
                break;
            }
            rounds += 1;
            if rounds >= max_iters {
                return Err(Error::Numerical(format!(
                    "sinkhorn did not reach residual {tol:e} in {max_iters} rounds (at {residual:e})"
                )));
            }
        }
    }
    Ok((pot.plan(epsilon), rounds))
}

fn check_cost(cost: ArrayView2<'_, f64>, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let (n, j) = cost.dim();
    if n == 0 || j == 0 {
        return Err(Error::Shape(format!("empty cost matrix {:?}", cost.dim())));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

const SETTLE_ROUNDS: usize = 20;

/// Dual potentials; the plan is `exp((f_i + g_j - D_ij) / eps)`.
struct Potentials<'a> {
    cost: ArrayView2<'a, f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    log_row: f64,
    log_col: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Potentials<'_> {
    fn row_lse(&self, i: usize, eps: f64) -> f64 {
        let row = self.cost.row(i);
        log_sum_exp(row.iter().zip(&self.g).map(|(&d, &g)| (g - d) / eps))
    }

    /// Set every `f_i` so row `i` sums exactly to its target; returns the
    /// row-stochastic weights `p_i = softmax_j((g_j - D_ij) / eps)`.
    fn fit_rows(&mut self, eps: f64) -> Array2<f64> {
        let mut p = self.cost.to_owned();
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let lse = self.row_lse(i, eps);
            self.f[i] = eps * (self.log_row - lse);
            for (v, &g) in row.iter_mut().zip(&self.g) {
                *v = ((g - *v) / eps - lse).exp();
            }
        }
        p
    }

    /// Dual objective with `f` eliminated; concave in `g`.
    fn semi_dual(&self, g: &Array1<f64>, eps: f64) -> f64 {
        let b = self.log_col.exp();
        let a = self.log_row.exp();
        let rows: f64 = self
            .cost
            .rows()
            .into_iter()
            .map(|row| eps * (self.log_row - log_sum_exp(row.iter().zip(g).map(|(&d, &g)| (g - d) / eps))))
            .sum();
        a * rows + b * g.sum()
    }

    /// One damped Newton step on `g` (then rows refit). Returns the largest
    /// column residual after the step, or before it if already below `tol`.
    fn newton_step(&mut self, eps: f64, tol: f64) -> Result<f64> {
        let j = self.g.len();
        let a = self.log_row.exp();
        let b = self.log_col.exp();
        let p = self.fit_rows(eps);
        let grad: Array1<f64> = p.sum_axis(Axis(0)).mapv(|c| b - a * c);
        let residual = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual < tol {
            return Ok(residual);
        }
        // Negated Hessian: sum_i a (diag p_i - p_i p_i^T) / eps.
        let mut h = nalgebra::DMatrix::<f64>::zeros(j, j);
        for row in p.rows() {
            for r in 0..j {
                h[(r, r)] += row[r];
                for c in 0..j {
                    h[(r, c)] -= row[r] * row[c];
                }
            }
        }
        h *= a / eps;
        // The all-ones direction is a null space; a ridge removes it. Grow the
        // ridge until rounding no longer spoils positive definiteness.
        let scale = (0..j).fold(0.0f64, |m, r| m.max(h[(r, r)])).max(f64::MIN_POSITIVE);
        let rhs = nalgebra::DVector::from_iterator(j, grad.iter().copied());
        let mut ridge = 1e-10 * scale;
        let step = loop {
            let mut damped = h.clone();
            for r in 0..j {
                damped[(r, r)] += ridge;
            }
            if let Some(chol) = damped.cholesky() {
                break chol.solve(&rhs);
            }
            ridge *= 100.0;
            if ridge > scale {
                return Err(Error::Numerical("Newton system is not positive definite".into()));
            }
        };
        let step = Array1::from_iter(step.iter().copied());
        let slope = grad.dot(&step);
        let base = self.semi_dual(&self.g, eps);
        let slack = 4.0 * f64::EPSILON * (base.abs() + 1.0);
        let mut t = 1.0;
        let mut candidate = &self.g + &step;
        for _ in 0..60 {
            if self.semi_dual(&candidate, eps) >= base + 1e-4 * t * slope - slack {
                break;
            }
            t *= 0.5;
            candidate = &self.g + &(&step * t);
        }
        self.g = candidate;
        let p = self.fit_rows(eps);
        let cols = p.sum_axis(Axis(0));
        Ok(cols.iter().fold(0.0f64, |m, &c| m.max((b - a * c).abs())))
    }

    /// Returns true if the current plan already meets `tol`; otherwise
    /// performs one row and one column update.
    fn row_residual_then_update(&mut self, eps: f64, tol: f64) -> bool {
        let n = self.f.len();
        let target = self.log_row.exp();
        let lse: Vec<f64> = (0..n).map(|i| self.row_lse(i, eps)).collect();
        let residual = (0..n).fold(0.0, |m: f64, i| m.max(((self.f[i] / eps + lse[i]).exp() - target).abs()));
        if residual < tol {
            return true;
        }
        for (f, l) in self.f.iter_mut().zip(&lse) {
            *f = eps * (self.log_row - l);
        }
        for (jj, g) in self.g.iter_mut().enumerate() {
            let col = self.cost.column(jj);
            let l = log_sum_exp(col.iter().zip(&self.f).map(|(&d, &f)| (f - d) / eps));
            *g = eps * (self.log_col - l);
        }
        false
    }

    fn plan(&self, eps: f64) -> TransportPlan {
        let mut gamma = self.cost.to_owned();
        for ((i, jj), v) in gamma.indexed_iter_mut() {
            *v = ((self.f[i] + self.g[jj] - *v) / eps).exp();
        }
        TransportPlan { gamma }
    }
}

struct Scaling {
    gamma: Array2<f64>,
    row_target: f64,
    col_target: f64,
}

impl Scaling {
    fn new(cost: ArrayView2<'_, f64>, epsilon: f64) -> Result<Self> {
        check_cost(cost, epsilon)?;
        let (n, j) = cost.dim();
        let row_min = cost.fold_axis(Axis(1), f64::INFINITY, |m, &v| m.min(v));
        let mut shifted = cost.to_owned();
        for (mut row, &a) in shifted.rows_mut().into_iter().zip(&row_min) {
            row -= a;
        }
        let col_min = shifted.fold_axis(Axis(0), f64::INFINITY, |m, &v| m.min(v));
        for mut row in shifted.rows_mut() {
            row -= &col_min;
        }
        let mut gamma = shifted.mapv(|v| (-v.max(0.0) / epsilon).exp());
        let total = gamma.sum();
        gamma /= total;
        Ok(Self {
            gamma,
            row_target: 1.0 / n as f64,
            col_target: 1.0 / j as f64,
        })
    }

    /// One row scaling then one column scaling; returns the row residual
    /// measured after the column step.
    fn round(&mut self) -> Result<f64> {
        let row_sums = self.gamma.sum_axis(Axis(1));
        let row_scale = scale_factors(&row_sums, self.row_target, "row")?;
        for (mut row, &f) in self.gamma.rows_mut().into_iter().zip(&row_scale) {
            row *= f;
        }
        let col_sums = self.gamma.sum_axis(Axis(0));
        let col_scale = scale_factors(&col_sums, self.col_target, "column")?;
        for mut row in self.gamma.rows_mut() {
            row *= &col_scale;
        }
        Ok(self.row_residual())
    }

    fn row_residual(&self) -> f64 {
        max_deviation(&self.gamma.sum_axis(Axis(1)), self.row_target)
    }

    fn finish(self) -> TransportPlan {
        TransportPlan { gamma: self.gamma }
    }
}

fn scale_factors(sums: &Array1<f64>, target: f64, axis: &str) -> Result<Array1<f64>> {
    if let Some(i) = sums.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Numerical(format!(
            "{axis} {i} sum is {} during scaling; epsilon is too small for the cost scale",
            sums[i]
        )));
    }
    Ok(sums.mapv(|s| target / s))
}

/// Per-point posterior over clusters: rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    pub gamma: Array2<f64>,
}

impl SoftLabels {
    pub fn num_points(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn column_sums(&self) -> Array1<f64> {
        self.gamma.sum_axis(Axis(0))
    }

    /// `max_j |sum_i gamma_ij - N/J|`
    pub fn equipartition_deviation(&self) -> f64 {
        let (n, j) = self.gamma.dim();
        max_deviation(&self.column_sums(), n as f64 / j as f64)
    }

    /// Arg-max cluster per point; ties resolve to the lowest index.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.gamma
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0
            })
            .collect()
    }
}

/// `gamma = N * Gamma`
pub fn assign_soft_labels(plan: &TransportPlan, num_points: usize) -> Result<SoftLabels> {
    if plan.gamma.nrows() != num_points {
        return Err(Error::Shape(format!(
            "plan has {} rows but {} points were given",
            plan.gamma.nrows(),
            num_points
        )));
    }
    Ok(SoftLabels {
        gamma: &plan.gamma * num_points as f64,
    })
}

/// Plain distance softmax, `gamma_i = softmax(-D_i / temperature)`, with no
/// balance constraint.
pub fn assign_l2_labels(cost: ArrayView2<'_, f64>, temperature: f64) -> Result<SoftLabels> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let scaled = cost.mapv(|v| -v / temperature);
    Ok(SoftLabels {
        gamma: crate::encoder::row_softmax(scaled.view()),
    })
}

/// Fraction of points whose cluster's majority class matches their class.
pub fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(labels.len(), truth.len());
    if labels.is_empty() {
        return 1.0;
    }
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; classes]; clusters];
    for (&l, &t) in labels.iter().zip(truth) {
        counts[l][t] += 1;
    }
    let majority: usize = counts.iter().map(|c| c.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / labels.len() as f64
}
