//! Self-check suite behind `softclu verify`.
//!
//! Every check compares the production code against an independent oracle
//! (exact LP, exhaustive balanced assignment, central differences) or against
//! a hard contract (marginals, equipartition). The scenario builders are
//! public so integration tests can run the same experiments with their own
//! thresholds.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses;
use crate::oracle::{self, GradCheckReport};
use crate::ot::{self, SolverConfig, TransportPlan};
use crate::pointcloud::{format_cloud, parse_cloud, CloudFormat};
use crate::synthetic::{blob_cloud, gaussian_cloud};
use crate::trainer::e_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::Config(format!("unknown verify level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4}  {:<28} {:>7.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// A transport solver under test: `(cost, epsilon) -> plan`.
pub type Solver<'a> = dyn Fn(ArrayView2<'_, f64>, f64) -> Result<TransportPlan> + 'a;

/// The production solver run to a tight tolerance.
pub fn converged_sinkhorn(cost: ArrayView2<'_, f64>, epsilon: f64) -> Result<TransportPlan> {
    ot::sinkhorn_to_tolerance(cost, epsilon, 1e-10, 5_000_000).map(|(plan, _)| plan)
}

pub fn uniform_cost(rng: &mut ChaCha8Rng, n: usize, j: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, j), || rng.random::<f64>())
}

// ---------------------------------------------------------------- marginals

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalStats {
    pub instances: usize,
    pub worst_residual: f64,
    pub max_rounds: usize,
}

/// Size grid cycled over when drawing marginal-test instances.
pub const MARGINAL_SIZES: [usize; 3] = [8, 64, 512];
pub const MARGINAL_CLUSTERS: [usize; 3] = [2, 8, 64];

fn marginal_shape(k: usize) -> (usize, usize) {
    (
        MARGINAL_SIZES[k % 3],
        MARGINAL_CLUSTERS[(k / 3) % 3],
    )
}

/// Solve `instances` random uniform-cost problems to `tol` and report the
/// largest marginal residual.
pub fn marginals_converged(instances: usize, epsilon: f64, tol: f64, seed: u64) -> Result<MarginalStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = MarginalStats {
        instances,
        worst_residual: 0.0,
        max_rounds: 0,
    };
    for k in 0..instances {
        let (n, j) = marginal_shape(k);
        let d = uniform_cost(&mut rng, n, j);
        let (plan, rounds) = ot::sinkhorn_to_tolerance(d.view(), epsilon, tol, 10_000_000)?;
        stats.worst_residual = stats.worst_residual.max(plan.max_marginal_residual());
        stats.max_rounds = stats.max_rounds.max(rounds);
    }
    Ok(stats)
}

/// Same instances as [`marginals_converged`], but with a fixed round count.
pub fn marginals_fixed_rounds(instances: usize, epsilon: f64, rounds: usize, seed: u64) -> Result<MarginalStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = MarginalStats {
        instances,
        worst_residual: 0.0,
        max_rounds: rounds,
    };
    for k in 0..instances {
        let (n, j) = marginal_shape(k);
        let d = uniform_cost(&mut rng, n, j);
        let plan = ot::sinkhorn(d.view(), epsilon, rounds)?;
        stats.worst_residual = stats.worst_residual.max(plan.max_marginal_residual());
    }
    Ok(stats)
}

// ---------------------------------------------------------------- LP oracle

#[derive(Debug, Clone, PartialEq)]
pub struct LpStats {
    pub instances: usize,
    /// Largest `(<Gamma, D> - LP) - eps * ln(NJ)` at the target epsilon;
    /// must stay at or below the slack.
    pub worst_excess: f64,
    /// Most negative `<Gamma, D> - LP`; below zero means the LP was beaten.
    pub min_gap: f64,
    /// Instances where the gap grew as epsilon shrank.
    pub non_monotone: usize,
}

impl LpStats {
    pub fn passed(&self, slack: f64) -> bool {
        self.worst_excess <= slack && self.min_gap >= -1e-9 && self.non_monotone == 0
    }
}

/// Compare `solver` against the exact LP on random instances with
/// `N <= 8`, `J <= 4`, sweeping `epsilons` (largest first; the last one is
/// the target for the gap bound).
pub fn sinkhorn_vs_lp(solver: &Solver<'_>, instances: usize, epsilons: &[f64], seed: u64) -> Result<LpStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = LpStats {
        instances,
        worst_excess: f64::NEG_INFINITY,
        min_gap: f64::INFINITY,
        non_monotone: 0,
    };
    let target = *epsilons.last().ok_or_else(|| Error::Config("no epsilons".into()))?;
    for _ in 0..instances {
        let n = rng.random_range(2..=8);
        let j = rng.random_range(2..=4);
        let d = uniform_cost(&mut rng, n, j);
        let exact = oracle::exact_ot(d.view())?;
        let mut previous = f64::INFINITY;
        let mut monotone = true;
        for &eps in epsilons {
            let gap = solver(d.view(), eps)?.cost(d.view()) - exact.objective;
            stats.min_gap = stats.min_gap.min(gap);
            if gap.abs() > previous + 1e-9 {
                monotone = false;
            }
            previous = gap.abs();
            if eps == target {
                let bound = eps * ((n * j) as f64).ln();
                stats.worst_excess = stats.worst_excess.max(gap - bound);
            }
        }
        if !monotone {
            stats.non_monotone += 1;
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------- gradients

/// Seeded toy for the end-to-end gradient check.
pub struct GradToy {
    pub params: EncoderParams,
    pub points: Array2<f64>,
    pub gamma: Array2<f64>,
    pub eta: f64,
}

impl GradToy {
    pub fn new(points: usize, clusters: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let config = EncoderConfig {
            hidden: vec![16, 16],
            feature_dim,
            global_context: true,
            clusters,
        };
        let mut params = EncoderParams::init(&config, seed)?;
        // Zero biases put whole rows of pre-activations exactly on a ReLU
        // kink, where central differences are meaningless. Random biases
        // move the check point off the kinks.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for layer in params.layers.iter_mut().chain(std::iter::once(&mut params.head)) {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let cloud = gaussian_cloud(points, seed ^ 0xc10d).normalize();
        let solver = SolverConfig {
            clusters,
            ..SolverConfig::default()
        };
        let step = e_step(&params, &cloud, &solver)?;
        Ok(Self {
            params,
            points: step.points,
            gamma: step.labels.gamma,
            eta: 0.01,
        })
    }

    /// `L_tot` at `params` with the soft labels held fixed.
    pub fn loss(&self, params: &EncoderParams) -> Result<f64> {
        let trace = encoder::forward_matrix(params, self.points.clone());
        let protos = ot::compute_prototypes(self.points.view(), trace.features.view(), trace.scores.view())?;
        let (report, _) = losses::total_loss(self.gamma.view(), trace.scores.view(), &protos, self.eta)?;
        Ok(report.l_total)
    }

    pub fn analytic_gradient(&self) -> Result<EncoderParams> {
        let trace = encoder::forward_matrix(&self.params, self.points.clone());
        let protos = ot::compute_prototypes(self.points.view(), trace.features.view(), trace.scores.view())?;
        let (_, g) = losses::total_loss(self.gamma.view(), trace.scores.view(), &protos, self.eta)?;
        let (d_proto_scores, d_features) = ot::prototypes_backward(
            self.points.view(),
            trace.features.view(),
            trace.scores.view(),
            &protos,
            g.d_geometric.view(),
            g.d_feature.view(),
        )?;
        let d_scores = g.d_scores + d_proto_scores;
        encoder::backward(&trace, &self.params, d_scores.view(), d_features.view())
    }

    /// Central-difference check over every network weight (`lambda_raw`
    /// does not enter the loss and is skipped). `corrupt` scales the
    /// analytic gradient, to show the check has teeth.
    pub fn check(&self, h: f64, rel_tol: f64, corrupt: f64) -> Result<GradCheckReport> {
        let analytic = self.analytic_gradient()?;
        let count = self.params.num_scalars() - 1;
        let theta = self.params.to_flat();
        let analytic: Vec<f64> = analytic.to_flat()[..count].iter().map(|g| g * corrupt).collect();
        let names = self.params.scalar_names()[..count].to_vec();
        let mut probe = self.params.clone();
        let mut full = theta.clone();
        oracle::grad_check(
            |t| {
                full[..count].copy_from_slice(t);
                probe.set_flat(&full).expect("same length");
                self.loss(&probe).unwrap_or(f64::NAN)
            },
            &theta[..count],
            &analytic,
            &names,
            h,
            rel_tol,
        )
    }
}

// ---------------------------------------------------------------- clustering

/// Scores that lean towards each point's true group by `bias` logits on top
/// of standard normal noise, standing in for a partially trained head.
pub fn biased_scores(truth: &[usize], clusters: usize, bias: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut logits = Array2::zeros((truth.len(), clusters));
    for (i, &t) in truth.iter().enumerate() {
        for j in 0..clusters {
            let z: f64 = rng.sample(StandardNormal);
            logits[[i, j]] = z + if j == t { bias } else { 0.0 };
        }
    }
    encoder::row_softmax(logits.view())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobRecovery {
    pub purity: f64,
    pub oracle_purity: f64,
    /// Sinkhorn hard labels equal the exhaustive balanced optimum.
    pub matches_oracle: bool,
}

/// `clusters` blobs of `per_blob` points, ten radii apart, clustered with a
/// purely geometric cost (`lambda = 1`).
pub fn blob_recovery(clusters: usize, per_blob: usize, epsilon: f64, seed: u64) -> Result<BlobRecovery> {
    let (cloud, truth) = blob_cloud(clusters, per_blob, 10.0, 1.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10b);
    let points = cloud.to_matrix();
    let scores = biased_scores(&truth, clusters, 2.0, &mut rng);
    let features = Array2::from_shape_simple_fn((points.nrows(), 4), || rng.random_range(-1.0..1.0));
    let protos = ot::compute_prototypes(points.view(), features.view(), scores.view())?;
    let cost = ot::compute_cost(points.view(), features.view(), &protos, 1.0)?;
    let plan = converged_sinkhorn(cost.values.view(), epsilon)?;
    let labels = ot::assign_soft_labels(&plan, points.nrows())?.hard_labels();
    let exact = oracle::balanced_hard_assign(cost.values.view())?;
    Ok(BlobRecovery {
        purity: ot::purity(&labels, &truth),
        oracle_purity: ot::purity(&exact, &truth),
        matches_oracle: labels == exact,
    })
}

/// Equipartition deviations `(l2, sinkhorn)` on an instance where every
/// point is closest to cluster 0.
pub fn imbalanced_assignment(points: usize, clusters: usize, epsilon: f64, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = uniform_cost(&mut rng, points, clusters);
    d.column_mut(0).mapv_inplace(|v| v * 0.1);
    let l2 = ot::assign_l2_labels(d.view(), epsilon)?.equipartition_deviation();
    let plan = ot::sinkhorn(d.view(), epsilon, SolverConfig::default().iters)?;
    let balanced = ot::assign_soft_labels(&plan, points)?.equipartition_deviation();
    Ok((l2, balanced))
}

/// Purity of `argmax(gamma)` against the two halves of a mirrored cloud
/// whose mirror pairs carry identical features, for cost weight `lambda`.
pub fn mirrored_halves_purity(per_half: usize, lambda: f64, seed: u64) -> Result<f64> {
    let (cloud, truth) = blob_cloud(2, per_half, 10.0, 1.0, seed);
    let mut points = cloud.to_matrix();
    // Make the second half an exact mirror image of the first.
    for i in 0..per_half {
        for k in 0..3 {
            points[[per_half + i, k]] = -points[[i, k]];
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3177);
    let half = Array2::from_shape_simple_fn((per_half, 8), || rng.random_range(-1.0..1.0));
    let features = ndarray::concatenate![ndarray::Axis(0), half, half];
    // Scores lean towards the true half, plus a feature-dependent term.
    let mut scores = biased_scores(&truth, 2, 2.0, &mut rng);
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let w = 1.0 + 0.1 * features[[i, 0]];
        row[0] *= w;
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let protos = ot::compute_prototypes(points.view(), features.view(), scores.view())?;
    let cost = ot::compute_cost(points.view(), features.view(), &protos, lambda)?;
    let plan = converged_sinkhorn(cost.values.view(), SolverConfig::default().epsilon)?;
    let labels = ot::assign_soft_labels(&plan, points.nrows())?.hard_labels();
    Ok(ot::purity(&labels, &truth))
}

/// Largest `|colsum(gamma) - N/J|` over e-steps of a random encoder on
/// `clouds` Gaussian clouds.
pub fn e_step_equipartition(clouds: usize, points: usize, clusters: usize, seed: u64) -> Result<f64> {
    let config = EncoderConfig {
        hidden: vec![32, 32],
        feature_dim: 16,
        global_context: true,
        clusters,
    };
    let params = EncoderParams::init(&config, seed)?;
    let solver = SolverConfig {
        clusters,
        ..SolverConfig::default()
    };
    let mut worst: f64 = 0.0;
    for c in 0..clouds {
        let cloud = gaussian_cloud(points, seed.wrapping_add(c as u64)).normalize();
        let step = e_step(&params, &cloud, &solver)?;
        worst = worst.max(step.labels.equipartition_deviation());
    }
    Ok(worst)
}

// ---------------------------------------------------------------- suite

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The Sinkhorn-vs-LP check for an arbitrary solver.
pub fn check_lp(solver: &Solver<'_>, instances: usize) -> CheckResult {
    timed("sinkhorn_vs_lp", || {
        let s = sinkhorn_vs_lp(solver, instances, &[1e-1, 1e-2, 1e-3], 2)?;
        Ok((
            s.passed(1e-6),
            format!(
                "{} instances, worst excess over eps*ln(NJ) {:.2e}, min gap {:.2e}, non-monotone {}",
                s.instances, s.worst_excess, s.min_gap, s.non_monotone
            ),
        ))
    })
}

pub fn run_suite(level: Level) -> Vec<CheckResult> {
    let full = level == Level::Full;
    let mut out = Vec::new();

    out.push(timed("sinkhorn_marginals", || {
        let s = marginals_converged(if full { 100 } else { 12 }, 1e-3, 1e-7, 1)?;
        Ok((
            s.worst_residual < 1e-6,
            format!(
                "{} instances, worst residual {:.2e}, max rounds {}",
                s.instances, s.worst_residual, s.max_rounds
            ),
        ))
    }));

    out.push(check_lp(&converged_sinkhorn, if full { 50 } else { 15 }));

    out.push(timed("gradient_end_to_end", || {
        let toy = GradToy::new(16, 4, 8, 3)?;
        let r = toy.check(1e-5, 1e-4, 1.0)?;
        Ok((
            r.passed(),
            format!(
                "{} params, max rel error {:.2e} at {}",
                r.checked,
                r.max_rel_error,
                r.worst.unwrap_or_default()
            ),
        ))
    }));

    out.push(timed("gradient_check_sensitivity", || {
        let toy = GradToy::new(16, 4, 8, 3)?;
        let r = toy.check(1e-5, 1e-4, 1.1)?;
        Ok((!r.passed(), format!("+10% corrupted gradient, max rel error {:.2e}", r.max_rel_error)))
    }));

    out.push(timed("e_step_equipartition", || {
        let clouds = if full { 20 } else { 5 };
        let worst = e_step_equipartition(clouds, 256, 8, 4)?;
        Ok((
            worst < 256.0 * 1e-5,
            format!("{clouds} clouds, worst column deviation {worst:.2e}"),
        ))
    }));

    out.push(timed("blob_recovery_vs_oracle", || {
        let mut detail = Vec::new();
        let mut ok = true;
        let seeds = if full { 10 } else { 3 };
        for (clusters, per_blob) in [(2, 6), (4, 3)] {
            for seed in 0..seeds {
                let r = blob_recovery(clusters, per_blob, 1e-3, seed)?;
                ok &= r.purity == 1.0 && r.matches_oracle;
                if r.purity < 1.0 || !r.matches_oracle {
                    detail.push(format!("J={clusters} seed {seed}: purity {}", r.purity));
                }
            }
        }
        Ok((ok, if detail.is_empty() { format!("{} instances, purity 1", 2 * seeds) } else { detail.join("; ") }))
    }));

    if full {
        out.push(timed("l2_labels_break_balance", || {
            let (l2, balanced) = imbalanced_assignment(64, 4, 1e-3, 5)?;
            let tol = 64.0 * 1e-5;
            Ok((
                l2 > 10.0 * tol && balanced < tol,
                format!("column deviation: l2 {l2:.3}, sinkhorn {balanced:.2e}"),
            ))
        }));

        out.push(timed("feature_only_ablation", || {
            let only_features = mirrored_halves_purity(16, 0.0, 6)?;
            let mixed = mirrored_halves_purity(16, 0.5, 6)?;
            Ok((
                only_features < 0.6 && mixed >= 0.99,
                format!("purity lambda=0 {only_features:.3}, lambda=0.5 {mixed:.3}"),
            ))
        }));

        out.push(timed("cloud_roundtrip", || {
            let cloud = gaussian_cloud(100, 7);
            let mut worst: f64 = 0.0;
            for format in [CloudFormat::Off, CloudFormat::PlyAscii, CloudFormat::Xyz] {
                let back = parse_cloud(&format_cloud(&cloud, format), format)?;
                for (a, b) in cloud.points().iter().zip(back.points()) {
                    for k in 0..3 {
                        worst = worst.max((a[k] - b[k]).abs());
                    }
                }
            }
            Ok((worst <= 5e-7, format!("max coordinate error {worst:.1e}")))
        }));

        out.push(timed("checkpoint_roundtrip", || {
            let config = EncoderConfig {
                hidden: vec![8],
                feature_dim: 4,
                global_context: true,
                clusters: 3,
            };
            let ckpt = Checkpoint {
                meta: CheckpointMeta {
                    encoder: config.clone(),
                    solver: SolverConfig {
                        clusters: 3,
                        ..SolverConfig::default()
                    },
                    config_hash: String::new(),
                    epoch: 0,
                    step: 0,
                },
                params: EncoderParams::init(&config, 8)?,
            };
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()?)?;
            Ok((back == ckpt, "bytes -> checkpoint -> bytes".into()))
        }));
    }
    out
}
