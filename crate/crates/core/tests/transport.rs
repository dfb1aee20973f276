//! Transport solver against exact oracles and its structural invariants.

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softclu::oracle::{balanced_hard_assign, exact_ot};
use softclu::ot::{compute_cost, compute_prototypes, purity, sinkhorn_to_tolerance};
use softclu::verify::{blob_recovery, converged_sinkhorn, sinkhorn_vs_lp};
use softclu::{assign_soft_labels, sinkhorn};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>())
}

#[test]
fn lp_bound_and_monotone_gap() {
    let stats = sinkhorn_vs_lp(&converged_sinkhorn, 50, &[1e-1, 1e-2, 1e-3], 77).unwrap();
    assert!(stats.passed(1e-6), "{stats:?}");
}

#[test]
fn lp_objective_lower_bounds_every_feasible_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let d = random(6, 3, &mut rng);
        let exact = exact_ot(d.view()).unwrap();
        for eps in [1e-1, 1e-2, 1e-3] {
            let (plan, _) = sinkhorn_to_tolerance(d.view(), eps, 1e-12, 1_000_000).unwrap();
            assert!(plan.cost(d.view()) >= exact.objective - 1e-9);
        }
    }
}

#[test]
fn separated_blobs_match_balanced_oracle() {
    for (clusters, per_blob) in [(2, 6), (4, 3), (2, 4), (3, 4)] {
        for seed in 0..5 {
            let r = blob_recovery(clusters, per_blob, 1e-3, seed).unwrap();
            assert_eq!(r.purity, 1.0, "J={clusters} seed {seed}");
            assert!(r.matches_oracle, "J={clusters} seed {seed}");
        }
    }
}

#[test]
fn oracle_labels_permute_with_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = random(8, 4, &mut rng);
    let labels = balanced_hard_assign(d.view()).unwrap();
    let perm = [2usize, 0, 3, 1];
    let permuted = d.select(Axis(1), &perm);
    let relabeled = balanced_hard_assign(permuted.view()).unwrap();
    for (a, b) in labels.iter().zip(&relabeled) {
        assert_eq!(perm[*b], *a);
    }
    assert_eq!(purity(&labels, &relabeled), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_cost_shift_leaves_plan_unchanged(
        seed: u64,
        shift in -50.0f64..50.0,
        n in 2usize..40,
        j in 2usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random(n, j, &mut rng);
        let shifted = &d + shift;
        let a = sinkhorn(d.view(), 1e-3, 20).unwrap();
        let b = sinkhorn(shifted.view(), 1e-3, 20).unwrap();
        let diff = (&a.gamma - &b.gamma).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff < 1e-9, "max diff {}", diff);
    }

    #[test]
    fn columns_are_exact_after_every_round(seed: u64, n in 1usize..64, j in 1usize..16, iters in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random(n, j, &mut rng) * 4.0;
        let plan = sinkhorn(d.view(), 1e-3, iters).unwrap();
        prop_assert!(plan.col_residual() < 1e-12);
        prop_assert!((plan.gamma.sum() - 1.0).abs() < 1e-9);
        let labels = assign_soft_labels(&plan, n).unwrap();
        prop_assert!(labels.equipartition_deviation() < n as f64 * 1e-6);
    }

    #[test]
    fn lambda_endpoints_ignore_the_unused_input(seed: u64, n in 2usize..30, j in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random(n, 3, &mut rng);
        let features = random(n, 5, &mut rng);
        let mut scores = random(n, j, &mut rng) + 0.1;
        for mut row in scores.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let solve = |p: &Array2<f64>, f: &Array2<f64>, lambda: f64| {
            let protos = compute_prototypes(p.view(), f.view(), scores.view()).unwrap();
            let cost = compute_cost(p.view(), f.view(), &protos, lambda).unwrap();
            sinkhorn(cost.values.view(), 1e-3, 20).unwrap().gamma
        };
        let other_features = random(n, 5, &mut rng);
        let other_points = random(n, 3, &mut rng);
        prop_assert_eq!(solve(&points, &features, 1.0), solve(&points, &other_features, 1.0));
        prop_assert_eq!(solve(&points, &features, 0.0), solve(&other_points, &features, 0.0));
    }
}
