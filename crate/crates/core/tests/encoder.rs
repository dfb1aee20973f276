use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softclu::synthetic::gaussian_cloud;
use softclu::{forward, EncoderConfig, EncoderParams, PointCloud};

fn config(global_context: bool) -> EncoderConfig {
    EncoderConfig {
        hidden: vec![16, 32],
        feature_dim: 12,
        global_context,
        clusters: 5,
    }
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permuting_points_permutes_outputs(seed: u64, n in 2usize..80, context: bool) {
        let params = EncoderParams::init(&config(context), seed).unwrap();
        let cloud = gaussian_cloud(n, seed ^ 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let shuffled = PointCloud::new(order.iter().map(|&i| cloud.points()[i]).collect()).unwrap();

        let a = forward(&params, &cloud);
        let b = forward(&params, &shuffled);
        prop_assert!(max_diff(&a.scores.select(Axis(0), &order), &b.scores) < 1e-12);
        prop_assert!(max_diff(&a.features.select(Axis(0), &order), &b.features) < 1e-12);
    }

    #[test]
    fn score_rows_are_distributions(seed: u64, n in 1usize..80, context: bool) {
        let params = EncoderParams::init(&config(context), seed).unwrap();
        let trace = forward(&params, &gaussian_cloud(n, seed).normalize());
        prop_assert_eq!(trace.scores.dim(), (n, 5));
        prop_assert_eq!(trace.features.dim(), (n, 12));
        for row in trace.scores.rows() {
            prop_assert!(row.iter().all(|&s| s > 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn global_context_couples_points() {
    // Without pooling a point's output depends only on that point.
    let cloud = gaussian_cloud(20, 4);
    let mut moved = cloud.points().to_vec();
    moved[19] = [5.0, -5.0, 5.0];
    let moved = PointCloud::new(moved).unwrap();
    for (context, coupled) in [(false, false), (true, true)] {
        let params = EncoderParams::init(&config(context), 9).unwrap();
        let a = forward(&params, &cloud).scores;
        let b = forward(&params, &moved).scores;
        let first = max_diff(&a.row(0).to_owned().insert_axis(Axis(0)), &b.row(0).to_owned().insert_axis(Axis(0)));
        assert_eq!(first > 0.0, coupled, "context {context}");
    }
}

#[test]
fn init_is_seed_deterministic() {
    let a = EncoderParams::init(&config(true), 3).unwrap();
    let b = EncoderParams::init(&config(true), 3).unwrap();
    let c = EncoderParams::init(&config(true), 4).unwrap();
    assert_eq!(a.to_flat(), b.to_flat());
    assert_ne!(a.to_flat(), c.to_flat());
}
