use softclu::synthetic::blob_cloud;
use softclu::trainer::BackboneConfig;
use softclu::verify::{e_step_equipartition, GradToy};
use softclu::{pretrain, PointCloud, SolverConfig, TrainConfig};

fn blob_dataset(count: u64, blobs: usize) -> Vec<PointCloud> {
    (0..count).map(|s| blob_cloud(blobs, 32, 4.0, 1.0, s).0).collect()
}

fn small_config(clusters: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-3,
        seed: 3,
        points: 128,
        solver: SolverConfig {
            clusters,
            ..SolverConfig::default()
        },
        encoder: BackboneConfig {
            hidden: vec![32, 32],
            feature_dim: 16,
            global_context: true,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn loss_trends_down_on_blobs() {
    let clouds = blob_dataset(16, 4);
    let state = pretrain(&clouds, &small_config(4, 20)).unwrap();
    let first = state.history.first().unwrap().l_total;
    let last = state.history.last().unwrap().l_total;
    assert_eq!(state.history.len(), 20);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn pretraining_is_deterministic() {
    let clouds = blob_dataset(6, 3);
    let config = small_config(3, 3);
    let a = pretrain(&clouds, &config).unwrap();
    let b = pretrain(&clouds, &config).unwrap();
    assert_eq!(a.params.to_flat(), b.params.to_flat());
    assert_eq!(a.history, b.history);
}

#[test]
fn every_e_step_is_balanced() {
    for clusters in [2, 8, 16] {
        let worst = e_step_equipartition(10, 256, clusters, clusters as u64).unwrap();
        assert!(worst < 256.0 * 1e-5, "J={clusters}: {worst}");
    }
}

#[test]
fn end_to_end_gradient_matches_differences() {
    for seed in 0..3 {
        let toy = GradToy::new(16, 4, 8, seed).unwrap();
        let report = toy.check(1e-5, 1e-4, 1.0).unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}
