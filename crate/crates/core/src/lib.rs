//! Augmentation-free self-supervised pretraining for point clouds by soft
//! clustering.
//!
//! Each training step alternates two phases. The E-step runs the encoder,
//! forms score-weighted prototypes and solves a balanced entropic
//! optimal-transport problem for soft pseudo-labels. The M-step trains the
//! encoder and segmentation head against those labels with a cross-entropy
//! loss plus a prototype orthogonality penalty.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod oracle;
pub mod ot;
pub mod pointcloud;
pub mod synthetic;
pub mod trainer;
pub mod verify;

pub use encoder::{backward, forward, EncoderConfig, EncoderParams, ForwardTrace};
pub use error::{Error, Result};
pub use losses::{orth_loss, soft_ce_loss, total_loss, LossReport};
pub use ot::{
    assign_l2_labels, assign_soft_labels, compute_cost, compute_prototypes, sinkhorn,
    sinkhorn_to_tolerance, CostMatrix, Prototypes, SoftLabels, SolverConfig, TransportPlan,
};
pub use pointcloud::{load_cloud, CloudFormat, LabeledCloud, PointCloud};

pub use trainer::{e_step, e_step_with, m_step, pretrain, pretrain_with, EStep, EpochMetrics, SolveMode, TrainConfig, TrainState};
