//! The EM training loop.
//!
//! E-step (per cloud): forward pass, prototypes, cost matrix, Sinkhorn soft
//! labels. The cost matrix and the labels are constants for the gradient.
//! M-step (per batch): mean `L_tot` over the batch, backpropagation through
//! the losses, the prototype weighting and the encoder, then one AdamW step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderParams, ForwardTrace};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport};
use crate::ot::{self, CostMatrix, Prototypes, SoftLabels, SolverConfig, TransportPlan};
use crate::pointcloud::PointCloud;

/// Encoder shape as it appears in a training config; the head width comes
/// from `solver.clusters`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub global_context: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            hidden: e.hidden,
            feature_dim: e.feature_dim,
            global_context: e.global_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eta: f64,
    /// Every cloud is resampled to this many points before training.
    pub points: usize,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub solver: SolverConfig,
    pub encoder: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.7,
            decay_every: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eta: 0.01,
            points: 2048,
            checkpoint_every: 10,
            solver: SolverConfig::default(),
            encoder: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("adam betas must be below 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.eta >= 0.0) {
            return Err(Error::Config("weight_decay and eta must be non-negative".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.points == 0 {
            return Err(Error::Config(
                "batch_size, decay_every and points must be at least 1".into(),
            ));
        }
        self.solver.validate()?;
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.encoder.hidden.clone(),
            feature_dim: self.encoder.feature_dim,
            global_context: self.encoder.global_context,
            clusters: self.solver.clusters,
        }
    }

    /// Step decay: `lr * lr_decay^(epoch / decay_every)`, epochs counted from 0.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`], clamped away from the infinite endpoints.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// The cost mixing weight in force for `params`.
pub fn effective_lambda(params: &EncoderParams, solver: &SolverConfig) -> f64 {
    if solver.learn_lambda {
        sigmoid(params.lambda_raw)
    } else {
        solver.lambda
    }
}

const CONVERGED_MAX_ROUNDS: usize = 1_000_000;

/// Everything the E-step produced for one cloud.
#[derive(Debug, Clone)]
pub struct EStep {
    pub points: ndarray::Array2<f64>,
    pub trace: ForwardTrace,
    pub prototypes: Prototypes,
    pub cost: CostMatrix,
    pub plan: TransportPlan,
    pub labels: SoftLabels,
}

/// How the E-step runs the transport solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMode {
    /// Exactly `solver.iters` scaling rounds, as in training.
    #[default]
    Fixed,
    /// Until both marginals are within `solver.tol`.
    Converged,
}

pub fn e_step(params: &EncoderParams, cloud: &PointCloud, solver: &SolverConfig) -> Result<EStep> {
    e_step_with(params, cloud, solver, SolveMode::Fixed)
}

pub fn e_step_with(params: &EncoderParams, cloud: &PointCloud, solver: &SolverConfig, mode: SolveMode) -> Result<EStep> {
    if params.clusters() != solver.clusters {
        return Err(Error::Config(format!(
            "solver expects {} clusters but the head has {}",
            solver.clusters,
            params.clusters()
        )));
    }
    let points = cloud.to_matrix();
    let trace = encoder::forward_matrix(params, points.clone());
    let prototypes = ot::compute_prototypes(points.view(), trace.features.view(), trace.scores.view())?;
    let lambda = effective_lambda(params, solver);
    let cost = ot::compute_cost(points.view(), trace.features.view(), &prototypes, lambda)?;
    // The solver only ever sees a detached copy of D.
    let plan = match mode {
        SolveMode::Fixed => ot::sinkhorn(cost.values.view(), solver.epsilon, solver.iters)?,
        SolveMode::Converged => {
            ot::sinkhorn_to_tolerance(cost.values.view(), solver.epsilon, solver.tol, CONVERGED_MAX_ROUNDS)?.0
        }
    };
    let labels = ot::assign_soft_labels(&plan, cloud.len())?;
    Ok(EStep {
        points,
        trace,
        prototypes,
        cost,
        plan,
        labels,
    })
}

/// Loss and exact parameter gradients of `L_tot` for one cloud, holding
/// the soft labels and the cost matrix fixed.
pub fn cloud_gradients(params: &EncoderParams, step: &EStep, eta: f64) -> Result<(LossReport, EncoderParams)> {
    let (report, grads) = losses::total_loss(
        step.labels.gamma.view(),
        step.trace.scores.view(),
        &step.prototypes,
        eta,
    )?;
    let (d_scores_proto, d_features) = ot::prototypes_backward(
        step.points.view(),
        step.trace.features.view(),
        step.trace.scores.view(),
        &step.prototypes,
        grads.d_geometric.view(),
        grads.d_feature.view(),
    )?;
    let d_scores = grads.d_scores + d_scores_proto;
    let param_grads = encoder::backward(&step.trace, params, d_scores.view(), d_features.view())?;
    Ok((report, param_grads))
}

/// Gradient for `lambda_raw` when the mixing weight is learned: derivative
/// of the transport objective `<Gamma, D(lambda)>` with the plan held fixed.
pub fn lambda_raw_gradient(params: &EncoderParams, step: &EStep) -> f64 {
    let s = sigmoid(params.lambda_raw);
    let d_lambda = (&step.plan.gamma * &(&step.cost.geometric - &step.cost.feature)).sum();
    d_lambda * s * (1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_soft: f64,
    pub l_orth: f64,
    pub l_total: f64,
    pub lr: f64,
    pub max_marginal_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub first_moment: EncoderParams,
    pub second_moment: EncoderParams,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = EncoderParams::init(&config.encoder_config(), config.seed)?;
        params.lambda_raw = logit(config.solver.lambda);
        let first_moment = params.zeros_like();
        let second_moment = params.zeros_like();
        Ok(Self {
            params,
            first_moment,
            second_moment,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }
}

/// Mean losses of one M-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub l_soft: f64,
    pub l_orth: f64,
    pub l_total: f64,
}

/// One AdamW update from the batch-mean gradient of `L_tot`.
pub fn m_step(state: &mut TrainState, batch: &[EStep], config: &TrainConfig, lr: f64) -> Result<StepMetrics> {
    m_step_labeled(state, batch, config, lr, state.step)
}

fn m_step_labeled(
    state: &mut TrainState,
    batch: &[EStep],
    config: &TrainConfig,
    lr: f64,
    batch_id: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Config("m_step needs a non-empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = state.params.zeros_like();
    let mut metrics = StepMetrics {
        l_soft: 0.0,
        l_orth: 0.0,
        l_total: 0.0,
    };
    for step in batch {
        let (report, g) = cloud_gradients(&state.params, step, config.eta)?;
        grads.add_scaled(&g, scale);
        if config.solver.learn_lambda {
            grads.lambda_raw += scale * lambda_raw_gradient(&state.params, step);
        }
        metrics.l_soft += scale * report.l_soft;
        metrics.l_orth += scale * report.l_orth;
        metrics.l_total += scale * report.l_total;
    }
    if !metrics.l_total.is_finite() || !grads.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss or gradient in batch {batch_id} (l_soft {}, l_orth {})",
            metrics.l_soft, metrics.l_orth
        )));
    }
    adamw_update(state, &grads, config, lr);
    Ok(metrics)
}

/// AdamW with decoupled weight decay. `lambda_raw` only moves when the
/// mixing weight is learned, and is never decayed.
fn adamw_update(state: &mut TrainState, grads: &EncoderParams, config: &TrainConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let learn_lambda = config.solver.learn_lambda;

    let params = state.params.tensors_mut();
    let m = state.first_moment.tensors_mut();
    let v = state.second_moment.tensors_mut();
    let g = grads.tensors();
    let last = g.len() - 1;
    for (k, (((p, m), v), g)) in params.into_iter().zip(m).zip(v).zip(g).enumerate() {
        let is_lambda = k == last;
        if is_lambda && !learn_lambda {
            continue;
        }
        let decay = if is_lambda { 0.0 } else { config.weight_decay };
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *p -= lr * decay * *p;
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
}

/// Resample to `config.points` and normalize into the unit ball.
pub fn prepare_cloud(cloud: &PointCloud, points: usize, seed: u64) -> Result<PointCloud> {
    let sampled = if cloud.len() == points {
        cloud.clone()
    } else {
        cloud.downsample_random(points, seed)?
    };
    Ok(sampled.normalize())
}

pub fn pretrain(clouds: &[PointCloud], config: &TrainConfig) -> Result<TrainState> {
    pretrain_with(clouds, config, 1, |_, _| Ok(()))
}

/// Full EM pretraining. `on_epoch` runs after every epoch with the updated
/// state (metrics logging, checkpoints). E-steps inside a batch run on up to
/// `threads` workers; results are reduced in dataset order, so the outcome
/// does not depend on the thread count.
pub fn pretrain_with<F>(
    clouds: &[PointCloud],
    config: &TrainConfig,
    threads: usize,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    config.validate()?;
    if clouds.is_empty() {
        return Err(Error::Config("pretraining needs at least one cloud".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let dataset: Vec<PointCloud> = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| prepare_cloud(c, config.points, config.seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;

    let mut state = TrainState::new(config)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_0da7a);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut order_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut residual: f64 = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let params = &state.params;
            let solver = &config.solver;
            let batch: Vec<EStep> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| e_step(params, &dataset[i], solver))
                    .collect::<Result<_>>()
            })?;
            for s in &batch {
                residual = residual.max(s.plan.max_marginal_residual());
            }
            let batch_id = state.step;
            let m = m_step_labeled(&mut state, &batch, config, lr, batch_id)?;
            let weight = chunk.len() as f64;
            sums.0 += m.l_soft * weight;
            sums.1 += m.l_orth * weight;
            sums.2 += m.l_total * weight;
        }
        let n = dataset.len() as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            l_soft: sums.0 / n,
            l_orth: sums.1 / n,
            l_total: sums.2 / n,
            lr,
            max_marginal_residual: residual,
        };
        state.epoch = epoch + 1;
        state.history.push(metrics);
        on_epoch(&state, &metrics)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::blob_cloud;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            points: 32,
            solver: SolverConfig {
                clusters: 2,
                ..SolverConfig::default()
            },
            encoder: BackboneConfig {
                hidden: vec![8],
                feature_dim: 4,
                global_context: true,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at_epoch(0), 1e-3);
        assert_eq!(c.lr_at_epoch(19), 1e-3);
        assert!((c.lr_at_epoch(20) - 7e-4).abs() < 1e-18);
        assert!((c.lr_at_epoch(40) - 0.00049).abs() < 1e-15);
    }

    #[test]
    fn config_toml_roundtrip() {
        let c = tiny_config();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 3\n[solver]\nclusters = 4\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.solver.clusters, 4);
        assert_eq!(partial.solver.epsilon, 1e-3);
        assert!(TrainConfig::from_toml("epochz = 3\n").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut config = tiny_config();
        config.epochs = 0;
        let (cloud, _) = blob_cloud(2, 16, 10.0, 1.0, 1);
        let state = pretrain(&[cloud], &config).unwrap();
        assert!(state.history.is_empty());
        assert_eq!(state.params, TrainState::new(&config).unwrap().params);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(pretrain(&[], &tiny_config()).is_err());
    }

    #[test]
    fn e_step_keeps_equipartition_and_is_deterministic() {
        let config = tiny_config();
        let state = TrainState::new(&config).unwrap();
        let (cloud, _) = blob_cloud(2, 16, 10.0, 1.0, 4);
        let cloud = cloud.normalize();
        let a = e_step(&state.params, &cloud, &config.solver).unwrap();
        let b = e_step(&state.params, &cloud, &config.solver).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.equipartition_deviation() < 32.0 * 1e-6);
    }

    #[test]
    fn converged_e_step_meets_tolerance() {
        let config = tiny_config();
        let state = TrainState::new(&config).unwrap();
        let (cloud, _) = blob_cloud(2, 16, 10.0, 1.0, 4);
        let step = e_step_with(&state.params, &cloud.normalize(), &config.solver, SolveMode::Converged).unwrap();
        assert!(step.plan.max_marginal_residual() < config.solver.tol);
        let mut wrong = config.solver.clone();
        wrong.clusters = 3;
        assert!(matches!(e_step(&state.params, &cloud, &wrong), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let config = tiny_config();
        let mut state = TrainState::new(&config).unwrap();
        let (cloud, _) = blob_cloud(2, 16, 10.0, 1.0, 4);
        let step = e_step(&state.params, &cloud.normalize(), &config.solver).unwrap();
        let before = state.params.clone();
        m_step(&mut state, &[step], &config, 0.0).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(state.step, 1);
        assert!(state.first_moment.to_flat().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_gradient_moves_only_by_weight_decay() {
        let config = tiny_config();
        let mut state = TrainState::new(&config).unwrap();
        let before = state.params.clone();
        let zero = state.params.zeros_like();
        let lr = 0.01;
        adamw_update(&mut state, &zero, &config, lr);
        for ((name, a), b) in before
            .scalar_names()
            .iter()
            .zip(before.to_flat())
            .zip(state.params.to_flat())
        {
            let expected = if name == "lambda_raw" { a } else { a * (1.0 - lr * config.weight_decay) };
            assert!((b - expected).abs() <= 1e-15 * expected.abs(), "{name}");
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let config = tiny_config();
        let mut state = TrainState::new(&config).unwrap();
        assert!(m_step(&mut state, &[], &config, 1e-3).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let config = tiny_config();
        let clouds: Vec<_> = (0..4).map(|s| blob_cloud(2, 16, 10.0, 1.0, s).0).collect();
        let a = pretrain_with(&clouds, &config, 1, |_, _| Ok(())).unwrap();
        let b = pretrain_with(&clouds, &config, 3, |_, _| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn learned_lambda_moves() {
        let mut config = tiny_config();
        config.solver.learn_lambda = true;
        let clouds: Vec<_> = (0..2).map(|s| blob_cloud(2, 16, 10.0, 1.0, s).0).collect();
        let state = pretrain(&clouds, &config).unwrap();
        assert_ne!(state.params.lambda_raw, 0.0);
        config.solver.learn_lambda = false;
        let state = pretrain(&clouds, &config).unwrap();
        assert_eq!(state.params.lambda_raw, logit(0.5));
    }
}
