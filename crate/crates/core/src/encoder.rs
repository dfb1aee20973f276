//! Per-point MLP encoder with a linear segmentation head.
//!
//! Every point passes through the same stack of dense layers (ReLU between
//! them, linear output), which yields the feature matrix `F`. With global
//! context enabled the column-wise max of `F` is appended to every row before
//! the head. The head produces `J` logits per point and a row softmax turns
//! them into the score matrix `S`.
//!
//! [`backward`] is hand-derived and exact: softmax Jacobian, head, max-pool
//! subgradient (routed to the lowest arg-max row) and the MLP layers.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Widths of the hidden ReLU layers between the 3D input and the features.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub global_context: bool,
    /// Number of clusters `J`, i.e. the head's output width.
    pub clusters: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 128],
            feature_dim: 128,
            global_context: true,
            clusters: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) || self.feature_dim == 0 {
            return Err(Error::Config("encoder layer widths must be positive".into()));
        }
        if self.clusters < 2 {
            return Err(Error::Config(format!(
                "need at least 2 clusters, got {}",
                self.clusters
            )));
        }
        Ok(())
    }

    /// Input width of the head.
    pub fn head_input_dim(&self) -> usize {
        if self.global_context {
            2 * self.feature_dim
        } else {
            self.feature_dim
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![3];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// A dense layer, `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-bound..=bound)
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// All trainable weights. The same type doubles as a gradient buffer and as
/// optimizer moment storage, so shapes always line up.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<Dense>,
    pub head: Dense,
    /// Unconstrained weight behind `lambda = sigmoid(lambda_raw)`.
    pub lambda_raw: f64,
}

impl EncoderParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::uniform(i, o, &mut rng))
            .collect();
        let head = Dense::uniform(config.head_input_dim(), config.clusters, &mut rng);
        Ok(Self {
            config: config.clone(),
            layers,
            head,
            lambda_raw: 0.0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            head: Dense::zeros(self.head.weight.nrows(), self.head.weight.ncols()),
            lambda_raw: 0.0,
        }
    }

    pub fn clusters(&self) -> usize {
        self.head.weight.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * self.layers.len() + 3);
        for l in 0..self.layers.len() {
            names.push(format!("mlp.{l}.weight"));
            names.push(format!("mlp.{l}.bias"));
        }
        names.extend(["head.weight", "head.bias", "lambda_raw"].map(String::from));
        names
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in self.layers.iter().chain(std::iter::once(&self.head)) {
            shapes.push(l.weight.shape().to_vec());
            shapes.push(l.bias.shape().to_vec());
        }
        shapes.push(vec![]);
        shapes
    }

    /// Flat views of every tensor, in [`Self::tensor_names`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self.layers.iter().chain(std::iter::once(&self.head)) {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(std::slice::from_ref(&self.lambda_raw));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(std::slice::from_mut(&mut self.lambda_raw));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every scalar flattened in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} scalars, got {}",
                self.num_scalars(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Human-readable name for every flattened scalar, e.g. `head.weight[3,1]`.
    pub fn scalar_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_scalars());
        for (name, shape) in self.tensor_names().iter().zip(self.tensor_shapes()) {
            match shape.as_slice() {
                [] => names.push(name.clone()),
                [n] => names.extend((0..*n).map(|i| format!("{name}[{i}]"))),
                [r, c] => {
                    for i in 0..*r {
                        names.extend((0..*c).map(|j| format!("{name}[{i},{j}]")));
                    }
                }
                _ => unreachable!("tensors are at most 2-D"),
            }
        }
        names
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, elementwise over matching tensors.
    pub fn add_scaled(&mut self, other: &EncoderParams, alpha: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.tensor_shapes() == other.tensor_shapes()
    }
}

/// Intermediates of one forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    /// Pre-activations of each MLP layer; the last one is `features`.
    pre_activations: Vec<Array2<f64>>,
    /// Row index holding the max of each feature column.
    pool_argmax: Vec<usize>,
    head_input: Array2<f64>,
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    pub scores: Array2<f64>,
}

impl ForwardTrace {
    pub fn num_points(&self) -> usize {
        self.scores.nrows()
    }

    pub fn global_feature(&self) -> Option<Array1<f64>> {
        (!self.pool_argmax.is_empty()).then(|| {
            Array1::from_iter(
                self.pool_argmax
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| self.features[[i, k]]),
            )
        })
    }
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Numerically stable softmax of each row. Entries stay strictly positive
/// unless a logit gap exceeds ~745.
pub fn row_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Column-wise max with the lowest row index winning ties.
fn max_pool(features: &Array2<f64>) -> Vec<usize> {
    features
        .columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn forward(params: &EncoderParams, cloud: &PointCloud) -> ForwardTrace {
    forward_matrix(params, cloud.to_matrix())
}

pub fn forward_matrix(params: &EncoderParams, input: Array2<f64>) -> ForwardTrace {
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    let mut activation = input.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(activation.view());
        if l < last {
            activation = relu(&z);
        }
        pre_activations.push(z);
    }
    let features = pre_activations[last].clone();

    let (pool_argmax, head_input) = if params.config.global_context {
        let argmax = max_pool(&features);
        let n = features.nrows();
        let d = features.ncols();
        let mut h = Array2::zeros((n, 2 * d));
        h.slice_mut(s![.., ..d]).assign(&features);
        for (k, &i) in argmax.iter().enumerate() {
            let g = features[[i, k]];
            h.slice_mut(s![.., d + k]).fill(g);
        }
        (argmax, h)
    } else {
        (Vec::new(), features.clone())
    };

    let logits = params.head.apply(head_input.view());
    let scores = row_softmax(logits.view());
    ForwardTrace {
        input,
        pre_activations,
        pool_argmax,
        head_input,
        features,
        logits,
        scores,
    }
}

/// Exact parameter gradients given upstream gradients on `S` and `F`.
///
/// `d_scores` is `dL/dS` (not `dL/dlogits`); the softmax Jacobian is applied
/// here. The returned buffer has `lambda_raw = 0`.
pub fn backward(
    trace: &ForwardTrace,
    params: &EncoderParams,
    d_scores: ArrayView2<'_, f64>,
    d_features: ArrayView2<'_, f64>,
) -> Result<EncoderParams> {
    if d_scores.dim() != trace.scores.dim() {
        return Err(Error::Shape(format!(
            "dL/dS is {:?}, scores are {:?}",
            d_scores.dim(),
            trace.scores.dim()
        )));
    }
    if d_features.dim() != trace.features.dim() {
        return Err(Error::Shape(format!(
            "dL/dF is {:?}, features are {:?}",
            d_features.dim(),
            trace.features.dim()
        )));
    }
    let mut grads = params.zeros_like();

    // dlogits_ij = s_ij (g_ij - sum_k g_ik s_ik)
    let weighted = (&d_scores * &trace.scores).sum_axis(Axis(1));
    let mut d_logits = d_scores.to_owned();
    Zip::from(d_logits.rows_mut())
        .and(trace.scores.rows())
        .and(&weighted)
        .for_each(|mut g, s, &w| {
            g.zip_mut_with(&s, |gv, &sv| *gv = sv * (*gv - w));
        });

    grads.head.weight = trace.head_input.t().dot(&d_logits);
    grads.head.bias = d_logits.sum_axis(Axis(0));
    let d_head_input = d_logits.dot(&params.head.weight.t());

    let d = trace.features.ncols();
    let mut d_z = d_features.to_owned();
    d_z += &d_head_input.slice(s![.., ..d]);
    if params.config.global_context {
        let d_global = d_head_input.slice(s![.., d..]).sum_axis(Axis(0));
        for (k, &i) in trace.pool_argmax.iter().enumerate() {
            d_z[[i, k]] += d_global[k];
        }
    }

    for l in (0..params.layers.len()).rev() {
        let below = if l == 0 {
            trace.input.clone()
        } else {
            relu(&trace.pre_activations[l - 1])
        };
        grads.layers[l].weight = below.t().dot(&d_z);
        grads.layers[l].bias = d_z.sum_axis(Axis(0));
        if l > 0 {
            let mut d_below = d_z.dot(&params.layers[l].weight.t());
            d_below.zip_mut_with(&trace.pre_activations[l - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            d_z = d_below;
        }
    }
    Ok(grads)
}
