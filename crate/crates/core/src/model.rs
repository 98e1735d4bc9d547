//! Convolutional conditional neural process with a mixture-density head.
//!
//! The pipeline is `encode → backbone → decode → head`:
//!
//! * the context set is smoothed onto a uniform grid with a Gaussian kernel,
//!   giving a density channel and a density-normalised data channel;
//! * a stride-1 stack of same-padded convolutions with ReLU processes the grid,
//!   adding a residual connection on every second layer;
//! * features are read off at arbitrary targets by kernel-weighted averaging
//!   over grid nodes;
//! * a small MLP turns each target's features into `K` mixture weights,
//!   means and variances.
//!
//! Both kernel lengthscales are learnable and stored as logarithms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use crate::uncertainty::{MixtureParams, VARIANCE_FLOOR};

/// Added to the encoder density before normalising the data channel.
pub const DENSITY_EPS: f64 = 1e-8;

/// Added to the decoder's kernel-weight sum before normalising.
pub const DECODE_EPS: f64 = 1e-12;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("point has dimension {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("target {index} at {coords:?} lies outside the model grid")]
    OutsideGrid { index: usize, coords: Vec<f64> },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("prediction for target {0} is not finite")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Self {
        Point { coords }
    }

    pub fn x(x: f64) -> Self {
        Point { coords: vec![x] }
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Point { coords: vec![x, y] }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    fn sqdist(&self, other: &[f64]) -> f64 {
        self.coords.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: Point,
    pub value: f64,
}

impl Observation {
    pub fn new(point: Point, value: f64) -> Self {
        Observation { point, value }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.spacing()
    }
}

/// Uniform grid; nodes are enumerated row-major over the axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<AxisSpec>,
}

impl GridSpec {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(ModelError::Config(format!("grid needs 1 or 2 axes, got {}", axes.len())));
        }
        for a in &axes {
            if !(a.upper > a.lower) || a.count < 8 {
                return Err(ModelError::Config(format!(
                    "axis [{}, {}] with {} nodes (need upper > lower and at least 8 nodes)",
                    a.lower, a.upper, a.count
                )));
            }
        }
        Ok(GridSpec { axes })
    }

    /// Grid over `domain` padded by 10% of its extent on each side.
    pub fn padded(domain: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        if domain.len() != counts.len() {
            return Err(ModelError::Config("domain and node counts differ in dimension".into()));
        }
        GridSpec::new(
            domain
                .iter()
                .zip(counts)
                .map(|(&(lo, hi), &count)| {
                    let pad = 0.1 * (hi - lo);
                    AxisSpec {
                        lower: lo - pad,
                        upper: hi + pad,
                        count,
                    }
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.count).collect()
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes.iter().map(AxisSpec::spacing).fold(f64::INFINITY, f64::min)
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        match self.axes.as_slice() {
            [a] => (0..a.count).map(|i| vec![a.node(i)]).collect(),
            [a, b] => (0..a.count)
                .flat_map(|i| (0..b.count).map(move |j| vec![a.node(i), b.node(j)]))
                .collect(),
            _ => unreachable!("grid dimension is validated"),
        }
    }

    /// True when `p` is inside the box or outside it by at most one spacing.
    pub fn admits(&self, p: &Point) -> bool {
        p.dim() == self.dim()
            && self.axes.iter().zip(&p.coords).all(|(a, &c)| {
                let h = a.spacing();
                c.is_finite() && c >= a.lower - h && c <= a.upper + h
            })
    }
}

/// Gridded feature map: `channels` has shape `[C, nodes...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub grid: GridSpec,
    pub channels: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub components: usize,
    /// Scenario domain per axis; the grid pads it by 10% per side.
    pub domain: Vec<(f64, f64)>,
    pub grid_nodes: Vec<usize>,
    pub backbone_depth: usize,
    pub backbone_width: usize,
    pub kernel_size: usize,
    pub head_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn default_1d() -> Self {
        ModelConfig {
            dim: 1,
            components: 2,
            domain: vec![(-2.0, 2.0)],
            grid_nodes: vec![128],
            backbone_depth: 6,
            backbone_width: 32,
            kernel_size: 5,
            head_hidden: vec![32, 32],
        }
    }

    pub fn default_2d() -> Self {
        ModelConfig {
            dim: 2,
            components: 2,
            domain: vec![(0.0, 1.0), (0.0, 1.0)],
            grid_nodes: vec![48, 48],
            backbone_depth: 6,
            backbone_width: 32,
            kernel_size: 5,
            head_hidden: vec![32, 32],
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::padded(&self.domain, &self.grid_nodes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(ModelError::Config(format!("dimension must be 1 or 2, got {}", self.dim)));
        }
        if self.domain.len() != self.dim || self.grid_nodes.len() != self.dim {
            return Err(ModelError::Config("domain/grid dimension does not match".into()));
        }
        if self.components == 0 {
            return Err(ModelError::Config("component count must be at least 1".into()));
        }
        if self.backbone_depth == 0 || self.backbone_width == 0 {
            return Err(ModelError::Config("backbone needs at least one layer and one channel".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(ModelError::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.head_hidden.contains(&0) {
            return Err(ModelError::Config("head layers need at least one unit".into()));
        }
        self.grid().map(|_| ())
    }
}

/// Affine map applied to targets before the model sees them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

impl Normalization {
    /// Mean and standard deviation of `values`; a constant input keeps unit scale.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            s1 += v;
            s2 += v * v;
        }
        if n == 0 {
            return Normalization::default();
        }
        let mean = s1 / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        Normalization { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Every learnable value of the model plus its fixed configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub encoder_log_lengthscale: Tensor,
    pub decoder_log_lengthscale: Tensor,
    pub backbone: Vec<ConvLayer>,
    pub head: Vec<DenseLayer>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-limit..=limit)).collect()).expect("positive extents")
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, lengthscales at twice the grid spacing.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_ls = (2.0 * grid.min_spacing()).ln();
        let k = config.kernel_size;
        let taps = k.pow(config.dim as u32);
        let mut backbone = Vec::with_capacity(config.backbone_depth);
        let mut c_in = 2;
        for _ in 0..config.backbone_depth {
            let c_out = config.backbone_width;
            let mut shape = vec![c_out, c_in];
            shape.extend(std::iter::repeat_n(k, config.dim));
            backbone.push(ConvLayer {
                kernel: glorot(&mut rng, shape, c_in * taps, c_out * taps),
                bias: Tensor::zeros(vec![c_out])?,
            });
            c_in = c_out;
        }
        let mut head = Vec::new();
        let mut n_in = config.backbone_width;
        for &n_out in config.head_hidden.iter().chain(std::iter::once(&(3 * config.components))) {
            head.push(DenseLayer {
                weight: glorot(&mut rng, vec![n_out, n_in], n_in, n_out),
                bias: Tensor::zeros(vec![n_out])?,
            });
            n_in = n_out;
        }
        Ok(ModelParams {
            config,
            normalization: Normalization::default(),
            encoder_log_lengthscale: Tensor::scalar(log_ls),
            decoder_log_lengthscale: Tensor::scalar(log_ls),
            backbone,
            head,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.config.grid().expect("validated at construction")
    }

    pub fn components(&self) -> usize {
        self.config.components
    }

    /// Parameter tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.log_lengthscale".to_string(), &self.encoder_log_lengthscale),
            ("decoder.log_lengthscale".to_string(), &self.decoder_log_lengthscale),
        ];
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &l.kernel));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &l.weight));
            out.push((format!("head.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.encoder_log_lengthscale, &mut self.decoder_log_lengthscale];
        for l in &mut self.backbone {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        for l in &mut self.head {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.requires_grad = on;
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Registers every tensor in `g`; `f` decides how each one is inserted.
    pub fn bind_with(&self, g: &mut Graph, mut f: impl FnMut(&mut Graph, usize, &Tensor) -> NodeId) -> BoundParams {
        let named = self.named_tensors();
        let ids: Vec<NodeId> = named.iter().enumerate().map(|(i, (_, t))| f(g, i, t)).collect();
        let nb = self.backbone.len();
        BoundParams {
            encoder_log_ls: ids[0],
            decoder_log_ls: ids[1],
            backbone: (0..nb).map(|i| (ids[2 + 2 * i], ids[3 + 2 * i])).collect(),
            head: (0..self.head.len())
                .map(|i| (ids[2 + 2 * nb + 2 * i], ids[3 + 2 * nb + 2 * i]))
                .collect(),
            ids,
        }
    }

    /// Registers every tensor, tracking gradients per each tensor's flag.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, |g, _, t| g.leaf(t))
    }

    /// Registers every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, |g, _, t| g.constant(t.shape().to_vec(), t.values().to_vec()).expect("valid tensor"))
    }

    /// Adds the graph's gradients into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) {
        for (t, id) in self.tensors_mut().into_iter().zip(&bound.ids) {
            g.accumulate_into(*id, t);
        }
    }
}

/// Graph handles for every parameter tensor, in `named_tensors` order.
pub struct BoundParams {
    pub encoder_log_ls: NodeId,
    pub decoder_log_ls: NodeId,
    pub backbone: Vec<(NodeId, NodeId)>,
    pub head: Vec<(NodeId, NodeId)>,
    pub ids: Vec<NodeId>,
}

fn check_dim(points: impl Iterator<Item = usize>, expected: usize) -> Result<()> {
    for found in points {
        if found != expected {
            return Err(ModelError::Dimension { expected, found });
        }
    }
    Ok(())
}

/// Graph form of the encoder; `values` are the (already normalised) context values.
pub fn encode_graph(
    g: &mut Graph,
    context: &[Point],
    values: &[f64],
    grid: &GridSpec,
    log_ls: NodeId,
) -> Result<NodeId> {
    check_dim(context.iter().map(Point::dim), grid.dim())?;
    let n_nodes = grid.n_nodes();
    let mut shape = vec![2];
    shape.extend(grid.extents());
    if context.is_empty() {
        return Ok(g.constant(shape, vec![0.0; 2 * n_nodes])?);
    }
    // Canonical order makes the kernel sums independent of input order, bit for bit.
    let mut order: Vec<usize> = (0..context.len()).collect();
    order.sort_by(|&a, &b| {
        context[a]
            .coords
            .iter()
            .zip(&context[b].coords)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(values[a].total_cmp(&values[b]))
    });
    let nc = context.len();
    let nodes = grid.nodes();
    let sqdist: Vec<f64> = nodes
        .iter()
        .flat_map(|n| order.iter().map(move |&i| context[i].sqdist(n)))
        .collect();
    let values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let w = g.rbf(sqdist, vec![n_nodes, nc], log_ls)?;
    let density = g.sum_rows(w);
    let y = g.constant(vec![nc, 1], values)?;
    let weighted = g.matmul(w, y)?;
    let weighted = g.reshape(weighted, vec![n_nodes])?;
    let denom = g.add_scalar(density, DENSITY_EPS);
    let data = g.div(weighted, denom)?;
    let stacked = g.stack(&[density, data])?;
    Ok(g.reshape(stacked, shape)?)
}

/// Graph form of the backbone: `relu(conv)` per layer; layer `l` (1-based,
/// even) also adds the output of layer `l − 2` when channel counts agree.
pub fn backbone_graph(g: &mut Graph, input: NodeId, layers: &[(NodeId, NodeId)]) -> Result<NodeId> {
    let mut history = vec![input];
    for (i, &(k, b)) in layers.iter().enumerate() {
        let l = i + 1;
        let prev = history[i];
        let z = g.conv_same(prev, k, b)?;
        let mut h = g.relu(z);
        if l % 2 == 0 {
            let skip = history[l - 2];
            if g.shape(skip) == g.shape(h) {
                h = g.add(h, skip)?;
            }
        }
        history.push(h);
    }
    Ok(*history.last().unwrap())
}

/// Graph form of the decoder: `[C, nodes...]` features → `[T, C]`.
pub fn decode_graph(g: &mut Graph, features: NodeId, grid: &GridSpec, targets: &[Point], log_ls: NodeId) -> Result<NodeId> {
    check_dim(targets.iter().map(Point::dim), grid.dim())?;
    if let Some(index) = targets.iter().position(|p| !grid.admits(p)) {
        return Err(ModelError::OutsideGrid {
            index,
            coords: targets[index].coords.clone(),
        });
    }
    if targets.is_empty() {
        return Err(ModelError::Config("decode needs at least one target".into()));
    }
    let c = g.shape(features)[0];
    let n_nodes = grid.n_nodes();
    let nodes = grid.nodes();
    let sqdist: Vec<f64> = targets.iter().flat_map(|t| nodes.iter().map(move |n| t.sqdist(n))).collect();
    let w = g.rbf(sqdist, vec![targets.len(), n_nodes], log_ls)?;
    let norm = g.sum_rows(w);
    let norm = g.add_scalar(norm, DECODE_EPS);
    let flat = g.reshape(features, vec![c, n_nodes])?;
    let flat_t = g.transpose(flat)?;
    let num = g.matmul(w, flat_t)?;
    let norm = g.broadcast_rows(norm, c)?;
    Ok(g.div(num, norm)?)
}

/// Graph handles of the mixture parameters, each `[T, K]`.
pub struct MixtureNodes {
    pub log_weights: NodeId,
    pub weights: NodeId,
    pub means: NodeId,
    pub variances: NodeId,
}

/// Graph form of the head: relu MLP → `3K` outputs per target, laid out as
/// `[weight logits | means | raw variances]`.
pub fn head_graph(
    g: &mut Graph,
    features: NodeId,
    layers: &[(NodeId, NodeId)],
    components: usize,
    norm: Normalization,
) -> Result<MixtureNodes> {
    let mut h = features;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = g.dense(h, w, b)?;
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    let k = components;
    let logits = g.slice_cols(h, 0, k)?;
    let raw_means = g.slice_cols(h, k, 2 * k)?;
    let raw_vars = g.slice_cols(h, 2 * k, 3 * k)?;
    let weights = g.softmax_rows(logits);
    let log_weights = g.log_softmax_rows(logits);
    let means = g.scale(raw_means, norm.std);
    let means = g.add_scalar(means, norm.mean);
    let variances = g.softplus(raw_vars);
    let variances = g.scale(variances, norm.std * norm.std);
    let variances = g.add_scalar(variances, VARIANCE_FLOOR);
    Ok(MixtureNodes {
        log_weights,
        weights,
        means,
        variances,
    })
}

/// Full forward pass recorded on `g`.
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    context: &[Observation],
    targets: &[Point],
) -> Result<MixtureNodes> {
    let grid = params.grid();
    let norm = params.normalization;
    let points: Vec<Point> = context.iter().map(|o| o.point.clone()).collect();
    let values: Vec<f64> = context.iter().map(|o| (o.value - norm.mean) / norm.std).collect();
    let encoded = encode_graph(g, &points, &values, &grid, bound.encoder_log_ls)?;
    let features = backbone_graph(g, encoded, &bound.backbone)?;
    let decoded = decode_graph(g, features, &grid, targets, bound.decoder_log_ls)?;
    head_graph(g, decoded, &bound.head, params.components(), norm)
}

/// Reads `[T, K]` mixture nodes back into per-target parameters.
pub fn read_mixtures(g: &Graph, m: &MixtureNodes, k: usize) -> Result<Vec<MixtureParams>> {
    let (w, mu, var) = (g.value(m.weights), g.value(m.means), g.value(m.variances));
    let t = w.len() / k;
    (0..t)
        .map(|j| {
            let r = j * k..(j + 1) * k;
            let mp = MixtureParams::new(w[r.clone()].to_vec(), mu[r.clone()].to_vec(), var[r].to_vec());
            let finite = mp.weights.iter().chain(&mp.means).chain(&mp.variances).all(|v| v.is_finite());
            if finite {
                Ok(mp)
            } else {
                Err(ModelError::NonFinite(j))
            }
        })
        .collect()
}

/// Mixture-graph negative log-likelihood, averaged over targets.
pub fn nll_graph(g: &mut Graph, m: &MixtureNodes, truths: &[f64]) -> Result<NodeId> {
    let shape = g.shape(m.means).to_vec();
    let k = shape[1];
    let y = g.constant(shape.clone(), truths.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect())?;
    let diff = g.sub(y, m.means)?;
    let sq = g.mul(diff, diff)?;
    let ratio = g.div(sq, m.variances)?;
    let logvar = g.activation(crate::tensor::Activation::Log, m.variances)?;
    let quad = g.add(logvar, ratio)?;
    let quad = g.scale(quad, 0.5);
    let logw = g.clamp_min(m.log_weights, crate::uncertainty::LOG_WEIGHT_FLOOR);
    let terms = g.sub(logw, quad)?;
    let terms = g.add_scalar(terms, -HALF_LN_2PI);
    let lse = g.logsumexp_rows(terms);
    let mean = g.mean_all(lse);
    Ok(g.scale(mean, -1.0))
}

/// Anything that maps a context set to per-target predictive mixtures.
pub trait Predictor: Sync {
    fn predict(&self, context: &[Observation], targets: &[Point]) -> Result<Vec<MixtureParams>>;

    fn components(&self) -> usize;
}

impl Predictor for ModelParams {
    fn predict(&self, context: &[Observation], targets: &[Point]) -> Result<Vec<MixtureParams>> {
        predict(self, context, targets)
    }

    fn components(&self) -> usize {
        self.config.components
    }
}

/// Predictive mixtures at `targets` given `context`. Pure in its inputs.
pub fn predict(params: &ModelParams, context: &[Observation], targets: &[Point]) -> Result<Vec<MixtureParams>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let m = forward_graph(&mut g, params, &bound, context, targets)?;
    read_mixtures(&g, &m, params.components())
}

/// Encodes `context` onto `grid` with a fixed lengthscale.
pub fn set_conv_encode(context: &[Observation], grid: &GridSpec, lengthscale: f64) -> Result<FeatureGrid> {
    let mut g = Graph::new();
    let ls = g.constant(vec![1], vec![lengthscale.ln()])?;
    let points: Vec<Point> = context.iter().map(|o| o.point.clone()).collect();
    let values: Vec<f64> = context.iter().map(|o| o.value).collect();
    let id = encode_graph(&mut g, &points, &values, grid, ls)?;
    Ok(FeatureGrid {
        grid: grid.clone(),
        channels: g.to_tensor(id),
    })
}

/// Runs the backbone of `params` over a feature grid.
pub fn backbone_apply(fg: &FeatureGrid, params: &ModelParams) -> Result<FeatureGrid> {
    let expected = params.backbone.first().map(|l| l.kernel.shape()[1]).unwrap_or(2);
    if fg.channels.shape()[0] != expected {
        return Err(TensorError::ShapeMismatch {
            op: "backbone_apply",
            left: fg.channels.shape().to_vec(),
            right: params.backbone[0].kernel.shape().to_vec(),
        }
        .into());
    }
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(fg.channels.shape().to_vec(), fg.channels.values().to_vec())?;
    let out = backbone_graph(&mut g, x, &bound.backbone)?;
    Ok(FeatureGrid {
        grid: fg.grid.clone(),
        channels: g.to_tensor(out),
    })
}

/// Kernel-weighted read-out of a feature grid at `targets`; one row per target.
pub fn decode_at(fg: &FeatureGrid, targets: &[Point], lengthscale: f64) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let ls = g.constant(vec![1], vec![lengthscale.ln()])?;
    let x = g.constant(fg.channels.shape().to_vec(), fg.channels.values().to_vec())?;
    let out = decode_graph(&mut g, x, &fg.grid, targets, ls)?;
    let c = fg.channels.shape()[0];
    Ok(g.value(out).chunks(c).map(<[f64]>::to_vec).collect())
}

/// Applies the mixture head to per-target feature rows.
pub fn mdn_head(features: &[Vec<f64>], params: &ModelParams) -> Result<Vec<MixtureParams>> {
    let width = params.head[0].weight.shape()[1];
    if let Some(bad) = features.iter().find(|f| f.len() != width) {
        return Err(TensorError::ShapeMismatch {
            op: "mdn_head",
            left: vec![bad.len()],
            right: params.head[0].weight.shape().to_vec(),
        }
        .into());
    }
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(vec![features.len(), width], features.concat())?;
    let m = head_graph(&mut g, x, &bound.head, params.components(), params.normalization)?;
    read_mixtures(&g, &m, params.components())
}
