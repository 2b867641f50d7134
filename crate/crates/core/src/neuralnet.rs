//! A minimal deterministic CNN engine: 1D/2D/3D convolution, average
//! pooling, batch normalization, dense/dropout/softmax layers, manual
//! backpropagation, and three optimizers.
//!
//! All numerics are 64-bit throughout. Every convolution is evaluated
//! internally as a 3-D convolution with unused axes of extent 1, so the
//! three ranks share one code path.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown network kind: {0}")]
    UnknownKind(String),
    #[error("invalid class count {0}: must be 2 or 6")]
    InvalidClassCount(usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite activation in layer {0}")]
    NonFinite(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Dense row-major tensor with an explicit batch axis (`shape[0]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn feature_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// View one batch item as a slice.
    pub fn item(&self, b: usize) -> &[f64] {
        let f = self.feature_len();
        &self.data[b * f..(b + 1) * f]
    }

    /// Stack per-item feature vectors into a batch tensor.
    pub fn from_items(item_shape: &[usize], items: &[&[f64]]) -> Self {
        let f: usize = item_shape.iter().product();
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        let mut data = Vec::with_capacity(items.len() * f);
        for it in items {
            assert_eq!(it.len(), f);
            data.extend_from_slice(it);
        }
        Tensor { shape, data }
    }
}

/// One architectural layer; shapes chain from the network's input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Same-padded convolution, kernel 3 per spatial axis, ReLU activation.
    Conv { rank: usize, filters: usize, stride: usize },
    /// Size-2, stride-2 average pool per spatial axis, ceiling mode.
    AvgPool { rank: usize },
    Flatten,
    /// Batch normalization over flattened features.
    BatchNorm,
    /// Fully connected layer; `relu` picks the hidden activation.
    Dense { units: usize, relu: bool },
    Dropout { rate: f64 },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Cnn1dSpv,
    Cnn1dCsp,
    Cnn1dRaw,
    Cnn2d,
    Cnn3d,
}

impl NetKind {
    pub const ALL: [NetKind; 5] = [
        NetKind::Cnn1dSpv,
        NetKind::Cnn1dCsp,
        NetKind::Cnn1dRaw,
        NetKind::Cnn2d,
        NetKind::Cnn3d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NetKind::Cnn1dSpv => "cnn1d_spv",
            NetKind::Cnn1dCsp => "cnn1d_csp",
            NetKind::Cnn1dRaw => "cnn1d_raw",
            NetKind::Cnn2d => "cnn2d",
            NetKind::Cnn3d => "cnn3d",
        }
    }
}

impl FromStr for NetKind {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "cnn1d_spv" => Ok(NetKind::Cnn1dSpv),
            "cnn1d_csp" => Ok(NetKind::Cnn1dCsp),
            "cnn1d_raw" => Ok(NetKind::Cnn1dRaw),
            "cnn2d" => Ok(NetKind::Cnn2d),
            "cnn3d" => Ok(NetKind::Cnn3d),
            other => Err(NnError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    /// Per-item input shape, channels last (e.g. `[42, 1]` or `[32, 32, 3]`).
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub n_classes: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl NetworkSpec {
    /// Output shape after every layer, starting from the input shape.
    /// Dropout and Softmax preserve the preceding shape.
    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match layer {
                LayerSpec::Conv { rank, filters, stride } => {
                    let mut s: Vec<usize> = shape[..*rank]
                        .iter()
                        .map(|&d| ceil_div(d, *stride))
                        .collect();
                    s.push(*filters);
                    s
                }
                LayerSpec::AvgPool { rank } => {
                    let mut s: Vec<usize> =
                        shape[..*rank].iter().map(|&d| ceil_div(d, 2)).collect();
                    s.push(*shape.last().unwrap());
                    s
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::BatchNorm | LayerSpec::Dropout { .. } | LayerSpec::Softmax => shape,
                LayerSpec::Dense { units, .. } => vec![*units],
            };
            out.push(shape.clone());
        }
        out
    }
}

/// Build the standard architecture for a kind (stride-1 convolutions).
pub fn build_cnn(kind: NetKind, n_classes: usize) -> Result<NetworkSpec, NnError> {
    build_cnn_with_stride(kind, n_classes, 1)
}

/// Same architectures with a configurable convolution stride. Stride 3 is
/// an experimental mode provided for comparison; stride 1 is standard.
pub fn build_cnn_with_stride(
    kind: NetKind,
    n_classes: usize,
    conv_stride: usize,
) -> Result<NetworkSpec, NnError> {
    if n_classes != 2 && n_classes != 6 {
        return Err(NnError::InvalidClassCount(n_classes));
    }
    let (input_shape, rank) = match kind {
        NetKind::Cnn1dSpv => (vec![42, 1], 1),
        NetKind::Cnn1dCsp => (vec![6, 1], 1),
        NetKind::Cnn1dRaw => (vec![640, 14], 1),
        NetKind::Cnn2d => (vec![32, 32, 3], 2),
        NetKind::Cnn3d => (vec![5, 32, 32, 3], 3),
    };
    let mut layers = Vec::new();
    for &filters in &[16usize, 32, 32] {
        layers.push(LayerSpec::Conv {
            rank,
            filters,
            stride: conv_stride,
        });
        layers.push(LayerSpec::AvgPool { rank });
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::BatchNorm);
    layers.push(LayerSpec::Dense {
        units: 128,
        relu: true,
    });
    layers.push(LayerSpec::Dropout { rate: 0.5 });
    layers.push(LayerSpec::Dense {
        units: n_classes,
        relu: false,
    });
    layers.push(LayerSpec::Softmax);
    Ok(NetworkSpec {
        kind,
        input_shape,
        layers,
        n_classes,
    })
}

const BN_EPS: f64 = 1e-8;
const BN_MOMENTUM: f64 = 0.1;

/// A layer with its parameters. Convolutions carry canonicalized 3-axis
/// spatial metadata so one kernel loop serves all ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Layer {
    Conv {
        rank: usize,
        in_spatial: [usize; 3],
        ksize: [usize; 3],
        stride: [usize; 3],
        in_ch: usize,
        out_ch: usize,
        /// Layout `[k0][k1][k2][in_ch][out_ch]`.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    AvgPool {
        in_spatial: [usize; 3],
        pool: [usize; 3],
        channels: usize,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
        relu: bool,
        /// Layout `[in_dim][out_dim]`.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

/// Spatial shape of a per-item tensor `[..spatial, channels]`, padded to 3 axes.
fn canonical_spatial(shape: &[usize], rank: usize) -> ([usize; 3], usize) {
    let mut s = [1usize; 3];
    for (i, &d) in shape[..rank].iter().enumerate() {
        s[i] = d;
    }
    (s, *shape.last().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<Layer>,
}

pub enum ForwardMode {
    /// Batch statistics, seeded dropout masks, running-stat updates.
    Train { dropout_seed: u64 },
    /// Running statistics, dropout disabled.
    Infer,
}

/// Per-layer cached state from a forward pass, consumed by `backward`.
pub struct Cache {
    batch: usize,
    inputs: Vec<Tensor>,
    /// Pre-activation values for layers with ReLU.
    preacts: Vec<Option<Tensor>>,
    /// Dropout masks (already inverted-scaled).
    masks: Vec<Option<Vec<f64>>>,
    /// Batch-norm (xhat, inv_std) per batch-norm layer position.
    bn: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Final probabilities.
    pub probs: Tensor,
}

impl Network {
    /// Seeded initialization: fan-in-scaled uniform weights, zero biases,
    /// batch-norm scale 1 / shift 0.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut shape = spec.input_shape.clone();
        for layer_spec in &spec.layers {
            let layer = match layer_spec {
                LayerSpec::Conv { rank, filters, stride } => {
                    let (in_spatial, in_ch) = canonical_spatial(&shape, *rank);
                    let mut ksize = [1usize; 3];
                    let mut strides = [1usize; 3];
                    for a in 0..*rank {
                        ksize[a] = 3;
                        strides[a] = *stride;
                    }
                    let fan_in = ksize.iter().product::<usize>() * in_ch;
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let n_w = ksize.iter().product::<usize>() * in_ch * filters;
                    let weights = (0..n_w).map(|_| rng.gen_range(-limit..limit)).collect();
                    Layer::Conv {
                        rank: *rank,
                        in_spatial,
                        ksize,
                        stride: strides,
                        in_ch,
                        out_ch: *filters,
                        weights,
                        bias: vec![0.0; *filters],
                    }
                }
                LayerSpec::AvgPool { rank } => {
                    let (in_spatial, channels) = canonical_spatial(&shape, *rank);
                    let mut pool = [1usize; 3];
                    for p in pool.iter_mut().take(*rank) {
                        *p = 2;
                    }
                    Layer::AvgPool {
                        in_spatial,
                        pool,
                        channels,
                    }
                }
                LayerSpec::Flatten => Layer::Flatten {
                    in_shape: shape.clone(),
                },
                LayerSpec::BatchNorm => {
                    let dim = shape.iter().product();
                    Layer::BatchNorm {
                        gamma: vec![1.0; dim],
                        beta: vec![0.0; dim],
                        running_mean: vec![0.0; dim],
                        running_var: vec![1.0; dim],
                    }
                }
                LayerSpec::Dense { units, relu } => {
                    let in_dim: usize = shape.iter().product();
                    let limit = (6.0 / in_dim as f64).sqrt();
                    let weights = (0..in_dim * units)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect();
                    Layer::Dense {
                        in_dim,
                        out_dim: *units,
                        relu: *relu,
                        weights,
                        bias: vec![0.0; *units],
                    }
                }
                LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
                LayerSpec::Softmax => Layer::Softmax,
            };
            layers.push(layer);
            shape = match layer_spec {
                LayerSpec::Conv { rank, filters, stride } => {
                    let mut s: Vec<usize> = shape[..*rank]
                        .iter()
                        .map(|&d| ceil_div(d, *stride))
                        .collect();
                    s.push(*filters);
                    s
                }
                LayerSpec::AvgPool { rank } => {
                    let mut s: Vec<usize> =
                        shape[..*rank].iter().map(|&d| ceil_div(d, 2)).collect();
                    s.push(*shape.last().unwrap());
                    s
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units, .. } => vec![*units],
                _ => shape,
            };
        }
        Network {
            spec: spec.clone(),
            layers,
        }
    }

    /// Forward pass. Train mode updates running batch-norm statistics.
    pub fn forward(&mut self, batch: &Tensor, mode: &ForwardMode) -> Result<Cache, NnError> {
        let expected: Vec<usize> = self.spec.input_shape.clone();
        if batch.shape[1..] != expected[..] {
            return Err(NnError::ShapeMismatch {
                expected,
                got: batch.shape[1..].to_vec(),
            });
        }
        let b = batch.batch();
        let train = matches!(mode, ForwardMode::Train { .. });
        let mut drop_rng = match mode {
            ForwardMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(*dropout_seed)),
            ForwardMode::Infer => None,
        };

        let mut x = batch.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = vec![];
        let mut masks = vec![];
        let mut bn = vec![];
        for (li, layer) in self.layers.iter_mut().enumerate() {
            inputs.push(x.clone());
            let mut preact = None;
            let mut mask = None;
            let mut bn_cache = None;
            x = match layer {
                Layer::Conv {
                    in_spatial,
                    ksize,
                    stride,
                    in_ch,
                    out_ch,
                    weights,
                    bias,
                    ..
                } => {
                    let (pre, post) = conv_forward(
                        &x, b, *in_spatial, *ksize, *stride, *in_ch, *out_ch, weights, bias,
                    );
                    preact = Some(pre);
                    post
                }
                Layer::AvgPool {
                    in_spatial,
                    pool,
                    channels,
                } => pool_forward(&x, b, *in_spatial, *pool, *channels),
                Layer::Flatten { .. } => Tensor {
                    shape: vec![b, x.feature_len()],
                    data: x.data.clone(),
                },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let dim = gamma.len();
                    let (mean, var) = if train {
                        let mut mean = vec![0.0; dim];
                        let mut var = vec![0.0; dim];
                        for bi in 0..b {
                            for j in 0..dim {
                                mean[j] += x.data[bi * dim + j];
                            }
                        }
                        for m in mean.iter_mut() {
                            *m /= b as f64;
                        }
                        for bi in 0..b {
                            for j in 0..dim {
                                let d = x.data[bi * dim + j] - mean[j];
                                var[j] += d * d;
                            }
                        }
                        for v in var.iter_mut() {
                            *v /= b as f64;
                        }
                        for j in 0..dim {
                            running_mean[j] =
                                (1.0 - BN_MOMENTUM) * running_mean[j] + BN_MOMENTUM * mean[j];
                            running_var[j] =
                                (1.0 - BN_MOMENTUM) * running_var[j] + BN_MOMENTUM * var[j];
                        }
                        (mean, var)
                    } else {
                        (running_mean.clone(), running_var.clone())
                    };
                    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut xhat = vec![0.0; b * dim];
                    let mut out = Tensor::zeros(&[b, dim]);
                    for bi in 0..b {
                        for j in 0..dim {
                            let h = (x.data[bi * dim + j] - mean[j]) * inv_std[j];
                            xhat[bi * dim + j] = h;
                            out.data[bi * dim + j] = gamma[j] * h + beta[j];
                        }
                    }
                    if train {
                        bn_cache = Some((xhat, inv_std));
                    }
                    out
                }
                Layer::Dense {
                    in_dim,
                    out_dim,
                    relu,
                    weights,
                    bias,
                } => {
                    let mut pre = Tensor::zeros(&[b, *out_dim]);
                    for bi in 0..b {
                        let row = &x.data[bi * *in_dim..(bi + 1) * *in_dim];
                        let out_row = &mut pre.data[bi * *out_dim..(bi + 1) * *out_dim];
                        out_row.copy_from_slice(bias);
                        for (i, &v) in row.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let wrow = &weights[i * *out_dim..(i + 1) * *out_dim];
                            for (o, w) in wrow.iter().enumerate() {
                                out_row[o] += v * w;
                            }
                        }
                    }
                    if *relu {
                        let mut post = pre.clone();
                        for v in post.data.iter_mut() {
                            *v = v.max(0.0);
                        }
                        preact = Some(pre);
                        post
                    } else {
                        pre
                    }
                }
                Layer::Dropout { rate } => {
                    if let Some(rng) = drop_rng.as_mut() {
                        let keep = 1.0 - *rate;
                        let m: Vec<f64> = (0..x.data.len())
                            .map(|_| {
                                if rng.gen::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let mut out = x.clone();
                        for (v, &mv) in out.data.iter_mut().zip(&m) {
                            *v *= mv;
                        }
                        mask = Some(m);
                        out
                    } else {
                        x.clone()
                    }
                }
                Layer::Softmax => {
                    let dim = x.feature_len();
                    let mut out = x.clone();
                    for bi in 0..b {
                        let row = &mut out.data[bi * dim..(bi + 1) * dim];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= sum;
                        }
                    }
                    out
                }
            };
            if x.data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(li));
            }
            preacts.push(preact);
            masks.push(mask);
            bn.push(bn_cache);
        }
        Ok(Cache {
            batch: b,
            inputs,
            preacts,
            masks,
            bn,
            probs: x,
        })
    }

    /// Convenience inference returning class probabilities.
    pub fn predict_proba(&mut self, batch: &Tensor) -> Result<Array2<f64>, NnError> {
        let cache = self.forward(batch, &ForwardMode::Infer)?;
        let n = cache.probs.batch();
        let k = cache.probs.feature_len();
        Ok(Array2::from_shape_fn((n, k), |(i, j)| {
            cache.probs.data[i * k + j]
        }))
    }

    pub fn predict(&mut self, batch: &Tensor) -> Result<Vec<usize>, NnError> {
        let probs = self.predict_proba(batch)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy of cached probabilities against integer targets.
    pub fn loss(cache: &Cache, targets: &[usize]) -> f64 {
        let k = cache.probs.feature_len();
        let mut nll = 0.0;
        for (bi, &t) in targets.iter().enumerate() {
            nll -= cache.probs.data[bi * k + t].max(1e-300).ln();
        }
        nll / targets.len() as f64
    }

    /// Backpropagate mean cross-entropy; gradients align with `param_vecs`.
    pub fn backward(&self, cache: &Cache, targets: &[usize]) -> Vec<Vec<f64>> {
        let b = cache.batch;
        let k = cache.probs.feature_len();
        // Combined softmax + cross-entropy gradient w.r.t. logits.
        let mut grad = Tensor::zeros(&[b, k]);
        for bi in 0..b {
            for j in 0..k {
                let y = if targets[bi] == j { 1.0 } else { 0.0 };
                grad.data[bi * k + j] = (cache.probs.data[bi * k + j] - y) / b as f64;
            }
        }

        let mut param_grads: Vec<Vec<f64>> = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[li];
            grad = match layer {
                Layer::Softmax => grad, // folded into the logit gradient above
                Layer::Dropout { .. } => {
                    if let Some(mask) = &cache.masks[li] {
                        let mut g = grad;
                        for (v, &m) in g.data.iter_mut().zip(mask) {
                            *v *= m;
                        }
                        g
                    } else {
                        grad
                    }
                }
                Layer::Dense {
                    in_dim,
                    out_dim,
                    relu,
                    weights,
                    ..
                } => {
                    let mut g = grad;
                    if *relu {
                        let pre = cache.preacts[li].as_ref().unwrap();
                        for (v, &p) in g.data.iter_mut().zip(&pre.data) {
                            if p <= 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                    let mut gw = vec![0.0; in_dim * out_dim];
                    let mut gb = vec![0.0; *out_dim];
                    let mut gin = Tensor::zeros(&[b, *in_dim]);
                    for bi in 0..b {
                        let gr = &g.data[bi * out_dim..(bi + 1) * out_dim];
                        let xr = &input.data[bi * in_dim..(bi + 1) * in_dim];
                        for (o, &gv) in gr.iter().enumerate() {
                            gb[o] += gv;
                        }
                        for (i, &xv) in xr.iter().enumerate() {
                            let wrow = &weights[i * out_dim..(i + 1) * out_dim];
                            let gwrow = &mut gw[i * out_dim..(i + 1) * out_dim];
                            let mut acc = 0.0;
                            for (o, &gv) in gr.iter().enumerate() {
                                gwrow[o] += gv * xv;
                                acc += gv * wrow[o];
                            }
                            gin.data[bi * in_dim + i] = acc;
                        }
                    }
                    param_grads.push(gb);
                    param_grads.push(gw);
                    gin
                }
                Layer::BatchNorm { gamma, .. } => {
                    let dim = gamma.len();
                    let (xhat, inv_std) = cache.bn[li].as_ref().unwrap();
                    let mut ggamma = vec![0.0; dim];
                    let mut gbeta = vec![0.0; dim];
                    let mut sum_g = vec![0.0; dim];
                    let mut sum_gx = vec![0.0; dim];
                    for bi in 0..b {
                        for j in 0..dim {
                            let gy = grad.data[bi * dim + j];
                            ggamma[j] += gy * xhat[bi * dim + j];
                            gbeta[j] += gy;
                        }
                    }
                    for j in 0..dim {
                        sum_g[j] = gbeta[j] / b as f64;
                        sum_gx[j] = ggamma[j] / b as f64;
                    }
                    let mut gin = Tensor::zeros(&[b, dim]);
                    for bi in 0..b {
                        for j in 0..dim {
                            let gy = grad.data[bi * dim + j];
                            gin.data[bi * dim + j] = gamma[j]
                                * inv_std[j]
                                * (gy - sum_g[j] - xhat[bi * dim + j] * sum_gx[j]);
                        }
                    }
                    param_grads.push(gbeta);
                    param_grads.push(ggamma);
                    gin
                }
                Layer::Flatten { in_shape } => {
                    let mut shape = vec![b];
                    shape.extend_from_slice(in_shape);
                    Tensor {
                        shape,
                        data: grad.data,
                    }
                }
                Layer::AvgPool {
                    in_spatial,
                    pool,
                    channels,
                } => pool_backward(&grad, b, *in_spatial, *pool, *channels),
                Layer::Conv {
                    in_spatial,
                    ksize,
                    stride,
                    in_ch,
                    out_ch,
                    weights,
                    ..
                } => {
                    let mut g = grad;
                    let pre = cache.preacts[li].as_ref().unwrap();
                    for (v, &p) in g.data.iter_mut().zip(&pre.data) {
                        if p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    let (gin, gw, gb) = conv_backward(
                        input, &g, b, *in_spatial, *ksize, *stride, *in_ch, *out_ch, weights,
                    );
                    param_grads.push(gb);
                    param_grads.push(gw);
                    gin
                }
            };
        }
        // Reverse into forward parameter-enumeration order.
        param_grads.reverse();
        param_grads
    }

    /// Mutable references to every parameter vector, in forward layer order
    /// (weights before bias for conv/dense; gamma before beta for batch-norm).
    pub fn param_vecs_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                    out.push(&mut *weights);
                    out.push(&mut *bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(&mut *gamma);
                    out.push(&mut *beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Parameter tensor names aligned with `param_vecs_mut` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { .. } => {
                    out.push(format!("layer{li}.conv.weights"));
                    out.push(format!("layer{li}.conv.bias"));
                }
                Layer::Dense { .. } => {
                    out.push(format!("layer{li}.dense.weights"));
                    out.push(format!("layer{li}.dense.bias"));
                }
                Layer::BatchNorm { .. } => {
                    out.push(format!("layer{li}.batchnorm.gamma"));
                    out.push(format!("layer{li}.batchnorm.beta"));
                }
                _ => {}
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    b: usize,
    s: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    in_ch: usize,
    out_ch: usize,
    weights: &[f64],
    bias: &[f64],
) -> (Tensor, Tensor) {
    let od = [
        ceil_div(s[0], stride[0]),
        ceil_div(s[1], stride[1]),
        ceil_div(s[2], stride[2]),
    ];
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let out_len = b * od[0] * od[1] * od[2] * out_ch;
    let mut pre = vec![0.0; out_len];
    for bi in 0..b {
        let x_base = bi * s[0] * s[1] * s[2] * in_ch;
        for o0 in 0..od[0] {
            for o1 in 0..od[1] {
                for o2 in 0..od[2] {
                    let out_base =
                        (((bi * od[0] + o0) * od[1] + o1) * od[2] + o2) * out_ch;
                    pre[out_base..out_base + out_ch].copy_from_slice(bias);
                    for d0 in 0..k[0] {
                        let i0 = (o0 * stride[0] + d0) as isize - pad[0] as isize;
                        if i0 < 0 || i0 >= s[0] as isize {
                            continue;
                        }
                        for d1 in 0..k[1] {
                            let i1 = (o1 * stride[1] + d1) as isize - pad[1] as isize;
                            if i1 < 0 || i1 >= s[1] as isize {
                                continue;
                            }
                            for d2 in 0..k[2] {
                                let i2 = (o2 * stride[2] + d2) as isize - pad[2] as isize;
                                if i2 < 0 || i2 >= s[2] as isize {
                                    continue;
                                }
                                let in_base = x_base
                                    + (((i0 as usize * s[1] + i1 as usize) * s[2]
                                        + i2 as usize)
                                        * in_ch);
                                let w_base = ((d0 * k[1] + d1) * k[2] + d2) * in_ch * out_ch;
                                for ic in 0..in_ch {
                                    let xv = x.data[in_base + ic];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wrow =
                                        &weights[w_base + ic * out_ch..w_base + (ic + 1) * out_ch];
                                    let orow = &mut pre[out_base..out_base + out_ch];
                                    for (oc, w) in wrow.iter().enumerate() {
                                        orow[oc] += xv * w;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = vec![b, od[0], od[1], od[2], out_ch];
    let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    (
        Tensor {
            shape: shape.clone(),
            data: pre,
        },
        Tensor { shape, data: post },
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    gout: &Tensor,
    b: usize,
    s: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    in_ch: usize,
    out_ch: usize,
    weights: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let od = [
        ceil_div(s[0], stride[0]),
        ceil_div(s[1], stride[1]),
        ceil_div(s[2], stride[2]),
    ];
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; out_ch];
    let mut gin = Tensor::zeros(&x.shape);
    for bi in 0..b {
        let x_base = bi * s[0] * s[1] * s[2] * in_ch;
        for o0 in 0..od[0] {
            for o1 in 0..od[1] {
                for o2 in 0..od[2] {
                    let out_base =
                        (((bi * od[0] + o0) * od[1] + o1) * od[2] + o2) * out_ch;
                    let grow = &gout.data[out_base..out_base + out_ch];
                    for (oc, &gv) in grow.iter().enumerate() {
                        gb[oc] += gv;
                    }
                    for d0 in 0..k[0] {
                        let i0 = (o0 * stride[0] + d0) as isize - pad[0] as isize;
                        if i0 < 0 || i0 >= s[0] as isize {
                            continue;
                        }
                        for d1 in 0..k[1] {
                            let i1 = (o1 * stride[1] + d1) as isize - pad[1] as isize;
                            if i1 < 0 || i1 >= s[1] as isize {
                                continue;
                            }
                            for d2 in 0..k[2] {
                                let i2 = (o2 * stride[2] + d2) as isize - pad[2] as isize;
                                if i2 < 0 || i2 >= s[2] as isize {
                                    continue;
                                }
                                let in_base = x_base
                                    + (((i0 as usize * s[1] + i1 as usize) * s[2]
                                        + i2 as usize)
                                        * in_ch);
                                let w_base = ((d0 * k[1] + d1) * k[2] + d2) * in_ch * out_ch;
                                for ic in 0..in_ch {
                                    let xv = x.data[in_base + ic];
                                    let wrow =
                                        &weights[w_base + ic * out_ch..w_base + (ic + 1) * out_ch];
                                    let gwrow =
                                        &mut gw[w_base + ic * out_ch..w_base + (ic + 1) * out_ch];
                                    let mut acc = 0.0;
                                    for (oc, &gv) in grow.iter().enumerate() {
                                        gwrow[oc] += gv * xv;
                                        acc += gv * wrow[oc];
                                    }
                                    gin.data[in_base + ic] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

fn pool_forward(x: &Tensor, b: usize, s: [usize; 3], pool: [usize; 3], ch: usize) -> Tensor {
    let od = [
        ceil_div(s[0], pool[0]),
        ceil_div(s[1], pool[1]),
        ceil_div(s[2], pool[2]),
    ];
    let mut out = Tensor::zeros(&[b, od[0], od[1], od[2], ch]);
    for bi in 0..b {
        for o0 in 0..od[0] {
            for o1 in 0..od[1] {
                for o2 in 0..od[2] {
                    let e0 = (o0 * pool[0] + pool[0]).min(s[0]);
                    let e1 = (o1 * pool[1] + pool[1]).min(s[1]);
                    let e2 = (o2 * pool[2] + pool[2]).min(s[2]);
                    let count =
                        ((e0 - o0 * pool[0]) * (e1 - o1 * pool[1]) * (e2 - o2 * pool[2])) as f64;
                    let out_base = (((bi * od[0] + o0) * od[1] + o1) * od[2] + o2) * ch;
                    for i0 in o0 * pool[0]..e0 {
                        for i1 in o1 * pool[1]..e1 {
                            for i2 in o2 * pool[2]..e2 {
                                let in_base =
                                    (((bi * s[0] + i0) * s[1] + i1) * s[2] + i2) * ch;
                                for c in 0..ch {
                                    out.data[out_base + c] += x.data[in_base + c] / count;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn pool_backward(gout: &Tensor, b: usize, s: [usize; 3], pool: [usize; 3], ch: usize) -> Tensor {
    let od = [
        ceil_div(s[0], pool[0]),
        ceil_div(s[1], pool[1]),
        ceil_div(s[2], pool[2]),
    ];
    let mut gin = Tensor::zeros(&[b, s[0], s[1], s[2], ch]);
    for bi in 0..b {
        for o0 in 0..od[0] {
            for o1 in 0..od[1] {
                for o2 in 0..od[2] {
                    let e0 = (o0 * pool[0] + pool[0]).min(s[0]);
                    let e1 = (o1 * pool[1] + pool[1]).min(s[1]);
                    let e2 = (o2 * pool[2] + pool[2]).min(s[2]);
                    let count =
                        ((e0 - o0 * pool[0]) * (e1 - o1 * pool[1]) * (e2 - o2 * pool[2])) as f64;
                    let out_base = (((bi * od[0] + o0) * od[1] + o1) * od[2] + o2) * ch;
                    for i0 in o0 * pool[0]..e0 {
                        for i1 in o1 * pool[1]..e1 {
                            for i2 in o2 * pool[2]..e2 {
                                let in_base =
                                    (((bi * s[0] + i0) * s[1] + i1) * s[2] + i2) * ch;
                                for c in 0..ch {
                                    gin.data[in_base + c] += gout.data[out_base + c] / count;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Optimizer kind with tunable moment coefficients; `epsilon` stabilizes
/// the adaptive denominators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64 },
    RmsProp { decay: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    pub fn rmsprop() -> Self {
        Optimizer::RmsProp { decay: 0.9 }
    }
}

pub const OPT_EPSILON: f64 = 1e-8;

/// Per-parameter optimizer state (first/second moments where needed).
pub struct OptimizerState {
    optimizer: Optimizer,
    lr: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, lr: f64, param_sizes: &[usize]) -> Self {
        let m = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
        let v = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
        OptimizerState {
            optimizer,
            lr,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update in place; `params` and `grads` align by index.
    pub fn apply(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as f64;
        for (pi, param) in params.iter_mut().enumerate() {
            let grad = &grads[pi];
            match self.optimizer {
                Optimizer::Sgd => {
                    for (p, &g) in param.iter_mut().zip(grad) {
                        *p -= self.lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2 } => {
                    let m = &mut self.m[pi];
                    let v = &mut self.v[pi];
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for (j, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *p -= self.lr * mhat / (vhat.sqrt() + OPT_EPSILON);
                    }
                }
                Optimizer::RmsProp { decay } => {
                    let v = &mut self.v[pi];
                    for (j, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
                        v[j] = decay * v[j] + (1.0 - decay) * g * g;
                        *p -= self.lr * g / (v[j].sqrt() + OPT_EPSILON);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(1e-5..=1e-1).contains(&self.learning_rate) {
            return Err(NnError::InvalidConfig(format!(
                "learning rate {} outside [1e-5, 1e-1]",
                self.learning_rate
            )));
        }
        if !(0.1..=0.5).contains(&self.dropout) {
            return Err(NnError::InvalidConfig(format!(
                "dropout {} outside [0.1, 0.5]",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            dropout: 0.5,
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub network: Network,
    pub log: Vec<EpochLog>,
}

/// Weighted F1 over integer labels (classes absent from truth get weight 0).
fn weighted_f1_labels(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let n = truth.len() as f64;
    let mut f1 = 0.0;
    for c in 0..n_classes {
        let support = tp[c] + fn_[c];
        if support == 0 {
            continue;
        }
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        let class_f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        };
        f1 += support as f64 / n * class_f1;
    }
    f1
}

/// Train a network from a seeded initialization with early stopping on
/// validation weighted F1 (plateau patience from the config). Returns the
/// best-validation snapshot.
pub fn train(
    spec: &NetworkSpec,
    train_x: &Tensor,
    train_y: &[usize],
    valid_x: &Tensor,
    valid_y: &[usize],
    config: &TrainConfig,
) -> Result<TrainedNetwork, NnError> {
    config.validate()?;
    if train_x.batch() == 0 || valid_x.batch() == 0 {
        return Err(NnError::EmptyDataset);
    }
    let mut spec = spec.clone();
    for layer in spec.layers.iter_mut() {
        if let LayerSpec::Dropout { rate } = layer {
            *rate = config.dropout;
        }
    }
    let mut net = Network::init(&spec, config.seed);
    if config.max_epochs == 0 {
        return Ok(TrainedNetwork {
            network: net,
            log: vec![],
        });
    }

    let sizes: Vec<usize> = {
        let mut n = net.clone();
        n.param_vecs_mut().iter().map(|p| p.len()).collect()
    };
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &sizes);
    let n_train = train_x.batch();
    let item_shape = spec.input_shape.clone();
    let mut best: Option<(f64, Network)> = None;
    let mut log = Vec::new();
    let mut since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&[f64]> = chunk.iter().map(|&i| train_x.item(i)).collect();
            let batch = Tensor::from_items(&item_shape, &items);
            let targets: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let dropout_seed = config
                .seed
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add(batch_idx as u64);
            let cache = net.forward(&batch, &ForwardMode::Train { dropout_seed })?;
            let loss = Network::loss(&cache, &targets);
            if !loss.is_finite() {
                return Err(NnError::Divergence { epoch, loss });
            }
            let grads = net.backward(&cache, &targets);
            let mut params = net.param_vecs_mut();
            opt.apply(&mut params, &grads);
            epoch_loss += loss;
            n_batches += 1;
        }
        epoch_loss /= n_batches as f64;

        let preds = net.predict(valid_x)?;
        let val_f1 = weighted_f1_labels(valid_y, &preds, spec.n_classes);
        log.push(EpochLog {
            epoch,
            loss: epoch_loss,
            val_f1,
        });

        let improved = best.as_ref().is_none_or(|(b, _)| val_f1 > *b + 1e-12);
        if improved {
            best = Some((val_f1, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let network = best.map(|(_, n)| n).unwrap_or(net);
    Ok(TrainedNetwork { network, log })
}

/// Central finite-difference check of `backward` against the train-mode
/// loss, sampling up to `samples_per_tensor` entries per parameter tensor.
///
/// Each tensor is scored by the vector-norm relative error of its sampled
/// gradient entries, `|numeric - analytic| / max(|numeric|, |analytic|)`,
/// which keeps truncation noise on near-zero entries from masking real
/// errors on the entries that carry the gradient. Entries whose
/// perturbation flips a ReLU sign pattern are excluded: the loss is only
/// piecewise smooth there and the finite difference is meaningless.
/// Returns per-tensor relative errors aligned with `param_names` order.
pub fn gradient_check(
    spec: &NetworkSpec,
    batch: &Tensor,
    targets: &[usize],
    seed: u64,
    samples_per_tensor: usize,
) -> Result<Vec<f64>, NnError> {
    let mut net = Network::init(spec, seed);
    let dropout_seed = seed ^ 0xabcd;
    let cache = net.forward(batch, &ForwardMode::Train { dropout_seed })?;
    let grads = net.backward(&cache, targets);
    let n_tensors = grads.len();
    let mut errors = Vec::with_capacity(n_tensors);
    let step = 3e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for ti in 0..n_tensors {
        let len = grads[ti].len();
        let mut idxs: Vec<usize> = (0..len).collect();
        use rand::seq::SliceRandom;
        idxs.shuffle(&mut rng);
        let mut diff2 = 0.0f64;
        let mut num2 = 0.0f64;
        let mut ana2 = 0.0f64;
        let mut measured = 0usize;
        for &j in &idxs {
            if measured >= samples_per_tensor {
                break;
            }
            let orig = net.param_vecs_mut()[ti][j];
            let mut losses = [0.0f64; 4];
            let mut patterns: Vec<Vec<bool>> = Vec::with_capacity(4);
            for (slot, offset) in [step, -step, step / 2.0, -step / 2.0].iter().enumerate() {
                net.param_vecs_mut()[ti][j] = orig + offset;
                let c = net.forward(batch, &ForwardMode::Train { dropout_seed })?;
                losses[slot] = Network::loss(&c, targets);
                patterns.push(relu_pattern(&c));
            }
            net.param_vecs_mut()[ti][j] = orig;
            if patterns.iter().any(|p| *p != patterns[0]) {
                continue;
            }
            // Richardson-extrapolated central difference: cancels the O(h^2)
            // truncation term, which batch-norm curvature otherwise makes
            // dominant for shift-like parameters.
            let d_full = (losses[0] - losses[1]) / (2.0 * step);
            let d_half = (losses[2] - losses[3]) / step;
            let numeric = (4.0 * d_half - d_full) / 3.0;
            let analytic = grads[ti][j];
            diff2 += (numeric - analytic) * (numeric - analytic);
            num2 += numeric * numeric;
            ana2 += analytic * analytic;
            measured += 1;
        }
        let denom = num2.max(ana2).sqrt();
        errors.push(if denom > 1e-7 {
            diff2.sqrt() / denom
        } else {
            0.0
        });
    }
    Ok(errors)
}

/// Sign pattern of every ReLU pre-activation in a forward cache.
fn relu_pattern(cache: &Cache) -> Vec<bool> {
    let mut out = Vec::new();
    for pre in cache.preacts.iter().flatten() {
        out.extend(pre.data.iter().map(|&v| v > 0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table_ii_rows(kind: NetKind, n_classes: usize) -> Vec<Vec<usize>> {
        match kind {
            NetKind::Cnn1dSpv => vec![
                vec![42, 16],
                vec![21, 16],
                vec![21, 32],
                vec![11, 32],
                vec![11, 32],
                vec![6, 32],
                vec![192],
                vec![192],
                vec![128],
                vec![128],
                vec![n_classes],
                vec![n_classes],
            ],
            NetKind::Cnn1dCsp => vec![
                vec![6, 16],
                vec![3, 16],
                vec![3, 32],
                vec![2, 32],
                vec![2, 32],
                vec![1, 32],
                vec![32],
                vec![32],
                vec![128],
                vec![128],
                vec![n_classes],
                vec![n_classes],
            ],
            NetKind::Cnn1dRaw => vec![
                vec![640, 16],
                vec![320, 16],
                vec![320, 32],
                vec![160, 32],
                vec![160, 32],
                vec![80, 32],
                vec![2560],
                vec![2560],
                vec![128],
                vec![128],
                vec![n_classes],
                vec![n_classes],
            ],
            NetKind::Cnn2d => vec![
                vec![32, 32, 16],
                vec![16, 16, 16],
                vec![16, 16, 32],
                vec![8, 8, 32],
                vec![8, 8, 32],
                vec![4, 4, 32],
                vec![512],
                vec![512],
                vec![128],
                vec![128],
                vec![n_classes],
                vec![n_classes],
            ],
            NetKind::Cnn3d => vec![
                vec![5, 32, 32, 16],
                vec![3, 16, 16, 16],
                vec![3, 16, 16, 32],
                vec![2, 8, 8, 32],
                vec![2, 8, 8, 32],
                vec![1, 4, 4, 32],
                vec![512],
                vec![512],
                vec![128],
                vec![128],
                vec![n_classes],
                vec![n_classes],
            ],
        }
    }

    #[test]
    fn shapes_match_reference_table_for_all_kinds() {
        for kind in NetKind::ALL {
            for n_classes in [2usize, 6] {
                let spec = build_cnn(kind, n_classes).unwrap();
                assert_eq!(
                    spec.output_shapes(),
                    table_ii_rows(kind, n_classes),
                    "{} / {n_classes}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn bad_class_count_rejected() {
        assert!(matches!(
            build_cnn(NetKind::Cnn2d, 3),
            Err(NnError::InvalidClassCount(3))
        ));
        assert!(matches!("cnn9d".parse::<NetKind>(), Err(NnError::UnknownKind(_))));
    }

    fn random_batch(spec: &NetworkSpec, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![n];
        shape.extend_from_slice(&spec.input_shape);
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = (0..n).map(|i| i % spec.n_classes).collect();
        (Tensor { shape, data }, y)
    }

    #[test]
    fn probabilities_sum_to_one() {
        let spec = build_cnn(NetKind::Cnn1dSpv, 6).unwrap();
        let mut net = Network::init(&spec, 7);
        let (batch, _) = random_batch(&spec, 5, 11);
        let probs = net.predict_proba(&batch).unwrap();
        for row in probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let mut net = Network::init(&spec, 3);
        for p in net.param_vecs_mut() {
            for v in p.iter_mut() {
                *v = 0.0;
            }
        }
        // Keep batch-norm scale at 1 so the forward pass stays defined;
        // zero dense weights already force uniform logits downstream.
        let (batch, _) = random_batch(&spec, 4, 13);
        let probs = net.predict_proba(&batch).unwrap();
        for row in probs.rows() {
            for &v in row {
                assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_rows_infer_identically() {
        let spec = build_cnn(NetKind::Cnn2d, 2).unwrap();
        let mut net = Network::init(&spec, 5);
        let (one, _) = random_batch(&spec, 1, 17);
        let items = vec![one.item(0), one.item(0)];
        let batch = Tensor::from_items(&spec.input_shape, &items);
        let probs = net.predict_proba(&batch).unwrap();
        for j in 0..2 {
            assert_eq!(probs[[0, j]], probs[[1, j]]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let mut net = Network::init(&spec, 1);
        let bad = Tensor::zeros(&[2, 7, 1]);
        assert!(matches!(
            net.forward(&bad, &ForwardMode::Infer),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let (batch, y) = random_batch(&spec, 4, 23);
        let errors = gradient_check(&spec, &batch, &y, 99, 8).unwrap();
        let worst = errors.iter().cloned().fold(0.0f64, f64::max);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_check_covers_2d_kind() {
        let spec = build_cnn(NetKind::Cnn2d, 2).unwrap();
        let (batch, y) = random_batch(&spec, 4, 29);
        let errors = gradient_check(&spec, &batch, &y, 101, 3).unwrap();
        let worst = errors.iter().cloned().fold(0.0f64, f64::max);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn confident_correct_prediction_has_tiny_gradient() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let mut net = Network::init(&spec, 31);
        let (batch, _) = random_batch(&spec, 2, 37);
        // Drive the final dense layer towards a saturated correct answer.
        let names = net.param_names();
        let out_w = names.iter().position(|n| n.contains("layer10")).unwrap();
        {
            let mut params = net.param_vecs_mut();
            for v in params[out_w].iter_mut() {
                *v = 0.0;
            }
            params[out_w + 1][0] = 50.0;
            params[out_w + 1][1] = -50.0;
        }
        let cache = net
            .forward(&batch, &ForwardMode::Train { dropout_seed: 1 })
            .unwrap();
        let grads = net.backward(&cache, &[0, 0]);
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-10, "gradient norm {norm}");
    }

    #[test]
    fn sgd_step_decreases_loss() {
        let spec = build_cnn(NetKind::Cnn1dSpv, 2).unwrap();
        let mut net = Network::init(&spec, 41);
        let (batch, y) = random_batch(&spec, 8, 43);
        let cache = net
            .forward(&batch, &ForwardMode::Train { dropout_seed: 2 })
            .unwrap();
        let loss0 = Network::loss(&cache, &y);
        let grads = net.backward(&cache, &y);
        {
            let mut params = net.param_vecs_mut();
            for (p, g) in params.iter_mut().zip(&grads) {
                for (pv, &gv) in p.iter_mut().zip(g) {
                    *pv -= 1e-3 * gv;
                }
            }
        }
        let cache1 = net
            .forward(&batch, &ForwardMode::Train { dropout_seed: 2 })
            .unwrap();
        let loss1 = Network::loss(&cache1, &y);
        assert!(loss1 < loss0, "{loss1} !< {loss0}");
    }

    #[test]
    fn batchnorm_normalizes_batch_statistics() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let mut net = Network::init(&spec, 47);
        let (batch, _) = random_batch(&spec, 16, 53);
        let cache = net
            .forward(&batch, &ForwardMode::Train { dropout_seed: 3 })
            .unwrap();
        // Locate the batch-norm layer cache (xhat) and check its statistics.
        let (bn_idx, (xhat, _)) = cache
            .bn
            .iter()
            .enumerate()
            .find_map(|(i, c)| c.as_ref().map(|c| (i, c)))
            .unwrap();
        let bn_input = &cache.inputs[bn_idx];
        let dim = bn_input.feature_len();
        let b = cache.batch;
        let mut checked = 0usize;
        for j in 0..dim {
            // Features the ReLU stack left constant across the batch have
            // nothing to normalize; skip those degenerate columns.
            let in_mean: f64 =
                (0..b).map(|bi| bn_input.data[bi * dim + j]).sum::<f64>() / b as f64;
            let in_var: f64 = (0..b)
                .map(|bi| (bn_input.data[bi * dim + j] - in_mean).powi(2))
                .sum::<f64>()
                / b as f64;
            if in_var < 1e-6 {
                continue;
            }
            let mut mean = 0.0;
            let mut var = 0.0;
            for bi in 0..b {
                mean += xhat[bi * dim + j];
            }
            mean /= b as f64;
            for bi in 0..b {
                let d = xhat[bi * dim + j] - mean;
                var += d * d;
            }
            var /= b as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn dropout_preserves_expected_activation() {
        // Monte-Carlo over 10k inverted-dropout masks on a fixed vector.
        let rate = 0.3;
        let keep = 1.0 - rate;
        let x = [1.0f64, -2.0, 0.5, 3.0];
        let mut sums = [0.0f64; 4];
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        for _ in 0..n {
            for (j, &v) in x.iter().enumerate() {
                if rng.gen::<f64>() < keep {
                    sums[j] += v / keep;
                }
            }
        }
        for (j, &v) in x.iter().enumerate() {
            let mean = sums[j] / n as f64;
            assert!(
                (mean - v).abs() <= 0.01 * v.abs().max(1.0),
                "feature {j}: {mean} vs {v}"
            );
        }
    }

    #[test]
    fn adaptive_optimizers_degrade_to_scaled_sgd() {
        // Quadratic bowl with tiny gradients: the epsilon term dominates the
        // adaptive denominator, so Adam(0,0)/RMSProp(0) match SGD at lr/eps.
        let run = |opt: Optimizer, lr: f64| -> Vec<f64> {
            // Parameters tiny enough that |g| << epsilon in the denominators.
            let mut p = vec![1e-20f64, -2e-20];
            let mut state = OptimizerState::new(opt, lr, &[2]);
            let mut losses = Vec::new();
            for _ in 0..20 {
                let grads = vec![p.clone()]; // loss = 0.5 * |p|^2
                let mut refs = vec![&mut p];
                state.apply(&mut refs, &grads);
                losses.push(0.5 * (p[0] * p[0] + p[1] * p[1]));
            }
            losses
        };
        // Adam(0,0) and RMSProp(0) update by lr*g/(|g| + eps) ~= (lr/eps)*g.
        let sgd = run(Optimizer::Sgd, 1e-3);
        let adam = run(
            Optimizer::Adam {
                beta1: 0.0,
                beta2: 0.0,
            },
            1e-3 * OPT_EPSILON,
        );
        let rms = run(Optimizer::RmsProp { decay: 0.0 }, 1e-3 * OPT_EPSILON);
        for i in 0..sgd.len() {
            let scale = sgd[i].abs().max(1e-300);
            assert!((adam[i] - sgd[i]).abs() / scale < 1e-6, "adam step {i}");
            assert!((rms[i] - sgd[i]).abs() / scale < 1e-6, "rmsprop step {i}");
        }
    }

    fn separable_toy(n_per: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items: Vec<Vec<f64>> = Vec::new();
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let class = i % 2;
            let center = if class == 0 { -1.0 } else { 1.0 };
            let item: Vec<f64> = (0..6).map(|_| center + 0.1 * rng.gen_range(-1.0..1.0)).collect();
            items.push(item);
            y.push(class);
        }
        let refs: Vec<&[f64]> = items.iter().map(|v| v.as_slice()).collect();
        (Tensor::from_items(&[6, 1], &refs), y)
    }

    #[test]
    fn training_separates_toy_data() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let (train_x, train_y) = separable_toy(40, 61);
        let (val_x, val_y) = separable_toy(20, 67);
        let config = TrainConfig {
            learning_rate: 1e-2,
            dropout: 0.1,
            max_epochs: 50,
            batch_size: 16,
            seed: 71,
            patience: 50,
            ..TrainConfig::default()
        };
        let trained = train(&spec, &train_x, &train_y, &val_x, &val_y, &config).unwrap();
        let best = trained
            .log
            .iter()
            .map(|e| e.val_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.99, "best val F1 {best}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let (train_x, train_y) = separable_toy(20, 73);
        let (val_x, val_y) = separable_toy(10, 79);
        let config = TrainConfig {
            learning_rate: 1e-2,
            dropout: 0.2,
            max_epochs: 5,
            batch_size: 8,
            seed: 83,
            patience: 5,
            ..TrainConfig::default()
        };
        let t1 = train(&spec, &train_x, &train_y, &val_x, &val_y, &config).unwrap();
        let t2 = train(&spec, &train_x, &train_y, &val_x, &val_y, &config).unwrap();
        assert_eq!(
            serde_json::to_vec(&t1).unwrap(),
            serde_json::to_vec(&t2).unwrap()
        );
    }

    #[test]
    fn zero_epochs_returns_initialized_network() {
        let spec = build_cnn(NetKind::Cnn1dCsp, 2).unwrap();
        let (train_x, train_y) = separable_toy(10, 89);
        let config = TrainConfig {
            max_epochs: 0,
            dropout: 0.1,
            ..TrainConfig::default()
        };
        let trained = train(&spec, &train_x, &train_y, &train_x, &train_y, &config).unwrap();
        assert!(trained.log.is_empty());
        // `train` applies the config's dropout rate before initializing.
        let mut expected_spec = spec.clone();
        for layer in expected_spec.layers.iter_mut() {
            if let LayerSpec::Dropout { rate } = layer {
                *rate = config.dropout;
            }
        }
        assert_eq!(trained.network, Network::init(&expected_spec, config.seed));
    }

    #[test]
    fn stride3_mode_shrinks_conv_outputs() {
        let spec = build_cnn_with_stride(NetKind::Cnn1dSpv, 2, 3).unwrap();
        let shapes = spec.output_shapes();
        assert_eq!(shapes[0], vec![14, 16]); // ceil(42 / 3)
        let mut net = Network::init(&spec, 97);
        let (batch, _) = random_batch(&spec, 2, 101);
        let probs = net.predict_proba(&batch).unwrap();
        for row in probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
    }
}
