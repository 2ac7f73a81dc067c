//! Differentiable layers: wavelet neurons, dense layers, dropout, softmax
//! cross-entropy, and the multi-path network that wires them together.
//!
//! A wavelet neuron decomposes every input channel one transform level and
//! squashes all four subbands with a sigmoid, so its only trainable state is
//! one angle pair. A network runs `paths` independent neuron chains over the
//! same image, concatenates and flattens their outputs, and finishes with
//! ReLU dense layers (dropout after each, train mode only) and a linear
//! classifier head.
//!
//! Forward passes in train mode cache what backward needs inside each layer;
//! backward consumes the caches and returns gradients in registry order.
//! Per-sample work fans out over rayon, but reductions always fold
//! fixed-size chunks in index order, so results are bitwise reproducible on
//! any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::filters::{filter_gradients, make_filters, WaveletParams};
use crate::transform::{dwt2_backward, dwt2_forward, half_up, Plane, Subbands};

/// Samples per reduction chunk when accumulating gradients in parallel.
/// Fixed (not derived from the thread pool) to keep float addition order,
/// and therefore training itself, independent of the machine.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Height x width x channels activation block, stored channel-major so each
/// channel is a contiguous plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> FeatureTensor {
        FeatureTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<FeatureTensor> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_plane(plane: &Plane) -> FeatureTensor {
        FeatureTensor {
            height: plane.height(),
            width: plane.width(),
            channels: 1,
            data: plane.data().to_vec(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> Plane {
        let n = self.height * self.width;
        Plane::from_vec(self.height, self.width, self.data[c * n..(c + 1) * n].to_vec())
            .expect("channel slice has plane size")
    }

    pub fn channel_slice(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn set_channel(&mut self, c: usize, plane: &Plane) {
        let n = self.height * self.width;
        self.data[c * n..(c + 1) * n].copy_from_slice(plane.data());
    }
}

/// One decomposition level with learnable angles; two trainable scalars.
#[derive(Debug, Clone)]
pub struct WaveletNeuron {
    pub params: WaveletParams,
    cache: Option<NeuronCache>,
}

/// Batch of forward inputs and pre-sigmoid coefficients, one entry per sample.
#[derive(Debug, Clone)]
struct NeuronCache {
    inputs: Vec<FeatureTensor>,
    pre: Vec<FeatureTensor>,
}

/// Decompose every channel one level and stack the subbands as
/// (approx, horiz, vert, diag) blocks per input channel. No sigmoid.
fn decompose(x: &FeatureTensor, params: WaveletParams) -> Result<FeatureTensor> {
    let bank = make_filters(params)?;
    let (h, w, c) = x.shape();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Dimension("cannot decompose an empty tensor".into()));
    }
    let mut out = FeatureTensor::zeros(half_up(h), half_up(w), 4 * c);
    for ci in 0..c {
        let sub = dwt2_forward(&x.channel(ci), &bank)?;
        for (k, band) in sub.bands().into_iter().enumerate() {
            out.set_channel(4 * ci + k, band);
        }
    }
    Ok(out)
}

impl WaveletNeuron {
    pub fn new(params: WaveletParams) -> WaveletNeuron {
        WaveletNeuron { params, cache: None }
    }

    /// Pure forward pass for one sample: decompose, then sigmoid everywhere.
    pub fn apply(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        let mut pre = decompose(x, self.params)?;
        for v in pre.data_mut() {
            *v = sigmoid(*v);
        }
        Ok(pre)
    }

    /// Forward a batch in train mode, caching inputs and pre-activation
    /// coefficients for the matching `backward_batch`.
    pub fn forward_batch(&mut self, inputs: Vec<FeatureTensor>) -> Result<Vec<FeatureTensor>> {
        let params = self.params;
        let pre: Vec<FeatureTensor> = inputs
            .par_iter()
            .map(|x| decompose(x, params))
            .collect::<Result<_>>()?;
        let post: Vec<FeatureTensor> = pre
            .par_iter()
            .map(|p| {
                let mut y = p.clone();
                for v in y.data_mut() {
                    *v = sigmoid(*v);
                }
                y
            })
            .collect();
        self.cache = Some(NeuronCache { inputs, pre });
        Ok(post)
    }

    /// Backward a batch: returns per-sample input gradients plus the angle
    /// gradients summed over the whole batch.
    pub fn backward_batch(&self, grad_out: &[FeatureTensor]) -> Result<(Vec<FeatureTensor>, f64, f64)> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::State("wavelet neuron backward called without a cached forward pass".into())
        })?;
        if cache.inputs.len() != grad_out.len() {
            return Err(Error::State(format!(
                "cached batch has {} samples but the gradient has {}",
                cache.inputs.len(),
                grad_out.len()
            )));
        }
        let bank = make_filters(self.params)?;
        let fgrads = filter_gradients(self.params)?;

        let per_sample: Vec<(FeatureTensor, f64, f64)> = (0..grad_out.len())
            .into_par_iter()
            .map(|b| {
                let input = &cache.inputs[b];
                let pre = &cache.pre[b];
                let g = &grad_out[b];
                if g.shape() != pre.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shape {:?} does not match cached output {:?}",
                        g.shape(),
                        pre.shape()
                    )));
                }
                // Chain through the sigmoid first: dL/dz = dL/dy * y(1-y).
                let mut grad_pre = pre.clone();
                for (gz, gy) in grad_pre.data_mut().iter_mut().zip(g.data()) {
                    let y = sigmoid(*gz);
                    *gz = gy * y * (1.0 - y);
                }

                let (h, w, c) = input.shape();
                let (sh, sw) = (half_up(h), half_up(w));
                let mut grad_in = FeatureTensor::zeros(h, w, c);
                let (mut ga, mut gb) = (0.0, 0.0);
                for ci in 0..c {
                    let gsub = Subbands {
                        approx: grad_pre.channel(4 * ci),
                        horiz: grad_pre.channel(4 * ci + 1),
                        vert: grad_pre.channel(4 * ci + 2),
                        diag: grad_pre.channel(4 * ci + 3),
                    };
                    debug_assert_eq!(gsub.dims(), (sh, sw));
                    let (gin, da, db) = dwt2_backward(&gsub, &input.channel(ci), &bank, &fgrads)?;
                    grad_in.set_channel(ci, &gin);
                    ga += da;
                    gb += db;
                }
                Ok((grad_in, ga, gb))
            })
            .collect::<Result<_>>()?;

        let mut grads_in = Vec::with_capacity(per_sample.len());
        let (mut ga, mut gb) = (0.0, 0.0);
        for (gin, da, db) in per_sample {
            grads_in.push(gin);
            ga += da;
            gb += db;
        }
        Ok((grads_in, ga, gb))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out x in.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
    cache: Option<DenseCache>,
}

#[derive(Debug, Clone)]
struct DenseCache {
    inputs: Vec<Vec<f64>>,
    /// Post-activation outputs (the ReLU mask is recovered from these).
    outputs: Vec<Vec<f64>>,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> DenseLayer {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
            activation,
            cache: None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Dimension(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut y = self.biases.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            if self.activation == Activation::Relu && *yo < 0.0 {
                *yo = 0.0;
            }
        }
        Ok(y)
    }

    pub fn forward_batch(&mut self, inputs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let outputs: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|x| self.apply(x))
            .collect::<Result<_>>()?;
        self.cache = Some(DenseCache {
            inputs,
            outputs: outputs.clone(),
        });
        Ok(outputs)
    }

    /// Backward a batch. `grad_out` is the gradient with respect to this
    /// layer's post-activation outputs. Weight/bias gradients are summed over
    /// the batch with fixed-chunk reduction.
    pub fn backward_batch(&self, grad_out: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::State("dense backward called without a cached forward pass".into())
        })?;
        if cache.inputs.len() != grad_out.len() {
            return Err(Error::State(format!(
                "cached batch has {} samples but the gradient has {}",
                cache.inputs.len(),
                grad_out.len()
            )));
        }

        let chunks: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> = (0..grad_out.len())
            .collect::<Vec<_>>()
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut gw = vec![0.0; self.weights.len()];
                let mut gb = vec![0.0; self.out_dim];
                let mut gins = Vec::with_capacity(chunk.len());
                for &b in chunk {
                    let x = &cache.inputs[b];
                    let y = &cache.outputs[b];
                    let g = &grad_out[b];
                    let mut gin = vec![0.0; self.in_dim];
                    for o in 0..self.out_dim {
                        let mut gz = g[o];
                        if self.activation == Activation::Relu && y[o] <= 0.0 {
                            gz = 0.0;
                        }
                        if gz == 0.0 {
                            continue;
                        }
                        gb[o] += gz;
                        let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                        let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
                        for i in 0..self.in_dim {
                            grow[i] += gz * x[i];
                            gin[i] += gz * row[i];
                        }
                    }
                    gins.push(gin);
                }
                (gins, gw, gb)
            })
            .collect();

        let mut grad_in = Vec::with_capacity(grad_out.len());
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; self.out_dim];
        for (gins, cw, cb) in chunks {
            grad_in.extend(gins);
            for (a, v) in gw.iter_mut().zip(&cw) {
                *a += v;
            }
            for (a, v) in gb.iter_mut().zip(&cb) {
                *a += v;
            }
        }
        Ok((grad_in, gw, gb))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Inverted dropout. Train mode zeroes each unit with probability 1-keep and
/// scales survivors by 1/keep; eval mode is the identity.
pub fn dropout(x: &[f64], keep: f64, mode: Mode, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let scales = dropout_scales(x.len(), keep, mode, rng)?;
    Ok(x.iter().zip(&scales).map(|(v, s)| v * s).collect())
}

fn dropout_scales(n: usize, keep: f64, mode: Mode, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!(
            "dropout keep probability must be in (0, 1], got {keep}"
        )));
    }
    match mode {
        Mode::Eval => Ok(vec![1.0; n]),
        Mode::Train => Ok((0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()),
    }
}

/// Mean softmax cross-entropy over a batch, with the max subtracted before
/// exponentiation for stability. Returns the loss and d(loss)/d(logits),
/// which is (softmax - onehot) / batch.
pub fn softmax_xent(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let classes = logits[0].len();
    let batch = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::Dimension("ragged logit rows".into()));
        }
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label];
        let mut g: Vec<f64> = exps.iter().map(|e| e / z / batch).collect();
        g[label] -= 1.0 / batch;
        grads.push(g);
    }
    Ok((loss / batch, grads))
}

/// Architecture hyperparameters. Flat scalars so the struct also serializes
/// cleanly inside config files and checkpoint sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub paths: usize,
    pub levels: usize,
    pub fc_widths: Vec<usize>,
    pub classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub dropout_keep: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("paths must be at least 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Config("input dimensions must be nonzero".into()));
        }
        if self.fc_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("dense widths must be nonzero".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    /// Shape of one path's output tensor after all levels.
    pub fn path_output_shape(&self) -> (usize, usize, usize) {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for _ in 0..self.levels {
            h = half_up(h);
            w = half_up(w);
        }
        (h, w, self.input_channels * 4usize.pow(self.levels as u32))
    }

    /// Width of the concatenated flatten feeding the first dense layer.
    pub fn flattened_width(&self) -> usize {
        let (h, w, c) = self.path_output_shape();
        h * w * c * self.paths
    }

    /// Total trainable parameters: two angles per neuron plus every dense
    /// layer's weights and biases, classifier head included.
    pub fn param_count(&self) -> usize {
        let mut total = 2 * self.levels * self.paths;
        let mut fan_in = self.flattened_width();
        for &width in &self.fc_widths {
            total += fan_in * width + width;
            fan_in = width;
        }
        total + fan_in * self.classes + self.classes
    }

    fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.fc_widths.len() + 1);
        let mut fan_in = self.flattened_width();
        for &width in &self.fc_widths {
            dims.push((fan_in, width));
            fan_in = width;
        }
        dims.push((fan_in, self.classes));
        dims
    }
}

/// Gradients for every trainable parameter, in the same order as the
/// network's parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// [path][level] -> [d_alpha, d_beta]
    pub wavelet: Vec<Vec<[f64; 2]>>,
    /// Per dense layer: (d_weights, d_biases)
    pub dense: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros_for(net: &Network) -> Gradients {
        Gradients {
            wavelet: net
                .paths
                .iter()
                .map(|p| vec![[0.0; 2]; p.len()])
                .collect(),
            dense: net
                .dense
                .iter()
                .map(|d| (vec![0.0; d.weights.len()], vec![0.0; d.biases.len()]))
                .collect(),
        }
    }

    /// Flat slices aligned with `Network::param_entries`.
    pub fn views(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for path in &self.wavelet {
            for pair in path {
                out.push(&pair[0..1]);
                out.push(&pair[1..2]);
            }
        }
        for (w, b) in &self.dense {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.views()
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// The full model: `paths` parallel neuron chains, then a dense stack.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    /// [path][level]
    pub paths: Vec<Vec<WaveletNeuron>>,
    pub dense: Vec<DenseLayer>,
    /// Dropout scale vectors cached by the last train-mode forward:
    /// [hidden layer][sample][unit].
    dropout_cache: Option<Vec<Vec<Vec<f64>>>>,
}

impl Network {
    /// Fresh network: angles uniform in [0, 2pi), dense weights Xavier
    /// uniform, biases zero. Paths differ only through these random draws.
    pub fn init(config: NetworkConfig, rng: &mut impl Rng) -> Result<Network> {
        config.validate()?;
        let paths = (0..config.paths)
            .map(|_| {
                (0..config.levels)
                    .map(|_| {
                        let alpha = rng.random_range(0.0..TAU);
                        let beta = rng.random_range(0.0..TAU);
                        WaveletNeuron::new(WaveletParams { alpha, beta })
                    })
                    .collect()
            })
            .collect();
        let mut dense = Vec::new();
        let dims = config.dense_dims();
        for (idx, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let activation = if idx + 1 == dims.len() { Activation::None } else { Activation::Relu };
            let mut layer = DenseLayer::new(fan_in, fan_out, activation);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
            dense.push(layer);
        }
        Ok(Network {
            config,
            paths,
            dense,
            dropout_cache: None,
        })
    }

    /// All-zero parameters; used as the target of a checkpoint restore.
    pub fn zeroed(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let paths = (0..config.paths)
            .map(|_| {
                (0..config.levels)
                    .map(|_| WaveletNeuron::new(WaveletParams { alpha: 0.0, beta: 0.0 }))
                    .collect()
            })
            .collect();
        let dims = config.dense_dims();
        let last = dims.len() - 1;
        let dense = dims
            .iter()
            .enumerate()
            .map(|(idx, &(fi, fo))| {
                DenseLayer::new(fi, fo, if idx == last { Activation::None } else { Activation::Relu })
            })
            .collect();
        Ok(Network {
            config,
            paths,
            dense,
            dropout_cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Named views of every parameter tensor, in the fixed registry order:
    /// wavelet angles (paths outer, levels inner), then dense layers.
    pub fn param_entries(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (p, path) in self.paths.iter().enumerate() {
            for (l, neuron) in path.iter().enumerate() {
                out.push((
                    format!("path{p}.level{l}.alpha"),
                    std::slice::from_ref(&neuron.params.alpha),
                ));
                out.push((
                    format!("path{p}.level{l}.beta"),
                    std::slice::from_ref(&neuron.params.beta),
                ));
            }
        }
        for (i, layer) in self.dense.iter().enumerate() {
            out.push((format!("dense{i}.weight"), layer.weights.as_slice()));
            out.push((format!("dense{i}.bias"), layer.biases.as_slice()));
        }
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (p, path) in self.paths.iter_mut().enumerate() {
            for (l, neuron) in path.iter_mut().enumerate() {
                out.push((
                    format!("path{p}.level{l}.alpha"),
                    std::slice::from_mut(&mut neuron.params.alpha),
                ));
                out.push((
                    format!("path{p}.level{l}.beta"),
                    std::slice::from_mut(&mut neuron.params.beta),
                ));
            }
        }
        for (i, layer) in self.dense.iter_mut().enumerate() {
            out.push((format!("dense{i}.weight"), layer.weights.as_mut_slice()));
            out.push((format!("dense{i}.bias"), layer.biases.as_mut_slice()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Logical shape of each registry entry, aligned with `param_entries`:
    /// angles are scalars, dense weights are (out, in).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for path in &self.paths {
            for _ in path {
                out.push(vec![1]);
                out.push(vec![1]);
            }
        }
        for layer in &self.dense {
            out.push(vec![layer.out_dim, layer.in_dim]);
            out.push(vec![layer.out_dim]);
        }
        out
    }

    fn check_input(&self, batch: &[FeatureTensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let want = (
            self.config.input_height,
            self.config.input_width,
            self.config.input_channels,
        );
        for t in batch {
            if t.shape() != want {
                return Err(Error::Dimension(format!(
                    "input tensor is {:?} but the network expects {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    /// Deterministic inference pass: no dropout, no caches.
    pub fn forward_eval(&self, batch: &[FeatureTensor]) -> Result<Vec<Vec<f64>>> {
        self.check_input(batch)?;
        batch
            .par_iter()
            .map(|sample| {
                let mut flat = Vec::with_capacity(self.config.flattened_width());
                for path in &self.paths {
                    let mut t = sample.clone();
                    for neuron in path {
                        t = neuron.apply(&t)?;
                    }
                    flat.extend_from_slice(t.data());
                }
                let mut x = flat;
                for layer in &self.dense {
                    x = layer.apply(&x)?;
                }
                Ok(x)
            })
            .collect()
    }

    /// Per-path, per-level pre-activation subband stacks for one image.
    /// Each level transforms the sigmoid output of the previous one, exactly
    /// as the forward pass does; what's returned is the raw coefficients.
    pub fn decompose_image(&self, x: &FeatureTensor) -> Result<Vec<Vec<FeatureTensor>>> {
        self.check_input(std::slice::from_ref(x))?;
        let mut out = Vec::with_capacity(self.paths.len());
        for path in &self.paths {
            let mut levels = Vec::with_capacity(path.len());
            let mut t = x.clone();
            for neuron in path {
                let pre = decompose(&t, neuron.params)?;
                t = pre.clone();
                for v in t.data_mut() {
                    *v = sigmoid(*v);
                }
                levels.push(pre);
            }
            out.push(levels);
        }
        Ok(out)
    }

    /// Train-mode forward: dropout after each hidden dense layer, all caches
    /// populated. `dropout_seeds` gives one RNG seed per sample so masks are
    /// reproducible no matter how the batch is scheduled across threads.
    pub fn forward_train(&mut self, batch: &[FeatureTensor], dropout_seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(batch)?;
        if dropout_seeds.len() != batch.len() {
            return Err(Error::Dimension(format!(
                "{} dropout seeds for a batch of {}",
                dropout_seeds.len(),
                batch.len()
            )));
        }

        // Wavelet stage, one level at a time over the whole batch.
        let mut finals: Vec<Vec<FeatureTensor>> = Vec::with_capacity(self.paths.len());
        for path in self.paths.iter_mut() {
            let mut t: Vec<FeatureTensor> = batch.to_vec();
            for neuron in path.iter_mut() {
                t = neuron.forward_batch(t)?;
            }
            finals.push(t);
        }

        // Concatenate and flatten per sample.
        let mut x: Vec<Vec<f64>> = (0..batch.len())
            .map(|b| {
                let mut flat = Vec::with_capacity(self.config.flattened_width());
                for path_out in &finals {
                    flat.extend_from_slice(path_out[b].data());
                }
                flat
            })
            .collect();

        // Dense stack with dropout after each hidden layer.
        let hidden = self.dense.len() - 1;
        let keep = self.config.dropout_keep;
        let mut dropout_cache = Vec::with_capacity(hidden);
        for (i, layer) in self.dense.iter_mut().enumerate() {
            x = layer.forward_batch(x)?;
            if i < hidden {
                let scales: Vec<Vec<f64>> = dropout_seeds
                    .par_iter()
                    .zip(&x)
                    .map(|(&seed, row)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64);
                        dropout_scales(row.len(), keep, Mode::Train, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                for (row, s) in x.iter_mut().zip(&scales) {
                    for (v, sc) in row.iter_mut().zip(s) {
                        *v *= sc;
                    }
                }
                dropout_cache.push(scales);
            }
        }
        self.dropout_cache = Some(dropout_cache);
        Ok(x)
    }

    /// Backward through the whole network, consuming the caches of the last
    /// train-mode forward. Returns gradients in registry order.
    pub fn backward(&mut self, grad_logits: &[Vec<f64>]) -> Result<Gradients> {
        let dropout_cache = self.dropout_cache.take().ok_or_else(|| {
            Error::State("network backward called without a matching train-mode forward".into())
        })?;

        let mut grads = Gradients::zeros_for(self);

        // Dense stack in reverse. grad_out for the classifier is grad_logits;
        // for hidden layer i it is the next layer's input gradient with that
        // layer's dropout scales reapplied.
        let mut grad: Vec<Vec<f64>> = grad_logits.to_vec();
        for i in (0..self.dense.len()).rev() {
            let (gin, gw, gb) = self.dense[i].backward_batch(&grad)?;
            grads.dense[i] = (gw, gb);
            grad = gin;
            if i > 0 {
                let scales = &dropout_cache[i - 1];
                if scales.len() != grad.len() {
                    return Err(Error::State("dropout cache does not match the batch".into()));
                }
                for (row, s) in grad.iter_mut().zip(scales) {
                    for (v, sc) in row.iter_mut().zip(s) {
                        *v *= sc;
                    }
                }
            }
        }

        // Split the flatten gradient back into per-path tensors.
        let (h, w, c) = self.config.path_output_shape();
        let block = h * w * c;
        for (p, path) in self.paths.iter().enumerate() {
            let mut gt: Vec<FeatureTensor> = grad
                .iter()
                .map(|row| {
                    FeatureTensor::from_vec(h, w, c, row[p * block..(p + 1) * block].to_vec())
                })
                .collect::<Result<_>>()?;
            for (l, neuron) in path.iter().enumerate().rev() {
                let (gin, ga, gb) = neuron.backward_batch(&gt)?;
                grads.wavelet[p][l] = [ga, gb];
                gt = gin;
            }
        }

        for path in self.paths.iter_mut() {
            for neuron in path.iter_mut() {
                neuron.clear_cache();
            }
        }
        for layer in self.dense.iter_mut() {
            layer.clear_cache();
        }
        Ok(grads)
    }
}
