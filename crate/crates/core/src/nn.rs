//! A small convolutional classifier trained from scratch, with finite
//! difference gradient checking and Grad-CAM.
//!
//! Architecture (input `1 x S x S`, `S` divisible by 4):
//!
//! ```text
//! conv3x3(8) -> relu -> maxpool2 -> conv3x3(16) -> relu -> maxpool2
//!   -> conv3x3(32) -> relu -> global average pool -> dense(32 -> k) -> softmax
//! ```
//!
//! Convolutions use zero padding of one pixel. When `coord_channels` is set,
//! two constant channels holding the normalized x and y pixel coordinates are
//! appended to the input before the first convolution; the pooled features
//! are otherwise translation invariant and cannot tell image regions apart.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize, DatasetError, DatasetManifest, ManifestFrame, NormStats, Split, Station};
use crate::imaging::{clamp_u8, resize_bilinear, to_grayscale, FloatImage, ImageBuffer, ImagingError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input error: {0}")]
    Input(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Input(format!("shape {shape:?} does not match {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of the leading dimension.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }
}

const CONV_CHANNELS: [usize; 3] = [8, 16, 32];

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        // He initialization
        let std = (2.0 / (in_c * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = (0..out_c * in_c * 9).map(|_| normal.sample(rng)).collect();
        Self {
            in_c,
            out_c,
            weight: Tensor { shape: vec![out_c, in_c, 3, 3], data: weight },
            bias: Tensor::zeros(vec![out_c]),
        }
    }

    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let mut out = vec![0.0; self.out_c * plane];
        for o in 0..self.out_c {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(self.bias.data[o]);
            for i in 0..self.in_c {
                let src = &input[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.weight.data[((o * self.in_c + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = valid_range(ky, h);
                        let (x0, x1) = valid_range(kx, w);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let d = &mut dst[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(d_weight, d_bias, d_input)`; `d_input` only when requested.
    fn backward(
        &self,
        input: &[f64],
        d_out: &[f64],
        h: usize,
        w: usize,
        want_input: bool,
    ) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
        let plane = h * w;
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_c];
        let mut din = want_input.then(|| vec![0.0; self.in_c * plane]);
        for o in 0..self.out_c {
            let g = &d_out[o * plane..(o + 1) * plane];
            db[o] = g.iter().sum();
            for i in 0..self.in_c {
                let src = &input[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((o * self.in_c + i) * 3 + ky) * 3 + kx;
                        let wv = self.weight.data[widx];
                        let (y0, y1) = valid_range(ky, h);
                        let (x0, x1) = valid_range(kx, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let gr = &g[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (gv, sv) in gr.iter().zip(s) {
                                acc += gv * sv;
                            }
                            if let Some(din) = din.as_mut() {
                                let d = &mut din[i * plane + sy * w + x0 + kx - 1..i * plane + sy * w + x1 + kx - 1];
                                for (dv, gv) in d.iter_mut().zip(gr) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                        dw[widx] = acc;
                    }
                }
            }
        }
        (dw, db, din)
    }
}

/// Output rows/cols whose tap `k` (0..3) stays inside the input.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// 2x2 max pooling with stride 2; the first maximal position wins ties.
fn maxpool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Per-sample activations kept for backpropagation and Grad-CAM.
#[derive(Debug, Clone)]
pub struct Activations {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    arg2: Vec<usize>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Activations {
    /// Post-ReLU output of a convolution layer with its `(channels, height, width)`.
    pub fn conv_output(&self, layer: ConvLayer, size: usize) -> (&[f64], (usize, usize, usize)) {
        match layer {
            ConvLayer::Conv1 => (&self.a1, (CONV_CHANNELS[0], size, size)),
            ConvLayer::Conv2 => (&self.a2, (CONV_CHANNELS[1], size / 2, size / 2)),
            ConvLayer::Conv3 => (&self.a3, (CONV_CHANNELS[2], size / 4, size / 4)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvLayer {
    Conv1,
    Conv2,
    Conv3,
}

impl std::str::FromStr for ConvLayer {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv1" => Ok(ConvLayer::Conv1),
            "conv2" => Ok(ConvLayer::Conv2),
            "conv3" | "last" => Ok(ConvLayer::Conv3),
            other => Err(NnError::Parameter(format!("unknown layer {other:?} (conv1, conv2, conv3)"))),
        }
    }
}

/// Gradients in [`ToyCnn::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    fn zeros_like(model: &ToyCnn) -> Self {
        Gradients(model.params().iter().map(|t| vec![0.0; t.len()]).collect())
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Backward pass products beyond the parameter gradients.
struct Backward {
    grads: Gradients,
    d_a1: Vec<f64>,
    d_a2: Vec<f64>,
    d_a3: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    classes: usize,
    input_size: usize,
    coord_channels: bool,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    dense_w: Tensor,
    dense_b: Tensor,
}

impl ToyCnn {
    /// He-initialized convolutions, zero biases, He-initialized dense layer.
    pub fn new(classes: usize, input_size: usize, coord_channels: bool, seed: u64) -> Result<Self, NnError> {
        if classes < 2 {
            return Err(NnError::Parameter(format!("need at least 2 classes, got {classes}")));
        }
        if input_size < 4 || !input_size.is_multiple_of(4) {
            return Err(NnError::Parameter(format!("input size {input_size} must be a positive multiple of 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_c = if coord_channels { 3 } else { 1 };
        let conv1 = Conv::new(in_c, CONV_CHANNELS[0], &mut rng);
        let conv2 = Conv::new(CONV_CHANNELS[0], CONV_CHANNELS[1], &mut rng);
        let conv3 = Conv::new(CONV_CHANNELS[1], CONV_CHANNELS[2], &mut rng);
        let std = (2.0 / CONV_CHANNELS[2] as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let dense_w = Tensor {
            shape: vec![classes, CONV_CHANNELS[2]],
            data: (0..classes * CONV_CHANNELS[2]).map(|_| normal.sample(&mut rng)).collect(),
        };
        Ok(Self {
            classes,
            input_size,
            coord_channels,
            conv1,
            conv2,
            conv3,
            dense_w,
            dense_b: Tensor::zeros(vec![classes]),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn coord_channels(&self) -> bool {
        self.coord_channels
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
            &self.dense_w,
            &self.dense_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Dense weights, `classes x 32`.
    pub fn dense_weights_mut(&mut self) -> &mut Tensor {
        &mut self.dense_w
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let mut rest = flat;
        for (ti, t) in self.params().iter().enumerate() {
            if rest < t.len() {
                return (ti, rest);
            }
            rest -= t.len();
        }
        panic!("parameter index {flat} out of range");
    }

    pub fn param(&self, flat: usize) -> f64 {
        let (t, i) = self.locate(flat);
        self.params()[t].data[i]
    }

    pub fn set_param(&mut self, flat: usize, v: f64) {
        let (t, i) = self.locate(flat);
        self.params_mut()[t].data[i] = v;
    }

    fn with_coords(&self, image: &[f64]) -> Vec<f64> {
        if !self.coord_channels {
            return image.to_vec();
        }
        let s = self.input_size;
        let coord = |i: usize| if s > 1 { 2.0 * i as f64 / (s - 1) as f64 - 1.0 } else { 0.0 };
        let mut v = Vec::with_capacity(3 * s * s);
        v.extend_from_slice(image);
        v.extend((0..s * s).map(|p| coord(p % s) * image[p]));
        v.extend((0..s * s).map(|p| coord(p / s) * image[p]));
        v
    }

    /// Forward pass for one `S x S` single-channel image.
    pub fn forward_one(&self, image: &[f64]) -> Result<Activations, NnError> {
        let s = self.input_size;
        if image.len() != s * s {
            return Err(NnError::Input(format!("expected {} values ({s}x{s}), got {}", s * s, image.len())));
        }
        let input = self.with_coords(image);
        let z1 = self.conv1.forward(&input, s, s);
        let a1 = relu(&z1);
        let (p1, arg1) = maxpool2(&a1, CONV_CHANNELS[0], s, s);
        let s2 = s / 2;
        let z2 = self.conv2.forward(&p1, s2, s2);
        let a2 = relu(&z2);
        let (p2, arg2) = maxpool2(&a2, CONV_CHANNELS[1], s2, s2);
        let s3 = s2 / 2;
        let z3 = self.conv3.forward(&p2, s3, s3);
        let a3 = relu(&z3);
        let plane = s3 * s3;
        let pooled: Vec<f64> =
            (0..CONV_CHANNELS[2]).map(|c| a3[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        let logits = (0..self.classes)
            .map(|k| self.dense_b.data[k] + self.dense_w.row(k).iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>())
            .collect();
        Ok(Activations { input, z1, a1, p1, arg1, z2, a2, p2, arg2, z3, a3, pooled, logits })
    }

    /// Batch forward over `[N, 1, S, S]`; returns `[N, k]` logits and the
    /// per-sample caches.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Vec<Activations>), NnError> {
        let s = self.input_size;
        if batch.shape.len() != 4 || batch.shape[1] != 1 || batch.shape[2] != s || batch.shape[3] != s {
            return Err(NnError::Input(format!("expected [N, 1, {s}, {s}], got {:?}", batch.shape)));
        }
        let n = batch.shape[0];
        let acts: Vec<Activations> = (0..n).map(|i| self.forward_one(batch.row(i))).collect::<Result<_, _>>()?;
        let logits = acts.iter().flat_map(|a| a.logits.iter().copied()).collect();
        Ok((Tensor { shape: vec![n, self.classes], data: logits }, acts))
    }

    fn backward(&self, act: &Activations, d_logits: &[f64], want_param_grads: bool) -> Backward {
        let s = self.input_size;
        let (s2, s3) = (s / 2, s / 4);
        let plane3 = s3 * s3;
        let c3 = CONV_CHANNELS[2];

        let mut d_dense_w = vec![0.0; self.dense_w.len()];
        let mut d_pooled = vec![0.0; c3];
        for k in 0..self.classes {
            for c in 0..c3 {
                d_dense_w[k * c3 + c] = d_logits[k] * act.pooled[c];
                d_pooled[c] += d_logits[k] * self.dense_w.data[k * c3 + c];
            }
        }
        let d_dense_b = d_logits.to_vec();

        let d_a3: Vec<f64> = (0..c3 * plane3).map(|i| d_pooled[i / plane3] / plane3 as f64).collect();
        let d_z3 = relu_backward(&d_a3, &act.z3);
        let (dw3, db3, d_p2) = self.conv3.backward(&act.p2, &d_z3, s3, s3, true);
        let d_a2 = unpool(&d_p2.expect("requested"), &act.arg2, act.a2.len());
        let d_z2 = relu_backward(&d_a2, &act.z2);
        let (dw2, db2, d_p1) = self.conv2.backward(&act.p1, &d_z2, s2, s2, true);
        let d_a1 = unpool(&d_p1.expect("requested"), &act.arg1, act.a1.len());
        let (dw1, db1) = if want_param_grads {
            let d_z1 = relu_backward(&d_a1, &act.z1);
            let (dw1, db1, _) = self.conv1.backward(&act.input, &d_z1, s, s, false);
            (dw1, db1)
        } else {
            (vec![0.0; self.conv1.weight.len()], vec![0.0; self.conv1.bias.len()])
        };
        Backward { grads: Gradients(vec![dw1, db1, dw2, db2, dw3, db3, d_dense_w, d_dense_b]), d_a1, d_a2, d_a3 }
    }

    /// Cross-entropy loss of one sample and its parameter gradients.
    pub fn loss_and_grad(&self, image: &[f64], label: usize) -> Result<(f64, Gradients), NnError> {
        if label >= self.classes {
            return Err(NnError::Input(format!("label {label} outside 0..{}", self.classes)));
        }
        let act = self.forward_one(image)?;
        let probs = softmax(&act.logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut d = probs;
        d[label] -= 1.0;
        Ok((loss, self.backward(&act, &d, true).grads))
    }

    pub fn loss(&self, image: &[f64], label: usize) -> Result<f64, NnError> {
        let act = self.forward_one(image)?;
        let probs = softmax(&act.logits);
        Ok(-probs[label].max(f64::MIN_POSITIVE).ln())
    }

    pub fn predict_one(&self, image: &[f64]) -> Result<usize, NnError> {
        Ok(argmax(&self.forward_one(image)?.logits))
    }
}

fn relu_backward(d_out: &[f64], pre: &[f64]) -> Vec<f64> {
    d_out.iter().zip(pre).map(|(&d, &z)| if z > 0.0 { d } else { 0.0 }).collect()
}

fn unpool(d_pooled: &[f64], arg: &[usize], len: usize) -> Vec<f64> {
    let mut d = vec![0.0; len];
    for (&g, &i) in d_pooled.iter().zip(arg) {
        d[i] += g;
    }
    d
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Single-channel model inputs with class labels.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: Vec<f64>, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, batch_size: 32, epochs: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NnError::Parameter(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(NnError::Parameter("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch cross-entropy over the epoch.
    pub loss: f64,
    /// Training accuracy of the minibatch predictions made during the epoch.
    pub accuracy: f64,
}

/// Minibatch SGD with momentum (`v = m v + g; p -= lr v`) on mean
/// cross-entropy. Samples are visited in a seeded shuffled order each epoch;
/// per-sample gradients may be computed in parallel but are summed in order,
/// so results are bit-identical for a fixed seed.
pub fn train(model: &mut ToyCnn, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>, NnError> {
    train_with(model, data, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut ToyCnn,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&ToyCnn, &EpochStats),
) -> Result<Vec<EpochStats>, NnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::Input("empty training set".into()));
    }
    if data.images.len() != data.labels.len() {
        return Err(NnError::Input("images and labels differ in length".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.classes) {
        return Err(NnError::Configuration(format!("label {bad} but model has {} classes", model.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Gradients::zeros_like(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = |&i: &usize| -> Result<(f64, bool, Gradients), NnError> {
                let act = model.forward_one(&data.images[i])?;
                let probs = softmax(&act.logits);
                let label = data.labels[i];
                let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
                let hit = argmax(&probs) == label;
                let mut d = probs;
                d[label] -= 1.0;
                Ok((loss, hit, model.backward(&act, &d, true).grads))
            };
            #[cfg(feature = "parallel")]
            let results: Vec<_> = {
                use rayon::prelude::*;
                batch.par_iter().map(per_sample).collect()
            };
            #[cfg(not(feature = "parallel"))]
            let results: Vec<_> = batch.iter().map(per_sample).collect();

            let mut grad = Gradients::zeros_like(model);
            for r in results {
                let (loss, hit, g) = r?;
                loss_sum += loss;
                correct += hit as usize;
                grad.add(&g);
            }
            grad.scale(1.0 / batch.len() as f64);
            for ((param, v), g) in model.params_mut().into_iter().zip(&mut velocity.0).zip(&grad.0) {
                for ((p, vi), gi) in param.data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi;
                    *p -= cfg.lr * *vi;
                }
            }
        }
        let stats =
            EpochStats { epoch, loss: loss_sum / data.len() as f64, accuracy: correct as f64 / data.len() as f64 };
        on_epoch(model, &stats);
        history.push(stats);
    }
    Ok(history)
}

/// Argmax predictions for every image, in input order.
pub fn predict(model: &ToyCnn, images: &[Vec<f64>]) -> Result<Vec<usize>, NnError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        images.par_iter().map(|im| model.predict_one(im)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        images.iter().map(|im| model.predict_one(im)).collect()
    }
}

/// Grayscale, then bilinear resize to `size x size`.
pub fn prepare_image(img: &ImageBuffer, size: usize) -> ImageBuffer {
    let gray = to_grayscale(img);
    if gray.width() == size && gray.height() == size {
        return gray;
    }
    let small = resize_bilinear(&gray.to_float(), size, size);
    small.to_u8()
}

fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    root: &Path,
    size: usize,
) -> Result<Vec<(ImageBuffer, usize)>, NnError> {
    let frames: Vec<&ManifestFrame> = manifest.frames_in(split).collect();
    let load = |f: &&ManifestFrame| -> Result<(ImageBuffer, usize), NnError> {
        let img = ImageBuffer::load_png(root.join(&f.path))?;
        Ok((prepare_image(&img, size), f.station.index()))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        frames.par_iter().map(load).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        frames.iter().map(load).collect()
    }
}

/// Model-ready images of one manifest split (paths relative to `root`),
/// normalized with the manifest's statistics; labels are station indices in
/// manifest order.
pub fn manifest_dataset(
    manifest: &DatasetManifest,
    split: Split,
    root: &Path,
    size: usize,
) -> Result<Dataset, NnError> {
    let mut out = Dataset::default();
    for (img, label) in load_split(manifest, split, root, size)? {
        out.push(normalize(&img, &manifest.norm)?.data, label);
    }
    Ok(out)
}

/// Ground-truth station indices and argmax predictions for one split, in
/// manifest order.
pub fn predict_frames(
    model: &ToyCnn,
    manifest: &DatasetManifest,
    split: Split,
    root: &Path,
) -> Result<(Vec<usize>, Vec<usize>), NnError> {
    if model.classes() != Station::COUNT {
        return Err(NnError::Configuration(format!(
            "model has {} classes, the manifest has {} stations",
            model.classes(),
            Station::COUNT
        )));
    }
    let data = manifest_dataset(manifest, split, root, model.input_size())?;
    let preds = predict(model, &data.images)?;
    Ok((data.labels, preds))
}

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-4;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max over checked parameters of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose `+-h` probes changed a ReLU sign or a pooling choice;
    /// the central difference is not a derivative there, so they are left out.
    pub skipped_kinks: usize,
}

/// Pooling winners with the ReLU sign at each winner, plus the last conv's
/// ReLU signs. Together they fix the smooth region the loss is evaluated in;
/// sign changes at positions that lose the pooling do not reach the loss.
fn kink_signature(act: &Activations) -> (Vec<bool>, Vec<usize>) {
    let signs = act
        .arg1
        .iter()
        .map(|&i| act.z1[i] > 0.0)
        .chain(act.arg2.iter().map(|&i| act.z2[i] > 0.0))
        .chain(act.z3.iter().map(|&z| z > 0.0))
        .collect();
    let args = act.arg1.iter().chain(&act.arg2).copied().collect();
    (signs, args)
}

/// Central differences with step [`FD_STEP`] on candidate parameters, taken in
/// order until `want` kink-free parameters have been checked.
fn check_candidates(
    model: &ToyCnn,
    image: &[f64],
    label: usize,
    analytic: &Gradients,
    candidates: impl IntoIterator<Item = usize>,
    want: usize,
) -> Result<GradCheckReport, NnError> {
    if label >= model.classes {
        return Err(NnError::Input(format!("label {label} outside 0..{}", model.classes)));
    }
    let flat = analytic.flat();
    if flat.len() != model.param_count() {
        return Err(NnError::Input("gradient does not match the model".into()));
    }
    let base = kink_signature(&model.forward_one(image)?);
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };
    let ce = |act: &Activations| -softmax(&act.logits)[label].max(f64::MIN_POSITIVE).ln();
    for idx in candidates {
        if report.checked >= want {
            break;
        }
        let orig = probe.param(idx);
        probe.set_param(idx, orig + FD_STEP);
        let up = probe.forward_one(image)?;
        probe.set_param(idx, orig - FD_STEP);
        let down = probe.forward_one(image)?;
        probe.set_param(idx, orig);
        if kink_signature(&up) != base || kink_signature(&down) != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (ce(&up) - ce(&down)) / (2.0 * FD_STEP);
        let a = flat[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Checks `analytic` against central differences on `n_params` parameters
/// drawn without replacement with `seed` (all of them if `n_params` exceeds
/// the parameter count).
pub fn gradient_check_report(
    model: &ToyCnn,
    image: &[f64],
    label: usize,
    analytic: &Gradients,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let total = model.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    check_candidates(model, image, label, analytic, order, n_params)
}

/// [`gradient_check_report`] restricted to the given flat indices.
pub fn gradient_check_indices(
    model: &ToyCnn,
    image: &[f64],
    label: usize,
    analytic: &Gradients,
    picks: &[usize],
) -> Result<GradCheckReport, NnError> {
    check_candidates(model, image, label, analytic, picks.iter().copied(), picks.len())
}

/// Max relative error of `analytic` over `n_params` random parameters.
pub fn gradient_check_against(
    model: &ToyCnn,
    image: &[f64],
    label: usize,
    analytic: &Gradients,
    n_params: usize,
    seed: u64,
) -> Result<f64, NnError> {
    Ok(gradient_check_report(model, image, label, analytic, n_params, seed)?.max_rel_error)
}

/// Max relative error of this model's backprop over `n_params` random parameters.
pub fn gradient_check(model: &ToyCnn, image: &[f64], label: usize, n_params: usize, seed: u64) -> Result<f64, NnError> {
    let (_, grads) = model.loss_and_grad(image, label)?;
    gradient_check_against(model, image, label, &grads, n_params, seed)
}

/// Parameter-index ranges for each tensor, in [`ToyCnn::params`] order.
pub fn param_ranges(model: &ToyCnn) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    model
        .params()
        .iter()
        .map(|t| {
            let r = start..start + t.len();
            start += t.len();
            r
        })
        .collect()
}

/// Class activation map at feature-map resolution plus its upsampled view.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Non-negative, max-normalized to 1 unless all zero.
    pub values: Vec<f64>,
    pub upsampled_width: usize,
    pub upsampled_height: usize,
    /// Bilinear upsampling of `values` to the input resolution.
    pub upsampled: Vec<f64>,
}

impl Heatmap {
    /// Builds a heatmap from `ReLU(sum_c alpha_c A_c)` with `alpha_c` the
    /// spatial mean of the gradient for channel `c`.
    pub fn from_gradients(
        activation: &[f64],
        gradient: &[f64],
        channels: usize,
        height: usize,
        width: usize,
        out_size: (usize, usize),
    ) -> Heatmap {
        let plane = height * width;
        let alphas: Vec<f64> =
            (0..channels).map(|c| gradient[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        let mut values = vec![0.0; plane];
        for (c, &alpha) in alphas.iter().enumerate() {
            for (v, &a) in values.iter_mut().zip(&activation[c * plane..(c + 1) * plane]) {
                *v += alpha * a;
            }
        }
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in values.iter_mut() {
                *v /= max;
            }
        }
        let small = FloatImage { width, height, channels: 1, data: values.clone() };
        let up = resize_bilinear(&small, out_size.0, out_size.1);
        Heatmap { width, height, values, upsampled_width: out_size.0, upsampled_height: out_size.1, upsampled: up.data }
    }

    /// Fraction of upsampled heatmap mass inside `[x0, x1) x [y0, y1)`;
    /// 0 for an all-zero map.
    pub fn mass_fraction(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let total: f64 = self.upsampled.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                inside += self.upsampled[y * self.upsampled_width + x];
            }
        }
        inside / total
    }
}

/// Grad-CAM of `target_class` at `layer`, using gradients of the target logit.
pub fn grad_cam(model: &ToyCnn, image: &[f64], target_class: usize, layer: ConvLayer) -> Result<Heatmap, NnError> {
    if target_class >= model.classes {
        return Err(NnError::Parameter(format!("class {target_class} outside 0..{}", model.classes)));
    }
    let act = model.forward_one(image)?;
    let mut d = vec![0.0; model.classes];
    d[target_class] = 1.0;
    let back = model.backward(&act, &d, false);
    let grad = match layer {
        ConvLayer::Conv1 => &back.d_a1,
        ConvLayer::Conv2 => &back.d_a2,
        ConvLayer::Conv3 => &back.d_a3,
    };
    let (a, (c, h, w)) = act.conv_output(layer, model.input_size);
    Ok(Heatmap::from_gradients(a, grad, c, h, w, (model.input_size, model.input_size)))
}

/// Blue (0) to red (1) pseudo-colour.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [255.0 * v, 0.0, 255.0 * (1.0 - v)]
}

/// Blends the colour-mapped heatmap over the grayscale image:
/// `out = (1 - alpha) * gray + alpha * colour`.
pub fn overlay(
    heat: &[f64],
    heat_w: usize,
    heat_h: usize,
    image: &ImageBuffer,
    alpha: f64,
) -> Result<ImageBuffer, NnError> {
    if heat_w != image.width() || heat_h != image.height() || heat.len() != heat_w * heat_h {
        return Err(NnError::Parameter(format!(
            "heatmap {heat_w}x{heat_h} does not match image {}x{}",
            image.width(),
            image.height()
        )));
    }
    let gray = crate::imaging::to_grayscale(image);
    let data = gray
        .data()
        .iter()
        .zip(heat)
        .flat_map(|(&g, &h)| {
            let col = colormap(h);
            col.map(|c| clamp_u8((1.0 - alpha) * g as f64 + alpha * c))
        })
        .collect();
    Ok(ImageBuffer::new(image.width(), image.height(), 3, data).expect("shape matches"))
}

const MAGIC: &[u8; 8] = b"EUSMLCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic, version, classes, input size, coord flag, tensors
/// (rank, dims, f64 values), norm stats`, all little-endian.
pub fn save_checkpoint(model: &ToyCnn, norm: &NormStats, mut out: impl Write) -> Result<(), NnError> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(model.classes as u32).to_le_bytes())?;
    out.write_all(&(model.input_size as u32).to_le_bytes())?;
    out.write_all(&[model.coord_channels as u8])?;
    let params = model.params();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for t in params {
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(&(norm.mean.len() as u32).to_le_bytes())?;
    for v in norm.mean.iter().chain(&norm.std) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &ToyCnn, norm: &NormStats) -> Vec<u8> {
    let mut buf = Vec::new();
    save_checkpoint(model, norm, &mut buf).expect("writing to memory");
    buf
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_checkpoint(mut r: impl Read) -> Result<(ToyCnn, NormStats), NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("not a model checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let classes = read_u32(&mut r)? as usize;
    let input_size = read_u32(&mut r)? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let mut model = ToyCnn::new(classes, input_size, flag[0] != 0, 0)?;
    let n = read_u32(&mut r)? as usize;
    if n != model.params().len() {
        return Err(NnError::Checkpoint(format!("expected {} tensors, found {n}", model.params().len())));
    }
    for t in model.params_mut() {
        let rank = read_u32(&mut r)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<_, _>>()?;
        if shape != t.shape {
            return Err(NnError::Checkpoint(format!("tensor shape {shape:?}, expected {:?}", t.shape)));
        }
        for v in t.data.iter_mut() {
            *v = read_f64(&mut r)?;
        }
    }
    let ch = read_u32(&mut r)? as usize;
    let mean = (0..ch).map(|_| read_f64(&mut r)).collect::<Result<_, _>>()?;
    let std = (0..ch).map(|_| read_f64(&mut r)).collect::<Result<_, _>>()?;
    Ok((model, NormStats { mean, std }))
}

/// Uniform random image in `[-1, 1]`, handy for tests and demos.
pub fn random_input(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_is_small() {
        let m = ToyCnn::new(3, 64, false, 0).unwrap();
        assert_eq!(m.param_count(), 80 + 1168 + 4640 + 32 * 3 + 3);
        assert!(m.param_count() < 100_000);
        assert!(ToyCnn::new(3, 62, false, 0).is_err());
        assert!(ToyCnn::new(1, 64, false, 0).is_err());
    }

    #[test]
    fn zero_dense_layer_gives_uniform_softmax() {
        let mut m = ToyCnn::new(4, 16, false, 1).unwrap();
        m.dense_w.data.fill(0.0);
        let act = m.forward_one(&random_input(16, 2)).unwrap();
        for p in softmax(&act.logits) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert_eq!(argmax(&act.logits), 0);
    }

    #[test]
    fn identical_images_identical_logits() {
        let m = ToyCnn::new(3, 16, true, 4).unwrap();
        let img = random_input(16, 5);
        let batch = Tensor::new(vec![3, 1, 16, 16], [img.clone(), img.clone(), img].concat()).unwrap();
        let (logits, _) = m.forward(&batch).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(1), logits.row(2));
        let bad = Tensor::zeros(vec![1, 1, 16, 12]);
        assert!(m.forward(&bad).is_err());
    }

    #[test]
    fn conv_hand_computed() {
        // identity-like kernel (centre tap 1) plus a right-neighbour tap 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv::new(1, 1, &mut rng);
        conv.weight.data = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0];
        conv.bias.data = vec![0.25];
        let input: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let out = conv.forward(&input, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let right = if x + 1 < 8 { input[y * 8 + x + 1] } else { 0.0 };
                assert_eq!(out[y * 8 + x], input[y * 8 + x] + 0.5 * right + 0.25);
            }
        }
    }

    #[test]
    fn maxpool_routes_to_one_position() {
        let input: Vec<f64> = vec![1.0, 3.0, 0.0, 0.0, 2.0, 3.0, 0.0, 5.0, 9.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let (out, arg) = maxpool2(&input, 1, 4, 4);
        assert_eq!(out, vec![3.0, 5.0, 9.0, 1.0]);
        // ties resolve to the first maximum
        assert_eq!(arg, vec![1, 7, 8, 10]);
        let d = unpool(&[1.0, 2.0, 3.0, 4.0], &arg, 16);
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 4);
        assert_eq!(d.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn gap_matches_naive_mean() {
        let m = ToyCnn::new(3, 32, false, 8).unwrap();
        let act = m.forward_one(&random_input(32, 1)).unwrap();
        let plane = 8 * 8;
        for c in 0..32 {
            let mut s = 0.0;
            for i in 0..plane {
                s += act.a3[c * plane + i];
            }
            assert!((act.pooled[c] - s / plane as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_names() {
        assert_eq!("conv3".parse::<ConvLayer>().unwrap(), ConvLayer::Conv3);
        assert!(matches!("fc".parse::<ConvLayer>(), Err(NnError::Parameter(_))));
    }

    #[test]
    fn zero_input_zero_weights_check_is_finite() {
        let mut m = ToyCnn::new(3, 8, false, 0).unwrap();
        for t in m.params_mut() {
            t.data.fill(0.0);
        }
        let err = gradient_check(&m, &vec![0.0; 64], 1, 200, 0).unwrap();
        assert!(err.is_finite());
        assert!(err < 1e-4);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
        assert_eq!(colormap(0.5), [127.5, 0.0, 127.5]);
    }

    #[test]
    fn overlay_blend() {
        let img = ImageBuffer::from_fn(4, 4, 1, |x, y, _| (x * 50 + y * 10) as u8).unwrap();
        let zero = overlay(&[0.0; 16], 4, 4, &img, 0.4).unwrap();
        let ones = overlay(&[1.0; 16], 4, 4, &img, 0.4).unwrap();
        let half = overlay(&[0.5; 16], 4, 4, &img, 0.4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let g = img.get(x, y, 0) as f64;
                assert_eq!(zero.pixel(x, y), &[clamp_u8(0.6 * g), clamp_u8(0.6 * g), clamp_u8(0.6 * g + 102.0)]);
                assert_eq!(ones.pixel(x, y), &[clamp_u8(0.6 * g + 102.0), clamp_u8(0.6 * g), clamp_u8(0.6 * g)]);
                let m = clamp_u8(0.6 * g + 0.4 * 127.5);
                assert_eq!(half.pixel(x, y), &[m, clamp_u8(0.6 * g), m]);
            }
        }
        assert!(overlay(&[0.0; 9], 3, 3, &img, 0.4).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_version_guard() {
        let m = ToyCnn::new(3, 16, true, 9).unwrap();
        let norm = NormStats { mean: vec![0.3], std: vec![0.2] };
        let bytes = checkpoint_bytes(&m, &norm);
        let (back, n2) = load_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(n2, norm);
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(load_checkpoint(bad.as_slice()), Err(NnError::Checkpoint(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(load_checkpoint(bad.as_slice()).is_err());
    }

    #[test]
    fn train_rejects_bad_input() {
        let mut m = ToyCnn::new(2, 8, false, 0).unwrap();
        assert!(matches!(train(&mut m, &Dataset::default(), &TrainConfig::default()), Err(NnError::Input(_))));
        let mut d = Dataset::default();
        d.push(vec![0.0; 64], 5);
        assert!(train(&mut m, &d, &TrainConfig::default()).is_err());
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        d.labels[0] = 0;
        assert!(train(&mut m, &d, &cfg).is_err());
    }
}
