//! Pointwise neural error corrector.
//!
//! A stack of 1x1 convolutions is the same multilayer perceptron applied at
//! every gridpoint, so the network is implemented as a dense MLP over the
//! point-major feature matrix. Forward and reverse passes are hand-written;
//! gradients are accumulated per fixed-size chunk of points and summed in
//! chunk order, which keeps training bit-reproducible with or without rayon.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Field, Grid, WeightField};
use crate::par;
use crate::predictors::FeatureTensor;
use crate::store::{self, FieldSet};

/// Points per forward/backward work unit.
const CHUNK_POINTS: usize = 256;
/// Neighbourhood sizes of the fractions loss.
pub const FRACTIONS_WINDOWS: [usize; 3] = [1, 3, 9];

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRIDPPNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
    LogCosh,
    CosineSimilarity,
    Fractions,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Mse,
        LossKind::Mae,
        LossKind::LogCosh,
        LossKind::CosineSimilarity,
        LossKind::Fractions,
    ];
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "logcosh" | "log_cosh" => Ok(LossKind::LogCosh),
            "cossim" | "cosine" | "cosine_similarity" => Ok(LossKind::CosineSimilarity),
            "fss" | "fractions" => Ok(LossKind::Fractions),
            other => Err(Error::arg("loss", format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One model, every gridpoint weighted equally.
    #[default]
    Global,
    /// One model, loss weighted by cos(latitude).
    LatWeighted,
    /// Separate northern-extratropics, tropics and southern-extratropics
    /// models, blended across the band edges.
    TriRegion,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Regime::Global),
            "latw" | "lat_weighted" => Ok(Regime::LatWeighted),
            "triregion" | "tri_region" => Ok(Regime::TriRegion),
            other => Err(Error::arg("regime", format!("unknown regime `{other}`"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Global => "global",
            Regime::LatWeighted => "latw",
            Regime::TriRegion => "triregion",
        })
    }
}

/// Latitude bands of the three-model regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSplit {
    pub tropics_south: f64,
    pub tropics_north: f64,
    /// Width in degrees of the linear blend centred on each band edge.
    pub blend_width: f64,
}

impl Default for RegionSplit {
    fn default() -> Self {
        RegionSplit { tropics_south: -30.0, tropics_north: 30.0, blend_width: 5.0 }
    }
}

impl RegionSplit {
    pub fn validate(&self) -> Result<()> {
        if !(self.tropics_south < self.tropics_north) {
            return Err(Error::arg("region_split", "tropics_south must be < tropics_north"));
        }
        if !(self.blend_width >= 0.0) {
            return Err(Error::arg("region_split", "blend_width must be >= 0"));
        }
        Ok(())
    }

    /// Blend weights `[north, tropics, south]` at `lat`; they sum to one.
    pub fn weights(&self, lat: f64) -> [f64; 3] {
        let half = self.blend_width / 2.0;
        let ramp = |x: f64| {
            if self.blend_width == 0.0 {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                ((x + half) / self.blend_width).clamp(0.0, 1.0)
            }
        };
        let north = ramp(lat - self.tropics_north);
        let south = ramp(self.tropics_south - lat);
        [north, 1.0 - north - south, south]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub input_channels: usize,
    pub output_channels: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Weight the loss by cos(latitude); implied by [`Regime::LatWeighted`].
    pub lat_weighting: bool,
    pub regime: Regime,
    pub region_split: RegionSplit,
}

impl ModelConfig {
    /// Hidden widths 64, 128, 256 with ReLU and an MSE loss.
    pub fn new(input_channels: usize, output_channels: usize) -> Self {
        ModelConfig {
            layer_widths: vec![64, 128, 256],
            activation: Activation::Relu,
            input_channels,
            output_channels,
            seed: 0,
            loss: LossKind::Mse,
            lat_weighting: false,
            regime: Regime::Global,
            region_split: RegionSplit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::arg("layer_widths", "at least one hidden layer is required"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::arg("layer_widths", "widths must be positive"));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::arg("channels", "input and output channels must be >= 1"));
        }
        self.region_split.validate()
    }

    pub fn uses_lat_weights(&self) -> bool {
        self.lat_weighting || self.regime == Regime::LatWeighted
    }

    /// `(fan_in, fan_out)` of every layer including the linear output head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_channels];
        dims.extend(&self.layer_widths);
        dims.push(self.output_channels);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter vector; layer `l` stores its `fan_out x fan_in` weights
/// row-major followed by `fan_out` biases. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub activation: Activation,
    pub shapes: Vec<(usize, usize)>,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shapes: Vec<(usize, usize)>, activation: Activation) -> Self {
        let len = shapes.iter().map(|(i, o)| i * o + o).sum();
        ModelParams { activation, shapes, data: vec![0.0; len] }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams { activation: self.activation, shapes: self.shapes.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn input_channels(&self) -> usize {
        self.shapes[0].0
    }

    pub fn output_channels(&self) -> usize {
        self.shapes.last().expect("nonempty").1
    }

    fn offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (i, o) = self.shapes[layer];
        let off = self.offset(layer);
        &self.data[off..off + i * o]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (i, o) = self.shapes[layer];
        let off = self.offset(layer) + i * o;
        &self.data[off..off + o]
    }

    /// Raw (unnormalised) forward pass; returns `n_points x out` point-major.
    pub fn forward(&self, features: &FeatureTensor) -> Result<Vec<f64>> {
        if features.n_channels != self.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, tensor has {}",
                self.input_channels(),
                features.n_channels
            )));
        }
        Ok(self.forward_points(&features.data, features.n_points()))
    }

    pub(crate) fn forward_points(&self, inputs: &[f64], n_points: usize) -> Vec<f64> {
        let n_out = self.output_channels();
        let mut out = vec![0.0; n_points * n_out];
        let n_in = self.input_channels();
        par::for_each_chunk_mut(&mut out, CHUNK_POINTS * n_out, |ci, out_chunk| {
            let m = out_chunk.len() / n_out;
            let start = ci * CHUNK_POINTS;
            let acts = self.forward_chunk(&inputs[start * n_in..(start + m) * n_in], m);
            out_chunk.copy_from_slice(acts.last().expect("output layer"));
        });
        out
    }

    /// Activations of every layer for `m` points; the last entry is the output.
    fn forward_chunk(&self, inputs: &[f64], m: usize) -> Vec<Vec<f64>> {
        let n_layers = self.shapes.len();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (n_in, n_out) = self.shapes[l];
            let x = if l == 0 { inputs } else { &acts[l - 1] };
            let mut z = vec![0.0; m * n_out];
            let w = self.weights(l);
            // z (m x out) = x (m x in) . w^T
            unsafe {
                matrixmultiply::dgemm(
                    m, n_in, n_out, 1.0,
                    x.as_ptr(), n_in as isize, 1,
                    w.as_ptr(), 1, n_in as isize,
                    0.0, z.as_mut_ptr(), n_out as isize, 1,
                );
            }
            let b = self.bias(l);
            let hidden = l + 1 < n_layers;
            for row in z.chunks_exact_mut(n_out) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                    if hidden {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates parameter gradients of one chunk given d(loss)/d(output).
    fn backward_chunk(&self, inputs: &[f64], acts: &[Vec<f64>], d_out: &[f64], m: usize, grad: &mut [f64]) {
        let n_layers = self.shapes.len();
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = self.shapes[l];
            if l + 1 < n_layers {
                for (d, y) in delta.iter_mut().zip(&acts[l]) {
                    *d *= self.activation.derivative_from_output(*y);
                }
            }
            let x = if l == 0 { inputs } else { &acts[l - 1] };
            let off = self.offset(l);
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            // gw (out x in) += delta^T (out x m) . x (m x in)
            unsafe {
                matrixmultiply::dgemm(
                    n_out, m, n_in, 1.0,
                    delta.as_ptr(), 1, n_out as isize,
                    x.as_ptr(), n_in as isize, 1,
                    1.0, gw.as_mut_ptr(), n_in as isize, 1,
                );
            }
            for row in delta.chunks_exact(n_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; m * n_in];
                // prev (m x in) = delta (m x out) . w (out x in)
                unsafe {
                    matrixmultiply::dgemm(
                        m, n_out, n_in, 1.0,
                        delta.as_ptr(), n_out as isize, 1,
                        self.weights(l).as_ptr(), n_in as isize, 1,
                        0.0, prev.as_mut_ptr(), n_in as isize, 1,
                    );
                }
                delta = prev;
            }
        }
    }
}

/// He-style uniform initialisation, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
/// with zero biases; deterministic per seed.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    init_with_seed(config, config.seed)
}

fn init_with_seed(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config.layer_shapes(), config.activation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut off = 0;
    for (n_in, n_out) in config.layer_shapes() {
        let limit = (6.0 / n_in as f64).sqrt();
        for w in &mut params.data[off..off + n_in * n_out] {
            *w = rng.gen_range(-limit..limit);
        }
        off += n_in * n_out + n_out;
    }
    Ok(params)
}

/// Layout of a training or evaluation sample's loss: point-major values with
/// `n_features` per point on `grid`, plus per-point weights.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub grid: Grid,
    pub n_features: usize,
    pub weights: &'a [f64],
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Loss value and its gradient with respect to `prediction` (both point-major).
pub fn loss_and_grad(kind: LossKind, prediction: &[f64], target: &[f64], layout: LossInput<'_>) -> (f64, Vec<f64>) {
    let nf = layout.n_features;
    let w = layout.weights;
    let total_w: f64 = w.iter().sum::<f64>() * nf as f64;
    let mut grad = vec![0.0; prediction.len()];
    if total_w <= 0.0 {
        return (0.0, grad);
    }
    let pointwise = |g: &mut Vec<f64>, f: &dyn Fn(f64) -> (f64, f64)| {
        let mut acc = 0.0;
        for (i, (p, t)) in prediction.iter().zip(target).enumerate() {
            let wp = w[i / nf];
            let (v, d) = f(p - t);
            acc += wp * v;
            g[i] = wp * d / total_w;
        }
        acc / total_w
    };
    match kind {
        LossKind::Mse => {
            let v = pointwise(&mut grad, &|d| (d * d, 2.0 * d));
            (v, grad)
        }
        LossKind::Mae => {
            let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            let v = pointwise(&mut grad, &|d| (d.abs(), sign(d)));
            (v, grad)
        }
        LossKind::LogCosh => {
            let v = pointwise(&mut grad, &|d| (log_cosh(d), d.tanh()));
            (v, grad)
        }
        LossKind::CosineSimilarity => {
            let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for (i, (p, t)) in prediction.iter().zip(target).enumerate() {
                let wp = w[i / nf];
                pt += wp * p * t;
                pp += wp * p * p;
                tt += wp * t * t;
            }
            if pp == 0.0 || tt == 0.0 {
                return (1.0, grad);
            }
            let (np, nt) = (pp.sqrt(), tt.sqrt());
            let cos = pt / (np * nt);
            for (i, (p, t)) in prediction.iter().zip(target).enumerate() {
                let wp = w[i / nf];
                grad[i] = -(wp * t / (np * nt) - cos * wp * p / pp);
            }
            (1.0 - cos, grad)
        }
        LossKind::Fractions => {
            let (rows, cols) = layout.grid.shape();
            let mut total = 0.0;
            for f in 0..nf {
                let diff: Vec<f64> = (0..rows * cols).map(|p| prediction[p * nf + f] - target[p * nf + f]).collect();
                for window in FRACTIONS_WINDOWS {
                    let smoothed = grid::neighborhood_mean_raw(&diff, rows, cols, window).expect("odd window");
                    let mut weighted = vec![0.0; rows * cols];
                    for p in 0..rows * cols {
                        total += w[p] * smoothed[p] * smoothed[p];
                        weighted[p] = 2.0 * w[p] * smoothed[p];
                    }
                    let back = grid::neighborhood_mean_adjoint(&weighted, rows, cols, window).expect("odd window");
                    for p in 0..rows * cols {
                        grad[p * nf + f] += back[p] / (total_w * FRACTIONS_WINDOWS.len() as f64);
                    }
                }
            }
            (total / (total_w * FRACTIONS_WINDOWS.len() as f64), grad)
        }
    }
}

/// Converts a field set to the point-major layout used by the network.
pub fn field_set_to_points(set: &FieldSet) -> Vec<f64> {
    let nf = set.n_features();
    let mut out = vec![0.0; set.grid.len() * nf];
    for (f, field) in set.fields.iter().enumerate() {
        for (p, v) in field.values.iter().enumerate() {
            out[p * nf + f] = *v;
        }
    }
    out
}

/// Inverse of [`field_set_to_points`] using `template` for layout and metadata.
pub fn points_to_field_set(points: &[f64], template: &FieldSet) -> FieldSet {
    let nf = template.n_features();
    template.map_fields(|f, field| Field {
        grid: field.grid,
        values: (0..field.values.len()).map(|p| points[p * nf + f]).collect(),
    })
}

/// Scalar loss between two field sets.
pub fn loss(prediction: &FieldSet, target: &FieldSet, kind: LossKind, weights: Option<&WeightField>) -> Result<f64> {
    prediction.ensure_compatible(target)?;
    let uniform;
    let w = match weights {
        Some(w) if w.grid != prediction.grid => {
            return Err(Error::ShapeMismatch("weights on a different grid".into()))
        }
        Some(w) => &w.values,
        None => {
            uniform = vec![1.0; prediction.grid.len()];
            &uniform
        }
    };
    let layout = LossInput { grid: prediction.grid, n_features: prediction.n_features(), weights: w };
    Ok(loss_and_grad(kind, &field_set_to_points(prediction), &field_set_to_points(target), layout).0)
}

/// Loss and exact parameter gradient for one sample. `inputs` must already be
/// normalised if the model was trained on normalised inputs.
pub fn loss_and_gradient(
    params: &ModelParams,
    inputs: &[f64],
    target: &[f64],
    kind: LossKind,
    layout: LossInput<'_>,
) -> (f64, ModelParams) {
    let n_in = params.input_channels();
    let n_out = params.output_channels();
    let n_points = inputs.len() / n_in;
    let n_chunks = n_points.div_ceil(CHUNK_POINTS);
    let chunk_acts = par::map_range(n_chunks, |ci| {
        let start = ci * CHUNK_POINTS;
        let m = CHUNK_POINTS.min(n_points - start);
        params.forward_chunk(&inputs[start * n_in..(start + m) * n_in], m)
    });
    let mut prediction = Vec::with_capacity(n_points * n_out);
    for acts in &chunk_acts {
        prediction.extend_from_slice(acts.last().expect("output"));
    }
    let (value, d_pred) = loss_and_grad(kind, &prediction, target, layout);
    let partials = par::map_range(n_chunks, |ci| {
        let start = ci * CHUNK_POINTS;
        let m = CHUNK_POINTS.min(n_points - start);
        let mut g = vec![0.0; params.len()];
        params.backward_chunk(
            &inputs[start * n_in..(start + m) * n_in],
            &chunk_acts[ci],
            &d_pred[start * n_out..(start + m) * n_out],
            m,
            &mut g,
        );
        g
    });
    let mut grad = params.zeros_like();
    for g in partials {
        grad.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (value, grad)
}

/// Per-channel standardisation fitted on the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n_channels: usize) -> Self {
        Normalizer { mean: vec![0.0; n_channels], std: vec![1.0; n_channels] }
    }

    pub fn fit(tensors: &[&FeatureTensor]) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::InsufficientData("no feature tensors".into()))?;
        let nc = first.n_channels;
        let mut sum = vec![0.0; nc];
        let mut count = 0usize;
        for t in tensors {
            if t.n_channels != nc {
                return Err(Error::ShapeMismatch("feature tensors disagree on channel count".into()));
            }
            for row in t.data.chunks_exact(nc) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            count += t.n_points();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; nc];
        for t in tensors {
            for row in t.data.chunks_exact(nc) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, tensor: &FeatureTensor) -> Result<Vec<f64>> {
        if tensor.n_channels != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "normaliser has {} channels, tensor {}",
                self.mean.len(),
                tensor.n_channels
            )));
        }
        let nc = tensor.n_channels;
        let mut out = tensor.data.clone();
        for row in out.chunks_exact_mut(nc) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl Optimizer {
    pub fn with_learning_rate(self, lr: f64) -> Self {
        match self {
            Optimizer::Sgd { .. } => Optimizer::Sgd { learning_rate: lr },
            Optimizer::Adam { beta1, beta2, epsilon, .. } => Optimizer::Adam { learning_rate: lr, beta1, beta2, epsilon },
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        OptimizerState { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd { learning_rate } => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= learning_rate * g);
            }
            Optimizer::Adam { learning_rate, beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= learning_rate * mh / (vh.sqrt() + epsilon);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// Side length of the square tiles used as mini-batches; `None` makes
    /// every sample a single batch.
    pub tile_size: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { optimizer: Optimizer::default(), epochs: 20, tile_size: Some(32) }
    }
}

/// One training sample: inputs for a tile and its target error.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FeatureTensor,
    pub target: FieldSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLoss {
    /// 0 is the loss before any update.
    pub epoch: usize,
    pub region: String,
    pub loss: f64,
}

/// Trained corrector: configuration, input normalisation and one model per region.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrector {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    /// One model, or `[north, tropics, south]` for the three-region regime.
    pub models: Vec<ModelParams>,
}

pub const REGION_NAMES: [&str; 3] = ["north", "tropics", "south"];

impl Corrector {
    fn region_label(&self, i: usize) -> &'static str {
        if self.models.len() == 1 {
            "global"
        } else {
            REGION_NAMES[i]
        }
    }

    /// Predicted error, point-major, blended across regions when applicable.
    pub fn predict_points(&self, features: &FeatureTensor) -> Result<Vec<f64>> {
        let x = self.normalizer.apply(features)?;
        let n = features.n_points();
        if self.models.len() == 1 {
            if features.n_channels != self.models[0].input_channels() {
                return Err(Error::ShapeMismatch("channel count differs from the model".into()));
            }
            return Ok(self.models[0].forward_points(&x, n));
        }
        let nf = self.config.output_channels;
        let mut out = vec![0.0; n * nf];
        let grid = features.grid;
        for (r, model) in self.models.iter().enumerate() {
            let pred = model.forward_points(&x, n);
            for p in 0..n {
                let w = self.config.region_split.weights(grid.lat(p / grid.n_lon))[r];
                if w == 0.0 {
                    continue;
                }
                for f in 0..nf {
                    out[p * nf + f] += w * pred[p * nf + f];
                }
            }
        }
        Ok(out)
    }

    /// Predicted forecast error laid out like `template`.
    pub fn predict(&self, features: &FeatureTensor, template: &FieldSet) -> Result<FieldSet> {
        if features.grid != template.grid || template.n_features() != self.config.output_channels {
            return Err(Error::ShapeMismatch("feature tensor, template and model disagree".into()));
        }
        Ok(points_to_field_set(&self.predict_points(features)?, template))
    }

    /// Mean unweighted-by-region loss of the (stitched) corrector over a dataset.
    pub fn evaluate_loss(&self, dataset: &[Sample], kind: LossKind, lat_weighted: bool) -> Result<f64> {
        let mut total = 0.0;
        for s in dataset {
            let pred = self.predict(&s.features, &s.target)?;
            let w = lat_weighted.then(|| grid::cos_lat_weights(&s.target.grid));
            total += loss(&pred, &s.target, kind, w.as_ref())?;
        }
        Ok(total / dataset.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = BTreeMap::new();
        header.insert("config", serde_json::to_value(&self.config)?);
        header.insert("normalizer", serde_json::to_value(&self.normalizer)?);
        header.insert("models", serde_json::json!(self.models.len()));
        header.insert("parameters_per_model", serde_json::json!(self.models[0].len()));
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&[0u8; 6]);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in &self.models {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        store::write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 24 {
            return Err(Error::Truncated("model checkpoint header".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad model checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body = &bytes[24..];
        if body.len() < len {
            return Err(Error::Truncated("model checkpoint header block".into()));
        }
        let header: serde_json::Value = serde_json::from_slice(&body[..len])?;
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        config.validate()?;
        let normalizer: Normalizer = serde_json::from_value(header["normalizer"].clone())?;
        let n_models = header["models"].as_u64().ok_or_else(|| Error::Format("missing model count".into()))? as usize;
        let per = config.parameter_count();
        let data = &body[len..];
        if data.len() != n_models * per * 8 {
            return Err(Error::Truncated(format!(
                "checkpoint holds {} parameter bytes, expected {}",
                data.len(),
                n_models * per * 8
            )));
        }
        let models = data
            .chunks_exact(per * 8)
            .map(|chunk| ModelParams {
                activation: config.activation,
                shapes: config.layer_shapes(),
                data: chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
            })
            .collect();
        Ok(Corrector { config, normalizer, models })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub corrector: Corrector,
    pub trace: Vec<EpochLoss>,
}

impl TrainOutcome {
    /// `epoch,region,loss` rows.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,region,loss\n");
        for e in &self.trace {
            out.push_str(&format!("{},{},{:.12e}\n", e.epoch, e.region, e.loss));
        }
        out
    }

    /// Loss before training and after the last epoch for region `region`.
    pub fn first_and_last(&self, region: &str) -> Option<(f64, f64)> {
        let mut it = self.trace.iter().filter(|e| e.region == region);
        let first = it.next()?.loss;
        let last = it.next_back().map(|e| e.loss).unwrap_or(first);
        Some((first, last))
    }
}

struct PreparedSample {
    inputs: Vec<f64>,
    target: Vec<f64>,
    grid: Grid,
    base_weights: Vec<f64>,
}

/// Cuts a sample into `tile x tile` blocks (smaller at the far edges).
fn split_tiles(s: &PreparedSample, tile: usize, n_in: usize, n_out: usize) -> Vec<PreparedSample> {
    let (rows, cols) = s.grid.shape();
    if tile >= rows && tile >= cols {
        return vec![PreparedSample {
            inputs: s.inputs.clone(),
            target: s.target.clone(),
            grid: s.grid,
            base_weights: s.base_weights.clone(),
        }];
    }
    let mut out = Vec::new();
    for r0 in (0..rows).step_by(tile) {
        for c0 in (0..cols).step_by(tile) {
            let (nr, nc) = ((rows - r0).min(tile), (cols - c0).min(tile));
            let grid = Grid {
                n_lat: nr,
                n_lon: nc,
                lat_start: s.grid.lat_start + r0 as f64 * s.grid.lat_step,
                lon_start: s.grid.lon(c0),
                ..s.grid
            };
            let points: Vec<usize> = (r0..r0 + nr).flat_map(|r| (c0..c0 + nc).map(move |c| r * cols + c)).collect();
            out.push(PreparedSample {
                inputs: points.iter().flat_map(|p| s.inputs[p * n_in..(p + 1) * n_in].iter().copied()).collect(),
                target: points.iter().flat_map(|p| s.target[p * n_out..(p + 1) * n_out].iter().copied()).collect(),
                grid,
                base_weights: points.iter().map(|p| s.base_weights[*p]).collect(),
            });
        }
    }
    out
}

/// Fits the corrector under the configured regime.
pub fn train(config: &ModelConfig, dataset: &[Sample], options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("training dataset is empty".into()));
    }
    for s in dataset {
        if s.features.n_channels != config.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} channels, config expects {}",
                s.features.n_channels, config.input_channels
            )));
        }
        if s.target.n_features() != config.output_channels || s.target.grid != s.features.grid {
            return Err(Error::ShapeMismatch("target does not match the feature tensor".into()));
        }
    }
    let normalizer = Normalizer::fit(&dataset.iter().map(|s| &s.features).collect::<Vec<_>>())?;
    let prepared = dataset
        .iter()
        .map(|s| {
            let grid = s.target.grid;
            let base_weights = if config.uses_lat_weights() {
                grid::cos_lat_weights(&grid).values
            } else {
                vec![1.0; grid.len()]
            };
            Ok(PreparedSample {
                inputs: normalizer.apply(&s.features)?,
                target: field_set_to_points(&s.target),
                grid,
                base_weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prepared: Vec<PreparedSample> = match options.tile_size {
        Some(0) => return Err(Error::arg("tile_size", "must be >= 1")),
        Some(t) => prepared
            .iter()
            .flat_map(|s| split_tiles(s, t, config.input_channels, config.output_channels))
            .collect(),
        None => prepared,
    };

    let n_regions = if config.regime == Regime::TriRegion { 3 } else { 1 };
    let mut models = Vec::with_capacity(n_regions);
    let mut trace = Vec::new();
    for region in 0..n_regions {
        let label = if n_regions == 1 { "global" } else { REGION_NAMES[region] };
        let weights: Vec<Vec<f64>> = prepared
            .iter()
            .map(|s| {
                if n_regions == 1 {
                    return s.base_weights.clone();
                }
                s.base_weights
                    .iter()
                    .enumerate()
                    .map(|(p, w)| w * config.region_split.weights(s.grid.lat(p / s.grid.n_lon))[region])
                    .collect()
            })
            .collect();
        let seed = config.seed.wrapping_add((region as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (params, region_trace) = fit_one(config, seed, &prepared, &weights, options, label)?;
        models.push(params);
        trace.extend(region_trace);
    }
    Ok(TrainOutcome { corrector: Corrector { config: config.clone(), normalizer, models }, trace })
}

fn fit_one(
    config: &ModelConfig,
    seed: u64,
    data: &[PreparedSample],
    weights: &[Vec<f64>],
    options: &TrainOptions,
    label: &str,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    let mut params = init_with_seed(config, seed)?;
    let mut opt = OptimizerState::new(options.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let layout = |i: usize| LossInput { grid: data[i].grid, n_features: config.output_channels, weights: &weights[i] };
    let mut trace = Vec::with_capacity(options.epochs + 1);
    // batches lying entirely outside this region carry no weight
    let mut order: Vec<usize> = (0..data.len()).filter(|i| weights[*i].iter().any(|w| *w > 0.0)).collect();
    if order.is_empty() {
        return Err(Error::InsufficientData(format!("no training points fall in region {label}")));
    }
    let n_batches = order.len() as f64;

    let initial: f64 = order
        .iter()
        .map(|&i| {
            let pred = params.forward_points(&data[i].inputs, data[i].grid.len());
            loss_and_grad(config.loss, &pred, &data[i].target, layout(i)).0
        })
        .sum::<f64>()
        / n_batches;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, region: label.into() });
    }
    trace.push(EpochLoss { epoch: 0, region: label.into(), loss: initial });

    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (value, grad) = loss_and_gradient(&params, &data[i].inputs, &data[i].target, config.loss, layout(i));
            if !value.is_finite() || grad.data.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, region: label.into() });
            }
            total += value;
            opt.step(&mut params.data, &grad.data);
        }
        if params.data.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, region: label.into() });
        }
        trace.push(EpochLoss { epoch, region: label.into(), loss: total / n_batches });
    }
    Ok((params, trace))
}

/// `forecast - predicted error`.
pub fn postprocess(corrector: &Corrector, forecast: &FieldSet, features: &FeatureTensor) -> Result<FieldSet> {
    let predicted = corrector.predict(features, forecast)?;
    forecast.sub(&predicted)
}

impl Corrector {
    /// Labels of the trained models in storage order.
    pub fn region_labels(&self) -> Vec<&'static str> {
        (0..self.models.len()).map(|i| self.region_label(i)).collect()
    }
}
