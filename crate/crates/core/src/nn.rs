//! Dense ReLU feed-forward networks with analytic gradients.
//!
//! Weights are stored `out × in`, so a batch `X` of shape `s × in` maps to
//! `X · Wᵀ + b`. Hidden layers apply ReLU; the output layer emits logits.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Rows evaluated per forward chunk when scoring whole splits.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of a desk-scale MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Multiplier on `base_width`.
    pub width_scale: f64,
    pub base_width: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            depth: 2,
            width_scale: 1.0,
            base_width: 256,
            activation: Activation::Relu,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    pub fn with_width_scale(mut self, width_scale: f64) -> Self {
        self.width_scale = width_scale;
        self
    }

    pub fn hidden_width(&self) -> usize {
        (self.base_width as f64 * self.width_scale).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return invalid("input_dim and output_dim must be positive");
        }
        if self.depth == 0 {
            return invalid("depth must be at least 1");
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) || self.base_width == 0 {
            return invalid("base_width and width_scale must be positive");
        }
        if self.hidden_width() == 0 {
            return invalid(format!(
                "hidden width round({} x {}) is zero",
                self.base_width, self.width_scale
            ));
        }
        Ok(())
    }

    /// `(in, out)` for every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_width();
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.depth {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }
}

/// One affine layer of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub index: usize,
    /// Hidden-layer weights are prunable; the output layer is not.
    pub prunable: bool,
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layer parameters of an MLP (Θ).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    layers: Vec<Layer<S>>,
    count: usize,
}

impl<S: Scalar> ParamSet<S> {
    /// Builds a parameter set from `(weight, bias)` pairs, input layer first.
    ///
    /// The last layer is tagged non-prunable.
    pub fn from_layers(layers: Vec<(Array2<S>, Array1<S>)>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("a ParamSet needs at least one layer");
        }
        let last = layers.len() - 1;
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(index, (weight, bias))| Layer {
                index,
                prunable: index != last,
                weight,
                bias,
            })
            .collect();
        Self::from_tagged(layers)
    }

    pub(crate) fn from_tagged(layers: Vec<Layer<S>>) -> Result<Self> {
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return invalid(format!(
                    "layer {k}: bias length {} != weight rows {}",
                    layer.bias.len(),
                    layer.fan_out()
                ));
            }
            if layer.weight.is_empty() {
                return invalid(format!("layer {k} is empty"));
            }
            if k > 0 && layers[k - 1].fan_out() != layer.fan_in() {
                return invalid(format!(
                    "layer {k}: fan-in {} != previous fan-out {}",
                    layer.fan_in(),
                    layers[k - 1].fan_out()
                ));
            }
            let finite = layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .all(|v| v.is_finite());
            if !finite {
                return invalid(format!("layer {k} contains non-finite values"));
            }
        }
        let count = layers.iter().map(Layer::len).sum();
        Ok(Self { layers, count })
    }

    /// Random initialization: `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let layers = dims
            .iter()
            .map(|&(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    S::sample_uniform(&mut rng, -bound, bound)
                });
                let bias = Array1::from_shape_simple_fn(fan_out, || {
                    S::sample_uniform(&mut rng, -bound, bound)
                });
                (weight, bias)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    index: l.index,
                    prunable: l.prunable,
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            count: self.count,
        }
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    /// Total parameter count `m`, weights and biases included.
    pub fn param_count(&self) -> usize {
        self.count
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// `(out, in)` shape of every weight matrix.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.dim()).collect()
    }

    /// All values, layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.count);
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`] against this set's structure.
    pub fn with_flat(&self, values: &[S]) -> Result<Self> {
        if values.len() != self.count {
            return invalid(format!(
                "expected {} values, got {}",
                self.count,
                values.len()
            ));
        }
        let mut out = self.clone();
        let mut it = values.iter().copied();
        for l in &mut out.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Self::from_tagged(out.layers)
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.dim() == b.weight.dim()
                    && a.bias.len() == b.bias.len()
                    && a.prunable == b.prunable
            })
    }

    pub(crate) fn ensure_same_structure(&self, other: &Self) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            invalid(format!(
                "structural mismatch: {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            ))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Squared ℓ2 norm over every parameter.
    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum()
    }

    /// Converts to another scalar width.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    index: l.index,
                    prunable: l.prunable,
                    weight: l.weight.mapv(|v| T::from_f64_lossy(v.to_f64_lossy())),
                    bias: l.bias.mapv(|v| T::from_f64_lossy(v.to_f64_lossy())),
                })
                .collect(),
            count: self.count,
        }
    }
}

/// Network outputs (logits) for an ordered set of samples, `s × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMatrix<S>(pub Array2<S>);

impl<S: Scalar> OutputMatrix<S> {
    pub fn samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.0.view()
    }
}

fn check_batch<S: Scalar>(params: &ParamSet<S>, batch: &ArrayView2<'_, S>) -> Result<()> {
    if batch.ncols() != params.input_dim() {
        return invalid(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            params.input_dim()
        ));
    }
    Ok(())
}

fn affine<S: Scalar>(x: &ArrayView2<'_, S>, layer: &Layer<S>) -> Array2<S> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

fn relu_inplace<S: Scalar>(z: &mut Array2<S>) {
    z.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
}

/// Logits for every row of `batch`.
pub fn forward<S: Scalar>(
    params: &ParamSet<S>,
    batch: ArrayView2<'_, S>,
) -> Result<OutputMatrix<S>> {
    check_batch(params, &batch)?;
    Ok(OutputMatrix(forward_unchecked(params, batch)))
}

fn forward_unchecked<S: Scalar>(params: &ParamSet<S>, batch: ArrayView2<'_, S>) -> Array2<S> {
    let last = params.layers.len() - 1;
    let mut a = affine(&batch, &params.layers[0]);
    if last > 0 {
        relu_inplace(&mut a);
    }
    for (k, layer) in params.layers.iter().enumerate().skip(1) {
        a = affine(&a.view(), layer);
        if k < last {
            relu_inplace(&mut a);
        }
    }
    a
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad<S: Scalar>(
    params: &ParamSet<S>,
    batch: ArrayView2<'_, S>,
    labels: &[usize],
) -> Result<(S, ParamSet<S>)> {
    check_batch(params, &batch)?;
    let n = batch.nrows();
    if n == 0 {
        return invalid("empty batch");
    }
    if labels.len() != n {
        return invalid(format!("{} labels for {} rows", labels.len(), n));
    }
    let classes = params.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return invalid(format!("label {bad} outside [0, {classes})"));
    }

    let last = params.layers.len() - 1;
    // acts[k] is the input to layer k; hidden pre-activations are recovered
    // from acts[k + 1] > 0, which matches the ReLU derivative taken as 0 at 0.
    let mut acts: Vec<Array2<S>> = Vec::with_capacity(params.layers.len());
    acts.push(batch.to_owned());
    for (k, layer) in params.layers.iter().enumerate() {
        let mut z = affine(&acts[k].view(), layer);
        if k < last {
            relu_inplace(&mut z);
        }
        acts.push(z);
    }
    let logits = acts.pop().expect("output layer");

    let inv_n = S::one() / S::from_usize(n).unwrap();
    let mut loss = S::zero();
    let mut delta = logits;
    for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(labels) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: S = row.iter().copied().sum();
        let log_total = total.ln();
        // -log softmax_y = log Σ exp(z - max) - (z_y - max)
        loss += log_total - row[y].ln();
        row.mapv_inplace(|v| v / total);
        row[y] -= S::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    loss *= inv_n;

    let mut grads = params.zeros_like();
    for k in (0..=last).rev() {
        let g = &mut grads.layers[k];
        g.weight = delta.t().dot(&acts[k]);
        g.bias = delta.sum_axis(Axis(0));
        if k > 0 {
            let mut upstream = delta.dot(&params.layers[k].weight);
            Zip::from(&mut upstream).and(&acts[k]).for_each(|d, &a| {
                if a <= S::zero() {
                    *d = S::zero();
                }
            });
            delta = upstream;
        }
    }
    Ok((loss, grads))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(row: impl IntoIterator<Item = S>) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (i, v) in row.into_iter().enumerate() {
        if i == 0 || v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Number of rows whose argmax logit differs from the label.
pub fn count_errors<S: Scalar>(
    params: &ParamSet<S>,
    features: ArrayView2<'_, S>,
    labels: &[usize],
) -> Result<usize> {
    check_batch(params, &features)?;
    if labels.len() != features.nrows() {
        return invalid(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        ));
    }
    let mut wrong = 0;
    for (chunk, ys) in features
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .zip(labels.chunks(EVAL_CHUNK))
    {
        let logits = forward_unchecked(params, chunk);
        wrong += logits
            .axis_iter(Axis(0))
            .zip(ys)
            .filter(|(row, &y)| argmax(row.iter().copied()) != y)
            .count();
    }
    Ok(wrong)
}

/// Fraction of misclassified rows.
pub fn classification_error<S: Scalar>(
    params: &ParamSet<S>,
    features: ArrayView2<'_, S>,
    labels: &[usize],
) -> Result<f64> {
    if features.nrows() == 0 {
        return invalid("cannot score an empty split");
    }
    let wrong = count_errors(params, features, labels)?;
    Ok(wrong as f64 / features.nrows() as f64)
}

/// Point `t·a + (1 − t)·b` on the segment between two parameter sets.
pub fn interpolate<S: Scalar>(a: &ParamSet<S>, b: &ParamSet<S>, t: f64) -> Result<ParamSet<S>> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("interpolation weight {t} outside [0, 1]"));
    }
    blend(a, b, t, 1.0 - t)
}

/// `wa·a + wb·b`; returns `a` or `b` unchanged when the other weight is 0
/// and its own weight is 1, or when `a == b` and the weights sum to 1.
pub fn blend<S: Scalar>(a: &ParamSet<S>, b: &ParamSet<S>, wa: f64, wb: f64) -> Result<ParamSet<S>> {
    a.ensure_same_structure(b)?;
    if (wa == 1.0 && wb == 0.0) || (wa + wb == 1.0 && a == b) {
        return Ok(a.clone());
    }
    if wa == 0.0 && wb == 1.0 {
        return Ok(b.clone());
    }
    let ta = S::from_f64_lossy(wa);
    let tb = S::from_f64_lossy(wb);
    let mut out = a.clone();
    for (o, lb) in out.layers.iter_mut().zip(&b.layers) {
        Zip::from(&mut o.weight)
            .and(&lb.weight)
            .for_each(|x, &y| *x = ta * *x + tb * y);
        Zip::from(&mut o.bias)
            .and(&lb.bias)
            .for_each(|x, &y| *x = ta * *x + tb * y);
    }
    if !out.all_finite() {
        return Err(Error::InvalidArgument(
            "interpolation produced non-finite values".into(),
        ));
    }
    Ok(out)
}

/// Total parameter count `m`.
pub fn param_count<S: Scalar>(params: &ParamSet<S>) -> usize {
    params.param_count()
}
