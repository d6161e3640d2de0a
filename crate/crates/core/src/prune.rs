//! Unstructured magnitude pruning.
//!
//! Only weight matrices are ever pruned. Biases are always kept, and the
//! output layer is kept unless a [`PruneSpec`] opts it in.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    /// Same density in every included layer.
    Uniform,
    /// One magnitude threshold across all included layers.
    Global,
}

impl std::fmt::Display for PruneStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneStrategy::Uniform => "uniform",
            PruneStrategy::Global => "global",
        })
    }
}

impl std::str::FromStr for PruneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "global" => Ok(Self::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown pruning strategy `{other}` (expected uniform or global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: PruneStrategy,
    /// Fraction of included weights to keep.
    pub target_density: f64,
    #[serde(default = "default_true")]
    pub exclude_output_layer: bool,
}

fn default_true() -> bool {
    true
}

impl PruneSpec {
    pub fn new(strategy: PruneStrategy, target_density: f64) -> Self {
        Self {
            strategy,
            target_density,
            exclude_output_layer: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_density > 0.0 && self.target_density <= 1.0) {
            return invalid(format!(
                "target density {} outside (0, 1]",
                self.target_density
            ));
        }
        Ok(())
    }

    fn includes<S: Scalar>(&self, layer: &crate::nn::Layer<S>) -> bool {
        layer.prunable || !self.exclude_output_layer
    }
}

/// Keep pattern for one weight matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl LayerMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return invalid(format!(
                "mask of {} entries cannot shape {rows}x{cols}",
                keep.len()
            ));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Zeroes dropped entries of a matrix shaped like this mask.
    pub fn zero_dropped<S: Scalar>(&self, m: &mut Array2<S>) {
        debug_assert_eq!(m.dim(), (self.rows, self.cols));
        for (v, &k) in m.iter_mut().zip(&self.keep) {
            if !k {
                *v = S::zero();
            }
        }
    }
}

/// Per-layer keep pattern (𝓜). `None` marks a layer exempt from pruning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<Option<LayerMask>>,
}

impl Mask {
    pub fn new(layers: Vec<Option<LayerMask>>) -> Self {
        Self { layers }
    }

    /// Keeps everything, with the layers `spec` would prune marked as included.
    pub fn dense<S: Scalar>(params: &ParamSet<S>, exclude_output_layer: bool) -> Self {
        let layers = params
            .layers()
            .iter()
            .map(|l| {
                (l.prunable || !exclude_output_layer)
                    .then(|| LayerMask::ones(l.fan_out(), l.fan_in()))
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Option<LayerMask>] {
        &self.layers
    }

    pub fn matches<S: Scalar>(&self, params: &ParamSet<S>) -> bool {
        self.layers.len() == params.layers().len()
            && self
                .layers
                .iter()
                .zip(params.layers())
                .all(|(m, l)| m.as_ref().is_none_or(|m| m.shape() == l.weight.dim()))
    }

    pub(crate) fn ensure_matches<S: Scalar>(&self, params: &ParamSet<S>) -> Result<()> {
        if self.matches(params) {
            Ok(())
        } else {
            invalid(format!(
                "mask does not match parameter shapes {:?}",
                params.shapes()
            ))
        }
    }

    /// Weights subject to pruning.
    pub fn prunable_total(&self) -> usize {
        self.layers.iter().flatten().map(LayerMask::len).sum()
    }

    pub fn kept_prunable(&self) -> usize {
        self.layers.iter().flatten().map(LayerMask::kept).sum()
    }

    /// Kept fraction of the prunable weights.
    pub fn prunable_density(&self) -> f64 {
        self.kept_prunable() as f64 / self.prunable_total().max(1) as f64
    }

    /// Indices of included layers that keep no weight at all.
    pub fn empty_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().filter(|m| m.kept() == 0).map(|_| i))
            .collect()
    }

    /// Zeroes dropped weights in place.
    pub fn apply_inplace<S: Scalar>(&self, params: &mut ParamSet<S>) {
        for (m, l) in self.layers.iter().zip(params.layers_mut()) {
            if let Some(m) = m {
                m.zero_dropped(&mut l.weight);
            }
        }
    }
}

/// Raised by [`global_mp`] when a layer loses every weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneWarning {
    pub layer: usize,
    pub size: usize,
}

/// `⌈density × size⌉`, snapping products within 1e-9 of an integer.
pub fn kept_count(density: f64, size: usize) -> usize {
    let x = density * size as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Orders by magnitude descending, then by position ascending.
fn by_magnitude(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_k(mags: &mut [(f64, usize)], k: usize) -> &[(f64, usize)] {
    if k < mags.len() && k > 0 {
        mags.select_nth_unstable_by(k - 1, |&a, &b| by_magnitude(a, b));
    }
    &mags[..k.min(mags.len())]
}

/// Keeps the `⌈d × size⌉` largest-magnitude weights of each included layer.
pub fn uniform_mp<S: Scalar>(params: &ParamSet<S>, spec: &PruneSpec) -> Result<Mask> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(params.layers().len());
    for layer in params.layers() {
        if !spec.includes(layer) {
            layers.push(None);
            continue;
        }
        let size = layer.weight.len();
        let k = kept_count(spec.target_density, size);
        if k == 0 {
            return Err(Error::DegenerateLayer {
                layer: layer.index,
                size,
                density: spec.target_density,
            });
        }
        let mut mags: Vec<(f64, usize)> = layer
            .weight
            .iter()
            .enumerate()
            .map(|(i, w)| (w.abs().to_f64_lossy(), i))
            .collect();
        let mut keep = vec![false; size];
        for &(_, i) in top_k(&mut mags, k) {
            keep[i] = true;
        }
        let (rows, cols) = layer.weight.dim();
        layers.push(Some(LayerMask { rows, cols, keep }));
    }
    Ok(Mask { layers })
}

/// Keeps the `⌈d × total⌉` largest-magnitude weights across included layers.
pub fn global_mp<S: Scalar>(
    params: &ParamSet<S>,
    spec: &PruneSpec,
) -> Result<(Mask, Vec<PruneWarning>)> {
    spec.validate()?;
    // Flat position across included layers preserves the (layer, index) order.
    let mut offsets = Vec::new();
    let mut mags = Vec::new();
    for layer in params.layers() {
        if spec.includes(layer) {
            offsets.push(Some(mags.len()));
            mags.extend(layer.weight.iter().map(|w| w.abs().to_f64_lossy()));
        } else {
            offsets.push(None);
        }
    }
    let total = mags.len();
    if total == 0 {
        return invalid("no layer is eligible for pruning");
    }
    let k = kept_count(spec.target_density, total);
    let mut ranked: Vec<(f64, usize)> = mags.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
    let mut keep_flat = vec![false; total];
    for &(_, i) in top_k(&mut ranked, k) {
        keep_flat[i] = true;
    }

    let mut layers = Vec::with_capacity(offsets.len());
    let mut warnings = Vec::new();
    for (layer, off) in params.layers().iter().zip(offsets) {
        let Some(off) = off else {
            layers.push(None);
            continue;
        };
        let size = layer.weight.len();
        let keep = keep_flat[off..off + size].to_vec();
        if !keep.iter().any(|&k| k) {
            log::warn!(
                "global pruning removed every weight of layer {}",
                layer.index
            );
            warnings.push(PruneWarning {
                layer: layer.index,
                size,
            });
        }
        let (rows, cols) = layer.weight.dim();
        layers.push(Some(LayerMask { rows, cols, keep }));
    }
    Ok((Mask { layers }, warnings))
}

/// Dispatches on `spec.strategy`.
pub fn prune<S: Scalar>(
    params: &ParamSet<S>,
    spec: &PruneSpec,
) -> Result<(Mask, Vec<PruneWarning>)> {
    match spec.strategy {
        PruneStrategy::Uniform => uniform_mp(params, spec).map(|m| (m, Vec::new())),
        PruneStrategy::Global => global_mp(params, spec),
    }
}

/// Fraction of all `m` parameters kept: kept prunable weights plus every
/// exempt parameter.
pub fn density<S: Scalar>(mask: &Mask, params: &ParamSet<S>) -> Result<f64> {
    mask.ensure_matches(params)?;
    let dropped = mask.prunable_total() - mask.kept_prunable();
    let m = params.param_count();
    Ok((m - dropped) as f64 / m as f64)
}

/// `Θ ⊙ 𝓜`.
pub fn apply_mask<S: Scalar>(params: &ParamSet<S>, mask: &Mask) -> Result<ParamSet<S>> {
    mask.ensure_matches(params)?;
    let mut out = params.clone();
    mask.apply_inplace(&mut out);
    Ok(out)
}
