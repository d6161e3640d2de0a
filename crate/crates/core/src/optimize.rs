//! SGD with momentum and weight decay, the SAM two-step wrapper, and the
//! mask-respecting training loop.

use std::cmp::Ordering;
use std::time::Instant;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Split};
use crate::error::{invalid, Error, Result};
use crate::nn::{classification_error, loss_and_grad, ParamSet};
use crate::prune::Mask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
}

impl SgdConfig {
    /// lr 0.1, momentum 0.9, weight decay 1e-4, ×0.1 at 50% and 75% of `epochs`.
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: proportional_milestones(epochs),
            lr_decay_factor: 0.1,
        }
    }

    /// Same rates with a constant schedule.
    pub fn constant(lr0: f64) -> Self {
        Self {
            lr0,
            lr_decay_epochs: Vec::new(),
            ..Self::for_epochs(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return invalid(format!("lr0 {} must be finite and non-negative", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return invalid("weight decay must be non-negative");
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return invalid("lr decay factor must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr0 * self.lr_decay_factor.powi(passed as i32)
    }

    /// Rate after every milestone has passed.
    pub fn final_lr(&self) -> f64 {
        self.lr0 * self.lr_decay_factor.powi(self.lr_decay_epochs.len() as i32)
    }

    /// Moves milestones proportionally from a run of `from` epochs to `to`.
    pub fn rescaled(&self, from: usize, to: usize) -> Self {
        let mut out = self.clone();
        if from > 0 {
            out.lr_decay_epochs = self
                .lr_decay_epochs
                .iter()
                .map(|&e| ((e as f64) * to as f64 / from as f64).round() as usize)
                .collect();
        }
        out
    }
}

/// Milestones at 50% and 75% of a run.
pub fn proportional_milestones(epochs: usize) -> Vec<usize> {
    if epochs == 0 {
        return Vec::new();
    }
    vec![
        ((epochs as f64) * 0.5).round() as usize,
        ((epochs as f64) * 0.75).round() as usize,
    ]
}

/// Learning rate at `epoch` under `sgd`.
pub fn lr_at(epoch: usize, sgd: &SgdConfig) -> f64 {
    sgd.lr_at(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    /// Neighborhood radius ρ; 0 reduces to plain SGD.
    pub rho: f64,
}

/// Everything that fixes a training trajectory besides the data, the
/// initial point and the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub sam: Option<SamConfig>,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            sgd: SgdConfig::for_epochs(epochs),
            sam: None,
            seed,
        }
    }

    pub fn with_sgd(mut self, sgd: SgdConfig) -> Self {
        self.sgd = sgd;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.sam = Some(SamConfig { rho });
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn rho(&self) -> f64 {
        self.sam.map_or(0.0, |s| s.rho)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if let Some(sam) = self.sam {
            if !(sam.rho.is_finite() && sam.rho >= 0.0) {
                return invalid(format!("rho {} must be non-negative", sam.rho));
            }
        }
        self.sgd.validate()
    }
}

/// Knob through which training temperature is varied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureKnob {
    Epochs,
    Batch,
    Rho,
}

impl std::fmt::Display for TemperatureKnob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemperatureKnob::Epochs => "epochs",
            TemperatureKnob::Batch => "batch",
            TemperatureKnob::Rho => "rho",
        })
    }
}

impl std::str::FromStr for TemperatureKnob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epochs" => Ok(Self::Epochs),
            "batch" | "batch_size" => Ok(Self::Batch),
            "rho" => Ok(Self::Rho),
            other => invalid(format!("unknown temperature knob `{other}`")),
        }
    }
}

/// Compares the temperature of two specs along `knob`; `Greater` means `a`
/// is hotter. Fewer epochs, smaller batches and larger ρ are hotter.
pub fn temperature_cmp(knob: TemperatureKnob, a: &TrainSpec, b: &TrainSpec) -> Ordering {
    match knob {
        TemperatureKnob::Epochs => b.epochs.cmp(&a.epochs),
        TemperatureKnob::Batch => b.batch_size.cmp(&a.batch_size),
        TemperatureKnob::Rho => a.rho().total_cmp(&b.rho()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_train_error: f64,
    pub final_test_error: f64,
    pub train_curve: Vec<f64>,
    pub test_curve: Vec<f64>,
    pub seconds: f64,
}

fn mask_gradient<S: Scalar>(grads: &mut ParamSet<S>, mask: Option<&Mask>) {
    if let Some(mask) = mask {
        mask.apply_inplace(grads);
    }
}

/// One momentum step: `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`, then masked
/// entries of both `w` and `v` are forced to zero.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    velocity: &mut ParamSet<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: Option<&Mask>,
) {
    let lr = S::from_f64_lossy(lr);
    let mu = S::from_f64_lossy(momentum);
    let wd = S::from_f64_lossy(weight_decay);
    for ((p, g), v) in params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(velocity.layers_mut())
    {
        Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut v.weight)
            .for_each(|w, &g, v| {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            });
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut v.bias)
            .for_each(|w, &g, v| {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            });
    }
    if let Some(mask) = mask {
        mask.apply_inplace(params);
        mask.apply_inplace(velocity);
    }
}

/// Gradient evaluated at the SAM-perturbed point.
#[derive(Debug, Clone)]
pub struct SamGradient<S> {
    /// Loss at the unperturbed parameters.
    pub loss: S,
    pub grad: ParamSet<S>,
    /// `Θ + ρ·g/‖g‖₂`, absent when no perturbation was applied.
    pub perturbed: Option<ParamSet<S>>,
}

/// SAM's first half: ascend by `ρ·g/‖g‖₂` and re-evaluate the gradient there.
///
/// `objective` returns the loss and gradient at a point. Masked gradient
/// entries are zeroed before the norm is taken. With `ρ = 0` or a zero
/// gradient the unperturbed gradient is returned.
pub fn sam_gradient<S, F>(
    params: &ParamSet<S>,
    rho: f64,
    mask: Option<&Mask>,
    mut objective: F,
) -> Result<SamGradient<S>>
where
    S: Scalar,
    F: FnMut(&ParamSet<S>) -> Result<(S, ParamSet<S>)>,
{
    if !(rho.is_finite() && rho >= 0.0) {
        return invalid(format!("rho {rho} must be non-negative"));
    }
    let (loss, mut grad) = objective(params)?;
    mask_gradient(&mut grad, mask);
    if rho == 0.0 {
        return Ok(SamGradient {
            loss,
            grad,
            perturbed: None,
        });
    }
    let norm = grad.norm_sq().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Ok(SamGradient {
            loss,
            grad,
            perturbed: None,
        });
    }
    let scale = S::from_f64_lossy(rho / norm);
    let mut perturbed = params.clone();
    for (p, g) in perturbed.layers_mut().iter_mut().zip(grad.layers()) {
        p.weight.scaled_add(scale, &g.weight);
        p.bias.scaled_add(scale, &g.bias);
    }
    let (_, mut sharp) = objective(&perturbed)?;
    mask_gradient(&mut sharp, mask);
    Ok(SamGradient {
        loss,
        grad: sharp,
        perturbed: Some(perturbed),
    })
}

/// Full SAM update on one batch; returns the unperturbed loss.
#[allow(clippy::too_many_arguments)]
pub fn sam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    batch: ndarray::ArrayView2<'_, S>,
    labels: &[usize],
    rho: f64,
    velocity: &mut ParamSet<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: Option<&Mask>,
) -> Result<S> {
    let step = sam_gradient(params, rho, mask, |p| loss_and_grad(p, batch, labels))?;
    sgd_step(
        params,
        &step.grad,
        velocity,
        lr,
        momentum,
        weight_decay,
        mask,
    );
    Ok(step.loss)
}

/// Trains from `init` and reports per-epoch errors.
pub fn train<S: Scalar>(
    init: &ParamSet<S>,
    mask: Option<&Mask>,
    spec: &TrainSpec,
    data: &Split<S>,
) -> Result<(ParamSet<S>, TrainReport)> {
    train_with_observer(init, mask, spec, data, |_, _| {})
}

/// [`train`], calling `observe(epoch, params)` after every epoch.
pub fn train_with_observer<S, F>(
    init: &ParamSet<S>,
    mask: Option<&Mask>,
    spec: &TrainSpec,
    data: &Split<S>,
    mut observe: F,
) -> Result<(ParamSet<S>, TrainReport)>
where
    S: Scalar,
    F: FnMut(usize, &ParamSet<S>),
{
    spec.validate()?;
    if let Some(mask) = mask {
        mask.ensure_matches(init)?;
    }
    let train_set = &data.train;
    if train_set.dim() != init.input_dim() {
        return invalid(format!(
            "dataset has {} features, network expects {}",
            train_set.dim(),
            init.input_dim()
        ));
    }
    let started = Instant::now();
    let mut params = init.clone();
    if let Some(mask) = mask {
        mask.apply_inplace(&mut params);
    }
    let mut velocity = params.zeros_like();
    let mut stream = BatchStream::new(train_set.len(), spec.batch_size, spec.seed)?;
    let rho = spec.rho();
    let mut train_curve = Vec::with_capacity(spec.epochs);
    let mut test_curve = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        let lr = spec.sgd.lr_at(epoch);
        let order = stream.next_epoch();
        for (step, idx) in order.batches().enumerate() {
            let (x, y) = train_set.gather(idx);
            let loss = sam_step(
                &mut params,
                x.view(),
                &y,
                rho,
                &mut velocity,
                lr,
                spec.sgd.momentum,
                spec.sgd.weight_decay,
                mask,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
        }
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step: order.num_batches(),
            });
        }
        train_curve.push(classification_error(
            &params,
            train_set.features(),
            train_set.labels(),
        )?);
        test_curve.push(classification_error(
            &params,
            data.test.features(),
            data.test.labels(),
        )?);
        observe(epoch, &params);
    }

    let report = TrainReport {
        final_train_error: *train_curve.last().expect("epochs > 0"),
        final_test_error: *test_curve.last().expect("epochs > 0"),
        train_curve,
        test_curve,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;
    use crate::nn::ModelConfig;
    use crate::prune::{uniform_mp, PruneSpec, PruneStrategy};
    use ndarray::array;

    fn scalar_net(w: f64) -> ParamSet<f64> {
        ParamSet::from_layers(vec![(array![[w]], array![0.0])]).unwrap()
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let mut p = scalar_net(2.0);
        let g = scalar_net(0.5);
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 1.0, 0.0, 0.0, None);
        assert_eq!(p.layers()[0].weight[[0, 0]], 1.5);
    }

    #[test]
    fn decay_only_step_shrinks_weights() {
        let mut p = scalar_net(2.0);
        let g = p.zeros_like();
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.5, 0.0, 0.1, None);
        assert_eq!(p.layers()[0].weight[[0, 0]], 2.0 * (1.0 - 0.5 * 0.1));
    }

    #[test]
    fn masked_coordinates_stay_zero() {
        let mut p = ParamSet::from_layers(vec![
            (array![[1.0, 0.2]], array![0.0]),
            (array![[1.0]], array![0.0]),
        ])
        .unwrap();
        let mask = uniform_mp(&p, &PruneSpec::new(PruneStrategy::Uniform, 0.5)).unwrap();
        mask.apply_inplace(&mut p);
        let g = p.with_flat(&[3.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let mut v = p.zeros_like();
        for _ in 0..3 {
            sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 1e-4, Some(&mask));
            assert_eq!(p.layers()[0].weight[[0, 1]], 0.0);
            assert_eq!(v.layers()[0].weight[[0, 1]], 0.0);
        }
    }

    #[test]
    fn default_step_schedule() {
        let sgd = SgdConfig {
            lr_decay_epochs: vec![80, 120],
            ..SgdConfig::for_epochs(160)
        };
        assert_eq!(lr_at(10, &sgd), 0.1);
        assert!((lr_at(80, &sgd) - 0.01).abs() < 1e-15);
        assert!((lr_at(130, &sgd) - 0.001).abs() < 1e-15);
        assert_eq!(SgdConfig::for_epochs(160).lr_decay_epochs, vec![80, 120]);
        assert_eq!(
            SgdConfig::for_epochs(160).rescaled(160, 80).lr_decay_epochs,
            vec![40, 60]
        );
    }

    fn quadratic(p: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)> {
        let w = p.layers()[0].weight[[0, 0]];
        let b = p.layers()[0].bias[0];
        Ok((w * w + b * b, p.with_flat(&[2.0 * w, 2.0 * b]).unwrap()))
    }

    #[test]
    fn sam_on_quadratic() {
        let p = scalar_net(1.0);
        let step = sam_gradient(&p, 0.5, None, quadratic).unwrap();
        assert_eq!(step.perturbed.unwrap().layers()[0].weight[[0, 0]], 1.5);
        assert_eq!(step.grad.layers()[0].weight[[0, 0]], 3.0);
        assert_eq!(step.loss, 1.0);
    }

    #[test]
    fn sam_skips_zero_gradient() {
        let p = scalar_net(0.0);
        let step = sam_gradient(&p, 0.5, None, quadratic).unwrap();
        assert!(step.perturbed.is_none());
        assert_eq!(step.grad.norm_sq(), 0.0);
    }

    #[test]
    fn sam_zero_rho_matches_sgd_step() {
        let data = gen_gaussian_blobs::<f32>(2, 20, 2, 0.5, 3).unwrap();
        let p0 = ParamSet::<f32>::init(&ModelConfig::new(2, 2).with_base_width(8), 5).unwrap();
        let (x, y) = (data.features(), data.labels());
        let mut a = p0.clone();
        let mut va = a.zeros_like();
        sam_step(&mut a, x, y, 0.0, &mut va, 0.1, 0.9, 1e-4, None).unwrap();
        let mut b = p0.clone();
        let mut vb = b.zeros_like();
        let (_, g) = loss_and_grad(&b, x, y).unwrap();
        sgd_step(&mut b, &g, &mut vb, 0.1, 0.9, 1e-4, None);
        assert_eq!(a, b);
        assert_eq!(va, vb);
    }

    #[test]
    fn zero_lr_single_step_returns_masked_init() {
        let data = gen_gaussian_blobs::<f32>(2, 4, 2, 0.5, 3)
            .unwrap()
            .split(0)
            .unwrap();
        let p0 = ParamSet::<f32>::init(&ModelConfig::new(2, 2).with_base_width(8), 5).unwrap();
        let mask = uniform_mp(&p0, &PruneSpec::new(PruneStrategy::Uniform, 0.5)).unwrap();
        let mut spec = TrainSpec::new(1, 64, 0).with_sgd(SgdConfig::constant(0.0));
        spec.sgd.weight_decay = 0.0;
        let (out, report) = train(&p0, Some(&mask), &spec, &data).unwrap();
        assert_eq!(out, crate::prune::apply_mask(&p0, &mask).unwrap());
        assert_eq!(report.train_curve.len(), 1);
    }

    #[test]
    fn divergence_is_reported() {
        let data = gen_gaussian_blobs::<f32>(2, 50, 2, 0.5, 3)
            .unwrap()
            .split(0)
            .unwrap();
        let mut p0 = ParamSet::<f32>::init(&ModelConfig::new(2, 2).with_base_width(8), 5).unwrap();
        for l in p0.layers_mut() {
            l.weight.fill(1e18);
        }
        let spec = TrainSpec::new(2, 16, 0).with_sgd(SgdConfig::constant(1e6));
        assert!(matches!(
            train(&p0, None, &spec, &data),
            Err(Error::Diverged { epoch: 0, .. })
        ));
    }

    #[test]
    fn temperature_ordering() {
        let base = TrainSpec::new(80, 128, 0);
        let fewer = TrainSpec::new(40, 128, 0);
        let smaller = TrainSpec::new(80, 64, 0);
        let sharper = base.clone().with_rho(0.2);
        assert_eq!(
            temperature_cmp(TemperatureKnob::Epochs, &fewer, &base),
            Ordering::Greater
        );
        assert_eq!(
            temperature_cmp(TemperatureKnob::Batch, &smaller, &base),
            Ordering::Greater
        );
        assert_eq!(
            temperature_cmp(TemperatureKnob::Rho, &sharper, &base),
            Ordering::Greater
        );
        assert_eq!(
            temperature_cmp(TemperatureKnob::Epochs, &base, &base),
            Ordering::Equal
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(TrainSpec::new(0, 1, 0).validate().is_err());
        assert!(TrainSpec::new(1, 0, 0).validate().is_err());
        assert!(TrainSpec::new(1, 1, 0).with_rho(-1.0).validate().is_err());
        let mut s = TrainSpec::new(1, 1, 0);
        s.sgd.momentum = 1.0;
        assert!(s.validate().is_err());
    }
}
