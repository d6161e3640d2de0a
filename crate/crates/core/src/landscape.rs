//! Global loss-landscape metrics between two trained weights: linear mode
//! connectivity (training-error barrier along the segment) and CKA
//! similarity of their outputs.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::nn::{blend, classification_error, forward, OutputMatrix, ParamSet};
use crate::optimize::{proportional_milestones, train, SgdConfig, TrainSpec};
use crate::prune::Mask;
use crate::scalar::Scalar;

/// Default number of points on the interpolation grid, endpoints included.
pub const DEFAULT_GRID_POINTS: usize = 11;

/// Learning-rate schedule for twin retraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainSchedule {
    /// Constant at the dense schedule's final rate.
    #[default]
    Final,
    /// The dense step schedule, compressed to the retraining epochs.
    Full,
}

/// How two copies of a pruned model are retrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSpec {
    /// Retraining epochs α.
    pub retrain_epochs: usize,
    /// SGD noise seeds ξ¹, ξ².
    pub seeds: (u64, u64),
    /// Everything else about retraining; `epochs` and `seed` are overridden.
    pub template: TrainSpec,
}

impl TwinSpec {
    /// Retrains at the dense schedule's final-phase learning rate, constant,
    /// with the dense batch size and no SAM.
    pub fn from_dense(dense: &TrainSpec, retrain_epochs: usize, seeds: (u64, u64)) -> Self {
        Self::with_schedule(dense, retrain_epochs, seeds, RetrainSchedule::Final)
    }

    pub fn with_schedule(
        dense: &TrainSpec,
        retrain_epochs: usize,
        seeds: (u64, u64),
        schedule: RetrainSchedule,
    ) -> Self {
        let sgd = match schedule {
            RetrainSchedule::Final => SgdConfig {
                lr0: dense.sgd.final_lr(),
                lr_decay_epochs: Vec::new(),
                ..dense.sgd.clone()
            },
            RetrainSchedule::Full => SgdConfig {
                lr_decay_epochs: proportional_milestones(retrain_epochs),
                ..dense.sgd.clone()
            },
        };
        Self {
            retrain_epochs,
            seeds,
            template: TrainSpec {
                epochs: retrain_epochs,
                batch_size: dense.batch_size,
                sgd,
                sam: None,
                seed: seeds.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.0 == self.seeds.1 {
            return invalid("twin seeds must differ");
        }
        if self.retrain_epochs == 0 {
            return invalid("retrain epochs must be positive");
        }
        Ok(())
    }

    /// Training spec of twin `i` (0 or 1).
    pub fn twin_spec(&self, i: usize) -> TrainSpec {
        TrainSpec {
            epochs: self.retrain_epochs,
            seed: if i == 0 { self.seeds.0 } else { self.seeds.1 },
            ..self.template.clone()
        }
    }
}

/// Retrains two masked copies of `pruned` that differ only in SGD noise.
pub fn retrain_twins<S: Scalar>(
    pruned: &ParamSet<S>,
    mask: &Mask,
    spec: &TwinSpec,
    data: &Split<S>,
) -> Result<(ParamSet<S>, ParamSet<S>)> {
    spec.validate()?;
    mask.ensure_matches(pruned)?;
    let run = |i: usize| {
        train(pruned, Some(mask), &spec.twin_spec(i), data)
            .map(|(p, _)| p)
            .map_err(|e| Error::Twin {
                twin: i,
                source: Box::new(e),
            })
    };
    let (a, b) = rayon::join(|| run(0), || run(1));
    Ok((a?, b?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmcResult {
    pub value: f64,
    pub t_star: f64,
    /// `(t, error_train(γ(t)))` over the grid, `t` ascending.
    pub grid_errors: Vec<(f64, f64)>,
    /// `(error_train(Θ), error_train(Θ′))`, i.e. `t = 1` and `t = 0`.
    pub endpoint_errors: (f64, f64),
}

impl LmcResult {
    pub fn endpoint_mean(&self) -> f64 {
        0.5 * (self.endpoint_errors.0 + self.endpoint_errors.1)
    }

    /// Recomputes `(value, t_star)` from the stored errors.
    pub fn recompute(&self) -> (f64, f64) {
        select_barrier(self.endpoint_mean(), &self.grid_errors)
    }
}

/// First grid point maximizing `|mean − e(t)|`. Between equal magnitudes of
/// opposite sign the barrier wins, so the value is swap-symmetric.
fn select_barrier(mean: f64, grid: &[(f64, f64)]) -> (f64, f64) {
    let mut best = (0.0, grid[0].0);
    let mut best_gap = -1.0;
    for &(t, e) in grid {
        let value = mean - e;
        let gap = value.abs();
        if gap > best_gap || (gap == best_gap && value < best.0) {
            best_gap = gap;
            best = (value, t);
        }
    }
    best
}

/// Linear mode connectivity under an arbitrary error functional.
///
/// The path is `γ(t) = t·a + (1 − t)·b` on `grid_points` uniform values of
/// `t` in `[0, 1]`. A barrier between the endpoints yields a negative value.
pub fn lmc_with<S, F>(
    a: &ParamSet<S>,
    b: &ParamSet<S>,
    grid_points: usize,
    error: F,
) -> Result<LmcResult>
where
    S: Scalar,
    F: Fn(&ParamSet<S>) -> Result<f64> + Sync,
{
    a.ensure_same_structure(b)?;
    if grid_points < 2 {
        return invalid("the LMC grid needs at least its two endpoints");
    }
    let last = grid_points - 1;
    // Both weights come from integer ratios, so swapping a and b visits the
    // bitwise-same points and nested grids share theirs.
    let grid_errors: Vec<(f64, f64)> = (0..grid_points)
        .into_par_iter()
        .map(|i| {
            let wa = i as f64 / last as f64;
            let wb = (last - i) as f64 / last as f64;
            let point = blend(a, b, wa, wb)?;
            Ok((wa, error(&point)?))
        })
        .collect::<Result<_>>()?;
    let endpoint_errors = (grid_errors[last].1, grid_errors[0].1);
    let mean = 0.5 * (endpoint_errors.0 + endpoint_errors.1);
    let (value, t_star) = select_barrier(mean, &grid_errors);
    Ok(LmcResult {
        value,
        t_star,
        grid_errors,
        endpoint_errors,
    })
}

/// Linear mode connectivity measured by training error on `train`.
pub fn lmc<S: Scalar>(
    a: &ParamSet<S>,
    b: &ParamSet<S>,
    train: &Dataset<S>,
    grid_points: usize,
) -> Result<LmcResult> {
    lmc_with(a, b, grid_points, |p| {
        classification_error(p, train.features(), train.labels())
    })
}

/// Fixed inputs shared by both models in a CKA measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<S> {
    pub features: Array2<S>,
    pub id: String,
}

impl<S: Scalar> SampleSet<S> {
    /// First `min(6400, n)` rows of a seeded permutation of `train`.
    pub fn from_train(train: &Dataset<S>, seed: u64) -> Self {
        let features = train.cka_samples(seed);
        let id = format!("{}:perm{}:{}", train.name(), seed, features.nrows());
        Self { features, id }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaResult {
    pub value: f64,
    pub sample_count: usize,
    pub sample_set: String,
}

/// Column-centered copy in `f64`.
fn centered(x: ArrayView2<'_, impl Scalar>) -> Array2<f64> {
    let mut c = x.mapv(|v| v.to_f64_lossy());
    let mean = c.mean_axis(Axis(0)).expect("non-empty");
    c -= &mean;
    c
}

/// `tr(XXᵀ H YYᵀ H)` for already centered `X`, `Y`, i.e. `‖XᵀY‖²_F`.
fn centered_alignment(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let cross = x.t().dot(y);
    cross.iter().map(|v| v * v).sum()
}

/// CKA between two output matrices over the same samples.
///
/// The `(s − 1)⁻²` normalization of each covariance cancels in the ratio.
pub fn cka_outputs<S: Scalar>(f: ArrayView2<'_, S>, g: ArrayView2<'_, S>) -> Result<f64> {
    if f.nrows() != g.nrows() {
        return invalid(format!(
            "output matrices cover {} and {} samples",
            f.nrows(),
            g.nrows()
        ));
    }
    if f.nrows() < 2 {
        return invalid("CKA needs at least two samples");
    }
    let x = centered(f);
    let y = centered(g);
    let kxx = centered_alignment(&x, &x);
    let kyy = centered_alignment(&y, &y);
    if kxx == 0.0 || kyy == 0.0 {
        return Err(Error::DegenerateOutput(
            "outputs are constant over the sample set".into(),
        ));
    }
    if f == g {
        return Ok(1.0);
    }
    let kxy = centered_alignment(&x, &y);
    Ok(kxy / (kxx.sqrt() * kyy.sqrt()))
}

/// CKA similarity of two networks' logits on `samples`.
pub fn cka<S: Scalar>(
    a: &ParamSet<S>,
    b: &ParamSet<S>,
    samples: &SampleSet<S>,
) -> Result<CkaResult> {
    a.ensure_same_structure(b)?;
    let fa: OutputMatrix<S> = forward(a, samples.features.view())?;
    let fb = forward(b, samples.features.view())?;
    Ok(CkaResult {
        value: cka_outputs(fa.view(), fb.view())?,
        sample_count: samples.len(),
        sample_set: samples.id.clone(),
    })
}

/// Everything measured on one pruned model and its retrained twins.
#[derive(Debug, Clone)]
pub struct PrunedProbe<S> {
    pub mask: Mask,
    pub twins: (ParamSet<S>, ParamSet<S>),
    pub lmc: LmcResult,
    pub cka: CkaResult,
    /// Test error of each twin.
    pub twin_test_errors: (f64, f64),
    /// Train error of each twin.
    pub twin_train_errors: (f64, f64),
}

impl<S> PrunedProbe<S> {
    pub fn mean_test_error(&self) -> f64 {
        0.5 * (self.twin_test_errors.0 + self.twin_test_errors.1)
    }
}

/// Prunes `dense`, retrains twins and measures both landscape metrics.
pub fn probe_pruned<S: Scalar>(
    dense: &ParamSet<S>,
    prune: &crate::prune::PruneSpec,
    twins: &TwinSpec,
    data: &Split<S>,
    samples: &SampleSet<S>,
    grid_points: usize,
) -> Result<PrunedProbe<S>> {
    let (mask, _) = crate::prune::prune(dense, prune)?;
    let pruned = crate::prune::apply_mask(dense, &mask)?;
    let (a, b) = retrain_twins(&pruned, &mask, twins, data)?;
    let lmc = lmc(&a, &b, &data.train, grid_points)?;
    let cka = cka(&a, &b, samples)?;
    let err = |p: &ParamSet<S>, d: &Dataset<S>| classification_error(p, d.features(), d.labels());
    let twin_test_errors = (err(&a, &data.test)?, err(&b, &data.test)?);
    let twin_train_errors = (lmc.endpoint_errors.0, lmc.endpoint_errors.1);
    Ok(PrunedProbe {
        mask,
        twins: (a, b),
        lmc,
        cka,
        twin_test_errors,
        twin_train_errors,
    })
}
