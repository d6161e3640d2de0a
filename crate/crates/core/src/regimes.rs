//! Regime classification and the decisions it drives: temperature tuning,
//! model selection for pruning, and SAM neighborhood-size selection.
//!
//! Each decision procedure talks to the train/prune/measure pipeline through
//! a small probe trait, so the branching logic can be exercised against
//! fixed measurements as well as real training runs.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{invalid, Error, Result};
use crate::landscape::{probe_pruned, PrunedProbe, RetrainSchedule, SampleSet, TwinSpec};
use crate::nn::ParamSet;
use crate::optimize::{train, TemperatureKnob, TrainSpec};
use crate::prune::PruneSpec;
use crate::scalar::Scalar;

/// LMC values above this are rejected as measurement errors.
pub const LMC_POSITIVE_SLACK: f64 = 0.01;

/// Multiplicative temperature step, one factor per knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStep {
    pub epochs_factor: f64,
    pub batch_factor: f64,
    pub rho_factor: f64,
    /// ρ used when raising from ρ = 0.
    pub rho_start: f64,
}

impl Default for TemperatureStep {
    fn default() -> Self {
        Self {
            epochs_factor: 0.5,
            batch_factor: 0.5,
            rho_factor: 2.0,
            rho_start: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// LMC threshold ε separating regime I from regime II.
    pub epsilon: f64,
    pub delta_t: TemperatureStep,
    /// Retraining epochs α for probes.
    pub alpha: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            epsilon: -0.05,
            delta_t: TemperatureStep::default(),
            alpha: 2,
        }
    }
}

impl Thresholds {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon < 0.0) {
            return invalid(format!("epsilon {} must be negative", self.epsilon));
        }
        if self.alpha == 0 {
            return invalid("alpha must be at least 1");
        }
        let d = &self.delta_t;
        if !(d.epochs_factor > 0.0 && d.epochs_factor < 1.0)
            || !(d.batch_factor > 0.0 && d.batch_factor < 1.0)
            || !(d.rho_factor > 1.0)
            || !(d.rho_start > 0.0)
        {
            return invalid("temperature step factors must move each knob strictly");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Poorly connected landscape.
    I,
    /// Well connected, dissimilar outputs.
    #[serde(rename = "II-A")]
    IIA,
    /// Well connected, similar outputs.
    #[serde(rename = "II-B")]
    IIB,
    /// Well connected; no CKA reference to split II-A from II-B.
    II,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::I => "I",
            Regime::IIA => "II-A",
            Regime::IIB => "II-B",
            Regime::II => "II",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(Regime::I),
            "II-A" => Ok(Regime::IIA),
            "II-B" => Ok(Regime::IIB),
            "II" => Ok(Regime::II),
            other => invalid(format!("unknown regime `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeLabel {
    pub regime: Regime,
    pub lmc: f64,
    pub cka: f64,
}

impl RegimeLabel {
    pub fn sub_label_determined(&self) -> bool {
        self.regime != Regime::II
    }
}

/// Places a pruned model in the three-regime taxonomy.
pub fn classify_regime(
    lmc_value: f64,
    cka_value: f64,
    thresholds: &Thresholds,
    cka_reference: Option<f64>,
) -> Result<RegimeLabel> {
    if lmc_value.is_nan() {
        return Err(Error::SuspiciousInput("LMC is NaN".into()));
    }
    if lmc_value > LMC_POSITIVE_SLACK {
        return Err(Error::SuspiciousInput(format!(
            "LMC {lmc_value} is above {LMC_POSITIVE_SLACK}; linear connectivity should be <= 0"
        )));
    }
    let regime = if lmc_value < thresholds.epsilon {
        Regime::I
    } else {
        match cka_reference {
            Some(reference) if cka_value >= reference => Regime::IIB,
            Some(_) => Regime::IIA,
            None => Regime::II,
        }
    };
    Ok(RegimeLabel {
        regime,
        lmc: lmc_value,
        cka: cka_value,
    })
}

/// Moves exactly one knob one step hotter.
pub fn raise_temperature(
    spec: &TrainSpec,
    knob: TemperatureKnob,
    step: &TemperatureStep,
) -> Result<TrainSpec> {
    let mut out = spec.clone();
    match knob {
        TemperatureKnob::Epochs => {
            let e = ((spec.epochs as f64) * step.epochs_factor).round() as usize;
            let e = e.min(spec.epochs - 1);
            if e == 0 {
                return invalid("cannot train for fewer than one epoch");
            }
            out.sgd = spec.sgd.rescaled(spec.epochs, e);
            out.epochs = e;
        }
        TemperatureKnob::Batch => {
            let b = ((spec.batch_size as f64) * step.batch_factor).floor() as usize;
            let b = b.min(spec.batch_size - 1);
            if b == 0 {
                return invalid("batch size cannot shrink below one");
            }
            out.batch_size = b;
        }
        TemperatureKnob::Rho => {
            let rho = spec.rho();
            out = out.with_rho(if rho == 0.0 {
                step.rho_start
            } else {
                rho * step.rho_factor
            });
        }
    }
    Ok(out)
}

/// Moves exactly one knob one step colder (inverse of [`raise_temperature`]).
pub fn lower_temperature(
    spec: &TrainSpec,
    knob: TemperatureKnob,
    step: &TemperatureStep,
) -> Result<TrainSpec> {
    let mut out = spec.clone();
    match knob {
        TemperatureKnob::Epochs => {
            let e = ((spec.epochs as f64) / step.epochs_factor).round() as usize;
            let e = e.max(spec.epochs + 1);
            out.sgd = spec.sgd.rescaled(spec.epochs, e);
            out.epochs = e;
        }
        TemperatureKnob::Batch => {
            let b = ((spec.batch_size as f64) / step.batch_factor).round() as usize;
            out.batch_size = b.max(spec.batch_size + 1);
        }
        TemperatureKnob::Rho => {
            let rho = spec.rho();
            if rho == 0.0 {
                return invalid("rho is already zero");
            }
            let lowered = rho / step.rho_factor;
            out = out.with_rho(if lowered < step.rho_start {
                0.0
            } else {
                lowered
            });
        }
    }
    Ok(out)
}

/// Source of pruned-model LMC for a dense training spec.
pub trait LmcProbe {
    /// Trains dense at `spec`, prunes, retrains twins and returns their LMC.
    fn pruned_lmc(&mut self, spec: &TrainSpec) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureTuning {
    pub initial: TrainSpec,
    pub tuned: TrainSpec,
    pub knob: TemperatureKnob,
    pub lmc: f64,
    pub regime_i: bool,
}

/// One-step temperature tuning: raise the temperature by ΔT iff the pruned
/// model's LMC is below ε, otherwise keep `t0`.
///
/// With `lower_in_regime_ii` the else-branch lowers the temperature one step
/// instead of keeping it.
pub fn tune_temperature<P: LmcProbe>(
    probe: &mut P,
    t0: &TrainSpec,
    knob: TemperatureKnob,
    thresholds: &Thresholds,
    lower_in_regime_ii: bool,
) -> Result<TemperatureTuning> {
    thresholds.validate()?;
    t0.validate()?;
    let lmc = probe.pruned_lmc(t0)?;
    let regime_i = lmc < thresholds.epsilon;
    let tuned = if regime_i {
        raise_temperature(t0, knob, &thresholds.delta_t)?
    } else if lower_in_regime_ii {
        lower_temperature(t0, knob, &thresholds.delta_t)?
    } else {
        t0.clone()
    };
    Ok(TemperatureTuning {
        initial: t0.clone(),
        tuned,
        knob,
        lmc,
        regime_i,
    })
}

/// [`LmcProbe`] backed by real training on a dataset.
pub struct PipelineLmcProbe<'a, S> {
    pub dense_init: &'a ParamSet<S>,
    pub target: &'a PruneSpec,
    pub data: &'a Split<S>,
    pub twin_seeds: (u64, u64),
    pub alpha: usize,
    pub schedule: RetrainSchedule,
    pub grid_points: usize,
    pub sample_seed: u64,
    /// Last full measurement, kept for reporting.
    pub last: Option<PrunedProbe<S>>,
}

impl<S: Scalar> LmcProbe for PipelineLmcProbe<'_, S> {
    fn pruned_lmc(&mut self, spec: &TrainSpec) -> Result<f64> {
        let (dense, _) = train(self.dense_init, None, spec, self.data)?;
        let twins = TwinSpec::with_schedule(spec, self.alpha, self.twin_seeds, self.schedule);
        let samples = SampleSet::from_train(&self.data.train, self.sample_seed);
        let probe = probe_pruned(
            &dense,
            self.target,
            &twins,
            self.data,
            &samples,
            self.grid_points,
        )?;
        let value = probe.lmc.value;
        self.last = Some(probe);
        Ok(value)
    }
}

/// A trained dense model offered for pruning.
#[derive(Debug, Clone)]
pub struct Candidate<S> {
    pub params: ParamSet<S>,
    pub spec: TrainSpec,
    pub dense_test_error: f64,
}

#[derive(Debug, Clone)]
pub struct CandidateSet<S> {
    pub candidates: Vec<Candidate<S>>,
    pub target: PruneSpec,
}

impl<S: Scalar> CandidateSet<S> {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.candidates.first() else {
            return invalid("candidate set is empty");
        };
        if !self
            .candidates
            .iter()
            .all(|c| c.params.same_structure(&first.params))
        {
            return invalid("candidates must share one architecture");
        }
        self.target.validate()
    }

    pub fn dense_errors(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.dense_test_error).collect()
    }
}

/// Measurements on pruned candidates, indexed like the candidate set.
pub trait CandidateProbe: Sync {
    /// LMC of candidate `i` after pruning and α-epoch twin retraining.
    fn pruned_lmc(&self, i: usize) -> Result<f64>;
    /// Test error of candidate `i` after pruning and α-epoch retraining.
    fn probe_test_error(&self, i: usize) -> Result<f64>;
    /// CKA between the α-epoch retrained twins of candidate `i`.
    fn probe_cka(&self, i: usize) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Lowest dense test error pick.
    pub conventional: usize,
    pub conventional_lmc: f64,
    /// Candidates probed in the fallback branch.
    pub probes: usize,
    /// Fallback scores per candidate (test errors or CKAs), empty on early exit.
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn fell_back(&self) -> bool {
        self.probes > 0
    }
}

/// First index of the minimum.
pub fn argmin(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v >= b => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v <= b => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

enum Fallback {
    MinTestError,
    MaxCka,
}

fn select_model<P: CandidateProbe>(
    dense_errors: &[f64],
    probe: &P,
    thresholds: &Thresholds,
    fallback: Fallback,
) -> Result<Selection> {
    thresholds.validate()?;
    let conventional = argmin(dense_errors)
        .ok_or_else(|| Error::InvalidArgument("candidate set is empty".into()))?;
    let conventional_lmc = probe.pruned_lmc(conventional)?;
    if conventional_lmc >= thresholds.epsilon {
        return Ok(Selection {
            index: conventional,
            conventional,
            conventional_lmc,
            probes: 0,
            scores: Vec::new(),
        });
    }
    let scores: Vec<f64> = (0..dense_errors.len())
        .into_par_iter()
        .map(|i| match fallback {
            Fallback::MinTestError => probe.probe_test_error(i),
            Fallback::MaxCka => probe.probe_cka(i),
        })
        .collect::<Result<_>>()?;
    let index = match fallback {
        Fallback::MinTestError => argmin(&scores),
        Fallback::MaxCka => argmax(&scores),
    }
    .expect("non-empty");
    Ok(Selection {
        index,
        conventional,
        conventional_lmc,
        probes: scores.len(),
        scores,
    })
}

/// Picks the dense model to prune: the lowest-test-error model unless its
/// pruned LMC falls below ε, in which case every candidate is pruned,
/// retrained for α epochs, and the lowest resulting test error wins.
pub fn select_model_lmc_error<P: CandidateProbe>(
    dense_errors: &[f64],
    probe: &P,
    thresholds: &Thresholds,
) -> Result<Selection> {
    select_model(dense_errors, probe, thresholds, Fallback::MinTestError)
}

/// As [`select_model_lmc_error`], but the fallback picks the highest CKA
/// between retrained twins and needs no test data.
pub fn select_model_lmc_cka<P: CandidateProbe>(
    dense_errors: &[f64],
    probe: &P,
    thresholds: &Thresholds,
) -> Result<Selection> {
    select_model(dense_errors, probe, thresholds, Fallback::MaxCka)
}

/// [`CandidateProbe`] that prunes and retrains real candidates, memoizing
/// one twin measurement per candidate.
pub struct PipelineCandidateProbe<'a, S> {
    set: &'a CandidateSet<S>,
    data: &'a Split<S>,
    twins: TwinSpec,
    schedule: RetrainSchedule,
    samples: SampleSet<S>,
    grid_points: usize,
    cache: Vec<std::sync::OnceLock<std::result::Result<PrunedProbe<S>, String>>>,
    runs: AtomicUsize,
}

impl<'a, S: Scalar> PipelineCandidateProbe<'a, S> {
    /// Twins follow each candidate's own schedule.
    pub fn new(
        set: &'a CandidateSet<S>,
        data: &'a Split<S>,
        alpha: usize,
        schedule: RetrainSchedule,
        twin_seeds: (u64, u64),
        sample_seed: u64,
        grid_points: usize,
    ) -> Result<Self> {
        set.validate()?;
        let twins = TwinSpec::with_schedule(&set.candidates[0].spec, alpha, twin_seeds, schedule);
        twins.validate()?;
        Ok(Self {
            set,
            data,
            twins,
            schedule,
            samples: SampleSet::from_train(&data.train, sample_seed),
            grid_points,
            cache: (0..set.candidates.len())
                .map(|_| std::sync::OnceLock::new())
                .collect(),
            runs: AtomicUsize::new(0),
        })
    }

    /// Pruned-and-retrained measurements actually executed.
    pub fn runs(&self) -> usize {
        self.runs.load(AtomicOrdering::SeqCst)
    }

    fn measure(&self, i: usize) -> Result<&PrunedProbe<S>> {
        let candidate = self
            .set
            .candidates
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no candidate {i}")))?;
        let entry = self.cache[i].get_or_init(|| {
            self.runs.fetch_add(1, AtomicOrdering::SeqCst);
            let twins = TwinSpec::with_schedule(
                &candidate.spec,
                self.twins.retrain_epochs,
                self.twins.seeds,
                self.schedule,
            );
            probe_pruned(
                &candidate.params,
                &self.set.target,
                &twins,
                self.data,
                &self.samples,
                self.grid_points,
            )
            .map_err(|e| e.to_string())
        });
        entry
            .as_ref()
            .map_err(|msg| Error::InvalidArgument(format!("candidate {i}: {msg}")))
    }
}

impl<S: Scalar> CandidateProbe for PipelineCandidateProbe<'_, S> {
    fn pruned_lmc(&self, i: usize) -> Result<f64> {
        Ok(self.measure(i)?.lmc.value)
    }

    /// Mean over the two retrained twins.
    fn probe_test_error(&self, i: usize) -> Result<f64> {
        Ok(self.measure(i)?.mean_test_error())
    }

    fn probe_cka(&self, i: usize) -> Result<f64> {
        Ok(self.measure(i)?.cka.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSelection {
    pub rho: f64,
    /// CKA per grid entry; `None` where the run failed.
    pub ckas: Vec<Option<f64>>,
}

fn is_failed_run(e: &Error) -> bool {
    match e {
        Error::Diverged { .. } | Error::DegenerateOutput(_) => true,
        Error::Twin { source, .. } => is_failed_run(source),
        _ => false,
    }
}

/// Picks the ρ whose pruned model has the highest CKA; ties go to the
/// smaller ρ. Diverged runs are skipped.
pub fn tune_sam_rho<F>(rho_grid: &[f64], measure_cka: F) -> Result<RhoSelection>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if rho_grid.is_empty() {
        return invalid("rho grid is empty");
    }
    if let Some(bad) = rho_grid.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return invalid(format!("rho {bad} must be non-negative"));
    }
    let ckas: Vec<Option<f64>> = rho_grid
        .par_iter()
        .map(|&rho| match measure_cka(rho) {
            Ok(v) => Ok(Some(v)),
            Err(e) if is_failed_run(&e) => {
                log::warn!("rho {rho} failed: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let best = rho_grid
        .iter()
        .zip(&ckas)
        .filter_map(|(&rho, c)| c.map(|c| (rho, c)))
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .ok_or(Error::NoViableRho)?;
    Ok(RhoSelection { rho: best.0, ckas })
}

/// Real-pipeline CKA for one ρ: SAM-train dense, prune, retrain twins.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_rho_cka<S: Scalar>(
    dense_init: &ParamSet<S>,
    base_spec: &TrainSpec,
    target: &PruneSpec,
    twins: &TwinSpec,
    data: &Split<S>,
    samples: &SampleSet<S>,
    grid_points: usize,
    rho: f64,
) -> Result<f64> {
    let spec = base_spec.clone().with_rho(rho);
    let (dense, _) = train(dense_init, None, &spec, data)?;
    Ok(
        probe_pruned(&dense, target, twins, data, samples, grid_points)?
            .cka
            .value,
    )
}
