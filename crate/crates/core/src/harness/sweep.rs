//! (temperature × load) sweeps producing phase diagrams.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{LoadKnob, SweepConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::landscape::{probe_pruned, SampleSet};
use crate::nn::ParamSet;
use crate::optimize::{train, TemperatureKnob};
use crate::regimes::{classify_regime, Regime, Thresholds};
use crate::scalar::Scalar;

/// Metrics of one seed in one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    /// Mean test error of the two retrained copies.
    pub test_error: f64,
    /// Mean train error of the two retrained copies.
    pub train_error: f64,
    pub lmc: f64,
    pub cka: f64,
    /// Test error of the dense model before pruning.
    pub dense_test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` when training diverged or the measurement failed.
    pub metrics: Option<SeedMetrics>,
    pub regime: Option<Regime>,
}

impl SeedResult {
    pub fn diverged(&self) -> bool {
        self.metrics.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub temperature: f64,
    pub load: f64,
    pub seeds: Vec<SeedResult>,
    /// Mean over non-diverged seeds.
    pub mean: Option<SeedMetrics>,
    pub regime: Option<Regime>,
    pub seconds: f64,
}

impl CellResult {
    pub fn seed_count(&self) -> usize {
        self.seeds.iter().filter(|s| !s.diverged()).count()
    }

    pub fn diverged(&self) -> bool {
        self.mean.is_none()
    }

    pub fn test_error(&self) -> Option<f64> {
        self.mean.map(|m| m.test_error)
    }
}

/// Grid of cells, rows indexed by temperature (coldest first) and columns
/// by load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub temperature_knob: TemperatureKnob,
    pub temperature_values: Vec<f64>,
    pub load_knob: LoadKnob,
    pub load_values: Vec<f64>,
    /// Row-major: `cells[t * loads + l]`.
    pub cells: Vec<CellResult>,
    /// Test error minus its column minimum; `None` for diverged cells.
    pub normalized: Vec<Option<f64>>,
    /// False for columns where every cell diverged.
    pub column_valid: Vec<bool>,
}

impl PhaseDiagram {
    pub fn rows(&self) -> usize {
        self.temperature_values.len()
    }

    pub fn cols(&self) -> usize {
        self.load_values.len()
    }

    pub fn cell(&self, t: usize, l: usize) -> &CellResult {
        &self.cells[t * self.cols() + l]
    }

    pub fn normalized_at(&self, t: usize, l: usize) -> Option<f64> {
        self.normalized[t * self.cols() + l]
    }

    /// Column of cells at load index `l`, coldest first.
    pub fn column(&self, l: usize) -> impl Iterator<Item = &CellResult> {
        (0..self.rows()).map(move |t| self.cell(t, l))
    }
}

/// Subtracts the column minimum; diverged entries stay `None`.
pub fn normalize_column(errors: &[Option<f64>]) -> Option<Vec<Option<f64>>> {
    let min = errors.iter().flatten().copied().reduce(f64::min)?;
    Some(errors.iter().map(|e| e.map(|e| e - min)).collect())
}

/// Recomputes normalized errors and column validity from cell test errors.
pub fn normalize_columns(mut diagram: PhaseDiagram) -> PhaseDiagram {
    let (rows, cols) = (diagram.rows(), diagram.cols());
    diagram.normalized = vec![None; rows * cols];
    diagram.column_valid = vec![false; cols];
    for l in 0..cols {
        let column: Vec<Option<f64>> = diagram.column(l).map(CellResult::test_error).collect();
        if let Some(norm) = normalize_column(&column) {
            diagram.column_valid[l] = true;
            for (t, v) in norm.into_iter().enumerate() {
                diagram.normalized[t * cols + l] = v;
            }
        }
    }
    diagram
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Labels every seed and cell, using each load column's median mean-CKA as
/// the II-A/II-B reference.
pub fn assign_regimes(diagram: &mut PhaseDiagram, thresholds: &Thresholds) {
    let cols = diagram.cols();
    for l in 0..cols {
        let reference = median(
            diagram
                .column(l)
                .filter_map(|c| c.mean.map(|m| m.cka))
                .collect(),
        );
        for t in 0..diagram.rows() {
            let cell = &mut diagram.cells[t * cols + l];
            let label = |m: &SeedMetrics| {
                classify_regime(m.lmc, m.cka, thresholds, reference)
                    .ok()
                    .map(|r| r.regime)
            };
            for s in &mut cell.seeds {
                s.regime = s.metrics.as_ref().and_then(label);
            }
            cell.regime = cell.mean.as_ref().and_then(label);
        }
    }
}

fn mean_metrics(seeds: &[SeedResult]) -> Option<SeedMetrics> {
    let ok: Vec<&SeedMetrics> = seeds.iter().filter_map(|s| s.metrics.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    let avg = |f: fn(&SeedMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
    Some(SeedMetrics {
        test_error: avg(|m| m.test_error),
        train_error: avg(|m| m.train_error),
        lmc: avg(|m| m.lmc),
        cka: avg(|m| m.cka),
        dense_test_error: avg(|m| m.dense_test_error),
    })
}

/// Whether the dense model depends on the load value.
fn dense_depends_on_load(knob: LoadKnob) -> bool {
    !matches!(knob, LoadKnob::Density)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct DenseKey {
    temperature: usize,
    load: Option<usize>,
    seed: usize,
}

type DenseOutcome<S> = std::result::Result<(ParamSet<S>, f64), String>;

/// Runs every cell of the sweep. Per-cell failures are recorded in the
/// diagram rather than aborting.
pub fn run_sweep<S: Scalar>(config: &SweepConfig) -> Result<PhaseDiagram> {
    config.validate()?;
    let data: Split<S> = config.load_data()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if config.workers > 0 {
        builder = builder.num_threads(config.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_sweep_on(config, &data))
}

fn run_sweep_on<S: Scalar>(config: &SweepConfig, data: &Split<S>) -> Result<PhaseDiagram> {
    let (rows, cols) = (config.temperature_values.len(), config.load_values.len());
    let per_load = dense_depends_on_load(config.load_knob);
    let input_dim = data.train.dim();
    let classes = data.train.num_classes();
    let samples = SampleSet::from_train(&data.train, config.cka_sample_seed);

    // Dense models: once per (temperature, seed), or per load too when the
    // architecture itself varies with load.
    let mut keys = Vec::new();
    for t in 0..rows {
        for l in 0..(if per_load { cols } else { 1 }) {
            for s in 0..config.seeds.len() {
                keys.push(DenseKey {
                    temperature: t,
                    load: per_load.then_some(l),
                    seed: s,
                });
            }
        }
    }
    let dense: HashMap<DenseKey, DenseOutcome<S>> = keys
        .par_iter()
        .map(|&key| {
            let seed = config.seeds[key.seed];
            let load = key.load.map_or(0.0, |l| config.load_values[l]);
            let outcome = (|| {
                let model = config.model_config_for(input_dim, classes, load)?;
                let init = ParamSet::<S>::init(&model, seed)?;
                let spec = config.dense_spec(config.temperature_values[key.temperature], seed)?;
                let (params, report) = train(&init, None, &spec, data)?;
                Ok::<_, Error>((params, report.final_test_error))
            })()
            .map_err(|e| e.to_string());
            if let Err(msg) = &outcome {
                log::warn!("dense run t={} seed={seed} failed: {msg}", key.temperature);
            }
            (key, outcome)
        })
        .collect();

    let cells: Vec<CellResult> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let (t, l) = (idx / cols, idx % cols);
            let started = Instant::now();
            let load = config.load_values[l];
            let prune = config.prune_spec(load);
            let seeds: Vec<SeedResult> = config
                .seeds
                .iter()
                .enumerate()
                .map(|(si, &seed)| {
                    let key = DenseKey {
                        temperature: t,
                        load: per_load.then_some(l),
                        seed: si,
                    };
                    let metrics = match &dense[&key] {
                        Ok((params, dense_err)) => {
                            let twins = config.twin_spec(seed);
                            match probe_pruned(
                                params,
                                &prune,
                                &twins,
                                data,
                                &samples,
                                config.grid_points,
                            ) {
                                Ok(p) => Some(SeedMetrics {
                                    test_error: p.mean_test_error(),
                                    train_error: 0.5
                                        * (p.twin_train_errors.0 + p.twin_train_errors.1),
                                    lmc: p.lmc.value,
                                    cka: p.cka.value,
                                    dense_test_error: *dense_err,
                                }),
                                Err(e) => {
                                    log::warn!("cell ({t}, {l}) seed {seed} failed: {e}");
                                    None
                                }
                            }
                        }
                        Err(_) => None,
                    };
                    SeedResult {
                        seed,
                        metrics,
                        regime: None,
                    }
                })
                .collect();
            CellResult {
                temperature: config.temperature_values[t],
                load,
                mean: mean_metrics(&seeds),
                seeds,
                regime: None,
                seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect();

    let mut diagram = normalize_columns(PhaseDiagram {
        temperature_knob: config.temperature_knob,
        temperature_values: config.temperature_values.clone(),
        load_knob: config.load_knob,
        load_values: config.load_values.clone(),
        cells,
        normalized: Vec::new(),
        column_valid: Vec::new(),
    });
    assign_regimes(&mut diagram, &config.thresholds());
    Ok(diagram)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_normalization() {
        let n = normalize_column(&[Some(0.3), Some(0.25), Some(0.4)]).unwrap();
        let expect = [0.3 - 0.25, 0.0, 0.4 - 0.25];
        for (a, b) in n.iter().zip(expect) {
            assert_eq!(a.unwrap(), b);
        }
        assert_eq!(normalize_column(&[Some(0.7)]).unwrap(), vec![Some(0.0)]);
        assert_eq!(
            normalize_column(&[Some(0.2), Some(0.2)]).unwrap(),
            vec![Some(0.0), Some(0.0)]
        );
        assert_eq!(normalize_column(&[None, None]), None);
        assert_eq!(
            normalize_column(&[None, Some(0.5), Some(0.1)]).unwrap(),
            vec![None, Some(0.4), Some(0.0)]
        );
    }

    #[test]
    fn normalization_is_idempotent() {
        let col = [Some(0.31), Some(0.12), Some(0.5), None];
        let once = normalize_column(&col).unwrap();
        assert_eq!(normalize_column(&once).unwrap(), once);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
