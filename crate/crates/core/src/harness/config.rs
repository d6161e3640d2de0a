//! Flat key-value sweep configuration.
//!
//! The file is TOML restricted to top-level keys; every key maps onto one
//! field of [`SweepConfig`] and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_gaussian_blobs, gen_spirals, load_idx_subset, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::landscape::{RetrainSchedule, TwinSpec, DEFAULT_GRID_POINTS};
use crate::nn::ModelConfig;
use crate::optimize::{proportional_milestones, SamConfig, SgdConfig, TemperatureKnob, TrainSpec};
use crate::prune::{PruneSpec, PruneStrategy};
use crate::regimes::Thresholds;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadKnob {
    Density,
    Width,
    Depth,
}

impl std::fmt::Display for LoadKnob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoadKnob::Density => "density",
            LoadKnob::Width => "width",
            LoadKnob::Depth => "depth",
        })
    }
}

impl std::str::FromStr for LoadKnob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(Self::Density),
            "width" => Ok(Self::Width),
            "depth" => Ok(Self::Depth),
            other => invalid(format!("unknown load knob `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spirals,
    Blobs,
    Idx,
}

/// Every knob of a (temperature × load) sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    // dataset
    pub dataset: DatasetKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Spiral noise.
    pub noise: f64,
    pub turns: f64,
    /// Blob spread and dimension.
    pub spread: f64,
    pub dim: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub max_per_class: usize,
    pub data_seed: u64,
    pub split_seed: u64,

    // model
    pub base_width: usize,
    pub depth: usize,
    pub width_scale: f64,

    // axes
    pub temperature_knob: TemperatureKnob,
    /// Ordered coldest to hottest.
    pub temperature_values: Vec<f64>,
    pub load_knob: LoadKnob,
    pub load_values: Vec<f64>,

    // dense training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub rho: f64,

    // pruning
    pub prune_strategy: PruneStrategy,
    pub target_density: f64,
    pub exclude_output_layer: bool,

    // twin retraining
    pub retrain_epochs: usize,
    pub retrain_schedule: RetrainSchedule,
    /// Overrides the starting retraining rate.
    pub retrain_lr: Option<f64>,
    pub twin_seed_offsets: [u64; 2],
    pub grid_points: usize,
    pub cka_sample_seed: u64,

    // regimes
    pub epsilon: f64,

    // execution
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Spirals,
            num_classes: 2,
            samples_per_class: 2000,
            noise: 0.15,
            turns: 1.0,
            spread: 0.3,
            dim: 2,
            idx_images: None,
            idx_labels: None,
            max_per_class: 100,
            data_seed: 3,
            split_seed: 0,
            base_width: 256,
            depth: 2,
            width_scale: 1.0,
            temperature_knob: TemperatureKnob::Epochs,
            temperature_values: vec![80.0, 40.0, 20.0, 10.0],
            load_knob: LoadKnob::Density,
            load_values: vec![0.03, 0.5],
            epochs: 80,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            rho: 0.0,
            prune_strategy: PruneStrategy::Uniform,
            target_density: 0.05,
            exclude_output_layer: true,
            retrain_epochs: 20,
            retrain_schedule: RetrainSchedule::Full,
            retrain_lr: None,
            twin_seed_offsets: [1000, 2000],
            grid_points: DEFAULT_GRID_POINTS,
            cka_sample_seed: 0,
            epsilon: -0.05,
            seeds: vec![0, 1, 2],
            workers: 0,
        }
    }
}

fn is_integral(v: f64) -> bool {
    v.fract() == 0.0 && v >= 1.0
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.temperature_values.is_empty() || self.load_values.is_empty() {
            return invalid("sweep axes must be non-empty");
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        let t = &self.temperature_values;
        let hotter = |a: f64, b: f64| match self.temperature_knob {
            TemperatureKnob::Epochs | TemperatureKnob::Batch => b < a,
            TemperatureKnob::Rho => b > a,
        };
        if !t.windows(2).all(|w| hotter(w[0], w[1])) {
            return invalid(format!(
                "temperature values {t:?} must be listed coldest to hottest for knob `{}`",
                self.temperature_knob
            ));
        }
        match self.temperature_knob {
            TemperatureKnob::Epochs | TemperatureKnob::Batch => {
                if !t.iter().all(|&v| is_integral(v)) {
                    return invalid("epoch and batch temperatures must be positive integers");
                }
            }
            TemperatureKnob::Rho => {
                if !t.iter().all(|&v| v.is_finite() && v >= 0.0) {
                    return invalid("rho temperatures must be non-negative");
                }
            }
        }
        match self.load_knob {
            LoadKnob::Density => {
                if !self.load_values.iter().all(|&d| d > 0.0 && d <= 1.0) {
                    return invalid("densities must lie in (0, 1]");
                }
            }
            LoadKnob::Width => {
                if !self.load_values.iter().all(|&w| w.is_finite() && w > 0.0) {
                    return invalid("width scales must be positive");
                }
            }
            LoadKnob::Depth => {
                if !self.load_values.iter().all(|&d| is_integral(d)) {
                    return invalid("depths must be positive integers");
                }
            }
        }
        if self.twin_seed_offsets[0] == self.twin_seed_offsets[1] {
            return invalid("twin seed offsets must differ");
        }
        if self.grid_points < 2 {
            return invalid("grid_points must be at least 2");
        }
        if !(self.epsilon < 0.0) {
            return invalid("epsilon must be negative");
        }
        if self.retrain_epochs == 0 {
            return invalid("retrain_epochs must be positive");
        }
        self.model_config(0.0)?;
        self.dense_spec(self.temperature_values[0], 0)?.validate()?;
        PruneSpec::new(self.prune_strategy, self.target_density).validate()
    }

    /// Builds the dataset and its fixed train/test split.
    pub fn load_data<S: Scalar>(&self) -> Result<Split<S>> {
        let ds: Dataset<S> = match self.dataset {
            DatasetKind::Spirals => gen_spirals(
                self.num_classes,
                self.samples_per_class,
                self.noise,
                self.turns,
                self.data_seed,
            )?,
            DatasetKind::Blobs => gen_gaussian_blobs(
                self.num_classes,
                self.samples_per_class,
                self.dim,
                self.spread,
                self.data_seed,
            )?,
            DatasetKind::Idx => {
                let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) else {
                    return Err(Error::Config(
                        "idx dataset needs idx_images and idx_labels".into(),
                    ));
                };
                load_idx_subset(images, labels, self.max_per_class, self.data_seed)?
            }
        };
        ds.split(self.split_seed)
    }

    fn input_output_dims(&self) -> (usize, usize) {
        match self.dataset {
            DatasetKind::Spirals => (2, self.num_classes),
            DatasetKind::Blobs => (self.dim, self.num_classes),
            // Resolved from data at run time; placeholders for validation.
            DatasetKind::Idx => (1, 1),
        }
    }

    /// Model architecture for a load value (ignored unless the load knob is
    /// width or depth).
    pub fn model_config(&self, load: f64) -> Result<ModelConfig> {
        let (i, o) = self.input_output_dims();
        self.model_config_for(i, o, load)
    }

    pub fn model_config_for(
        &self,
        input_dim: usize,
        output_dim: usize,
        load: f64,
    ) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(input_dim, output_dim)
            .with_base_width(self.base_width)
            .with_depth(self.depth)
            .with_width_scale(self.width_scale);
        match self.load_knob {
            LoadKnob::Width if load > 0.0 => m.width_scale = load,
            LoadKnob::Depth if load > 0.0 => m.depth = load as usize,
            _ => {}
        }
        m.validate()?;
        Ok(m)
    }

    /// Target pruning spec for a load value.
    pub fn prune_spec(&self, load: f64) -> PruneSpec {
        let density = match self.load_knob {
            LoadKnob::Density => load,
            _ => self.target_density,
        };
        PruneSpec {
            strategy: self.prune_strategy,
            target_density: density,
            exclude_output_layer: self.exclude_output_layer,
        }
    }

    /// Temperature-free base training spec.
    pub fn base_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr0: self.lr0,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                lr_decay_epochs: proportional_milestones(self.epochs),
                lr_decay_factor: self.lr_decay_factor,
            },
            sam: (self.rho > 0.0).then_some(SamConfig { rho: self.rho }),
            seed,
        }
    }

    /// Dense training spec at a temperature value.
    pub fn dense_spec(&self, temperature: f64, seed: u64) -> Result<TrainSpec> {
        let mut spec = self.base_spec(seed);
        match self.temperature_knob {
            TemperatureKnob::Epochs => {
                spec.epochs = temperature as usize;
                spec.sgd.lr_decay_epochs = proportional_milestones(spec.epochs);
            }
            TemperatureKnob::Batch => spec.batch_size = temperature as usize,
            TemperatureKnob::Rho => {
                spec.sam = (temperature > 0.0).then_some(SamConfig { rho: temperature })
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Twin retraining spec for a seed.
    pub fn twin_spec(&self, seed: u64) -> TwinSpec {
        let base = self.base_spec(seed);
        let mut twins = TwinSpec::with_schedule(
            &base,
            self.retrain_epochs,
            self.twin_seeds(seed),
            self.retrain_schedule,
        );
        if let Some(lr) = self.retrain_lr {
            twins.template.sgd.lr0 = lr;
        }
        twins
    }

    pub fn twin_seeds(&self, seed: u64) -> (u64, u64) {
        (
            seed.wrapping_add(self.twin_seed_offsets[0]),
            seed.wrapping_add(self.twin_seed_offsets[1]),
        )
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            epsilon: self.epsilon,
            ..Thresholds::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = SweepConfig::default();
        cfg.validate().unwrap();
        let back = SweepConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = SweepConfig::from_toml_str("epochs = 10\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn temperature_axis_must_run_cold_to_hot() {
        let bad = "temperature_values = [10, 20, 40]\n";
        assert!(SweepConfig::from_toml_str(bad).is_err());
        let ok = "temperature_values = [40, 20, 10]\n";
        assert!(SweepConfig::from_toml_str(ok).is_ok());
        let rho = "temperature_knob = \"rho\"\ntemperature_values = [0.0, 0.05, 0.1]\n";
        assert!(SweepConfig::from_toml_str(rho).is_ok());
    }

    #[test]
    fn dense_spec_follows_knob() {
        let cfg = SweepConfig::default();
        let s = cfg.dense_spec(40.0, 7).unwrap();
        assert_eq!((s.epochs, s.batch_size, s.seed), (40, 128, 7));
        assert_eq!(s.sgd.lr_decay_epochs, vec![20, 30]);
        let twins = cfg.twin_spec(7);
        assert_eq!(twins.seeds, (1007, 2007));
        assert_eq!(twins.template.sgd.lr0, 0.1);
        assert_eq!(twins.template.sgd.lr_decay_epochs, vec![10, 15]);
        let cfg = SweepConfig {
            retrain_schedule: RetrainSchedule::Final,
            ..cfg
        };
        let twins = cfg.twin_spec(7);
        assert!((twins.template.sgd.lr0 - 0.001).abs() < 1e-15);
        assert!(twins.template.sgd.lr_decay_epochs.is_empty());
    }
}
