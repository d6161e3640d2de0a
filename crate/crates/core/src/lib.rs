//! Train–prune–retrain pipelines for small MLPs, with loss-landscape
//! diagnostics (linear mode connectivity, CKA) and the temperature/model
//! selection procedures built on them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod data;
pub mod error;
pub mod harness;
pub mod landscape;
pub mod nn;
pub mod optimize;
pub mod prune;
pub mod regimes;
pub mod scalar;

pub use data::{
    gen_gaussian_blobs, gen_spirals, load_idx_subset, parse_idx, BatchStream, Dataset, Split,
};
pub use error::{Error, Result};
pub use landscape::{
    cka, cka_outputs, lmc, lmc_with, probe_pruned, retrain_twins, CkaResult, LmcResult,
    PrunedProbe, RetrainSchedule, SampleSet, TwinSpec,
};
pub use nn::{
    classification_error, forward, interpolate, loss_and_grad, Activation, Layer, ModelConfig,
    OutputMatrix, ParamSet,
};
pub use optimize::{train, SamConfig, SgdConfig, TemperatureKnob, TrainReport, TrainSpec};
pub use prune::{global_mp, prune, uniform_mp, LayerMask, Mask, PruneSpec, PruneStrategy};
pub use regimes::{
    classify_regime, select_model_lmc_cka, select_model_lmc_error, tune_sam_rho, tune_temperature,
    Regime, RegimeLabel, Selection, TemperatureStep, Thresholds,
};
pub use scalar::Scalar;

pub type ParamSetF32 = ParamSet<f32>;
pub type ParamSetF64 = ParamSet<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type SplitF32 = Split<f32>;
pub type SplitF64 = Split<f64>;
