//! Sweeps, checkpoints and output emitters.

pub mod checkpoint;
pub mod config;
pub mod emit;
pub mod sweep;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint, load_checkpoint_for,
    save_checkpoint, Checkpoint, CheckpointSummary, Metadata,
};
pub use config::{DatasetKind, LoadKnob, SweepConfig};
pub use emit::{csv_string, emit_csv, emit_heatmap, heatmap_svg, parse_csv, CsvRow, Metric};
pub use sweep::{
    normalize_column, normalize_columns, run_sweep, CellResult, PhaseDiagram, SeedMetrics,
    SeedResult,
};
