//! Dataset ingestion, fetching, and experiment drivers.

pub mod data;
pub mod experiment;
pub mod fetch;

pub use data::{load_dataset, DataFormat, DatasetBundle, LabelSpec, SplitSpec, Standardization};
pub use experiment::{
    max_stable_step, prepare, prepare_bundle, read_trace_csv, run_experiment, run_prepared, stepsize_sweep,
    sweep_prepared, write_trace_csv, ExperimentConfig, ExperimentOutcome, MethodId, PreparedData, Summary, SweepRow,
};
pub use fetch::{cache_dir, fetch_dataset, fetch_source, registry, sha256_hex, DatasetSource};
