//! Experiment driver: TOML configs, resumable run grids, seed sweeps and
//! results tables in Markdown or CSV.

mod config;
mod run;
mod table;

pub use config::{
    hash_value, ratio_percent, DataConfig, DatasetRef, ExperimentConfig, Init, InitKind, TableFormat, Task,
    TokenizerConfig, UNHASHED_FIELDS,
};
pub use run::{layout_for, read_json, run_experiment, seed_sweep, RunOutcome, RunReport};
pub use table::{
    aggregate, build_table, emit_results_table, AdapterResults, Cell, Layout, ModelResults, Results, ResultsTable,
    SliceResults, MISSING,
};
