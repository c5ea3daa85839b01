//! Experiment orchestration: configs, training runs, evaluation, mask
//! degradation, ablations and reports. Every output is a pure function of
//! the config and dataset, so re-running a config reproduces its files.

mod config;
mod report;
mod run;

pub use config::{DegradeConfig, RunConfig, SynthConfig};
pub use report::{report, ReportRow};
pub use run::{
    ablate, ablate_on, ber_sweep, degrade_split, eval_checkpoint, evaluate_into, load_splits, read_json, read_jsonl,
    run_experiment, run_experiment_on, write_jsonl, Ablation, BerRow, OutputLock, RunOptions, RunSummary,
    BER_SWEEP_FILE, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, TRAIN_LOG_FILE,
};
