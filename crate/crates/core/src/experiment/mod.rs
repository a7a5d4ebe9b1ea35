//! Configuration-driven runs, sweeps, probes and the built-in self-check.

mod check;
mod config;
mod run;

pub use check::{self_check, CheckOutcome};
pub use config::{load_config, ExperimentConfig, OptimizerChoice, PartitionChoice, KEYS};
pub use run::{prepare, probe, probe_state, run_experiment, sweep, Prepared, ProbeRow, RunSummary, SweepAxis, PROBE_HEADER};
