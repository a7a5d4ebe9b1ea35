//! Round-based federated split training and the FedAvg baseline.
//!
//! Within a round the sampled clients run concurrently against private
//! copies of the round's encoder snapshot. Every reduction across clients
//! (server gradient sum, head/tail averaging, transcript merge) runs in
//! ascending client id, so results do not depend on scheduling.

mod client;
mod config;
mod fedavg;
mod metrics;
mod server;
mod training;

pub use client::{BatchSampler, ClientState};
pub use config::{Method, RoundConfig};
pub use fedavg::{fedavg_baseline, FedAvgRun, GlobalModel};
pub use metrics::{metrics_csv, rounds_to_accuracy, timing_csv, MetricsRecord, METRICS_HEADER};
pub use server::{server_update, ServerState, StoredGradient};
pub use training::{
    aggregate_clients, evaluate, init_states, local_step, mean_model, run_training, run_training_observed,
    run_training_with, sample_clients, ClientRound, Evaluation, LocalStep, RoundView, TrainingRun,
};
