//! Synthetic data, client partitioning and heterogeneity probes.

mod dataset;
mod partition;
mod probes;

pub use dataset::{generate_synthetic, Dataset, FEATURE_DIM};
pub use partition::{
    manifest_text, parse_manifest, partition, partition_detailed, ClientShard, PartitionKind,
    PartitionOutcome, PartitionSpec, MANIFEST_MAGIC, MAX_REDRAWS,
};
pub use probes::{
    client_smoothness, estimate_sigma_g, estimate_sigma_l, estimate_smoothness, shard_gradient,
    GlobalVariance, Smoothness,
};
