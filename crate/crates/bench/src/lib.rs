//! Shared fixtures for the benchmarks.

use fedsplit::data::{generate_synthetic, partition, ClientShard, Dataset, PartitionKind, PartitionSpec};
use fedsplit::federation::RoundConfig;
use fedsplit::rng::{domain, stream};
use fedsplit::split::{ClientModel, Encoder, ModelDims};
use fedsplit::Tensor;

pub const SEED: u64 = 17;

/// Desk-scale client model, encoder and one random batch with labels.
pub fn model_and_batch(batch: usize) -> (ClientModel, Encoder, Tensor, Vec<usize>) {
    let dims = ModelDims::desk_scale(4);
    let client = ClientModel::init(dims, SEED, 0).unwrap();
    let encoder = Encoder::init(dims, SEED).unwrap();
    let mut rng = stream(SEED, domain::PROBE, &[]);
    let x = Tensor::randn(&[batch, dims.input_dim], 1.0, &mut rng);
    let labels = (0..batch).map(|i| i % dims.classes).collect();
    (client, encoder, x, labels)
}

/// A federation of `clients` IID shards over 200 samples each.
pub fn federation(clients: usize) -> (Dataset, Vec<ClientShard>, Encoder) {
    let data = generate_synthetic(200 * clients, 4, 4.0, SEED).unwrap();
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        clients,
        seed: SEED,
        test_fraction: 0.2,
    };
    let shards = partition(&data, &spec).unwrap();
    (data, shards, Encoder::init(ModelDims::desk_scale(4), SEED).unwrap())
}

pub fn round_config(clients: usize) -> RoundConfig {
    RoundConfig {
        rounds: 1,
        clients,
        sample_ratio: 0.5,
        local_steps: 5,
        batch_size: 32,
        client_lr: 3e-3,
        server_lr: 1e-2,
        seed: SEED,
        ..RoundConfig::default()
    }
}
