use rand::seq::SliceRandom;

use crate::data::ClientShard;
use crate::error::Result;
use crate::nn::{Optimizer, OptimizerKind};
use crate::rng::{domain, stream, SimRng};
use crate::split::{ClientModel, ModelDims};

/// Walks a shard in shuffled order, one minibatch at a time, reshuffling
/// when fewer than a batch of unseen samples remain.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SimRng,
}

impl BatchSampler {
    pub fn new(indices: &[usize], seed: u64, client_id: usize) -> Self {
        let mut rng = stream(seed, domain::CLIENT_DATA, &[client_id as u64]);
        let mut order = indices.to_vec();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    /// The next minibatch. A batch at least as large as the shard returns
    /// the whole shard in ascending index order.
    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if batch >= self.order.len() {
            let mut all = self.order.clone();
            all.sort_unstable();
            return all;
        }
        if self.cursor + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        out
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ClientModel,
    /// `None` when the client learning rate is zero.
    pub optimizer: Option<Optimizer>,
    pub shard: ClientShard,
    pub sampler: BatchSampler,
}

impl ClientState {
    pub fn new(
        dims: ModelDims,
        shard: ClientShard,
        kind: OptimizerKind,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let id = shard.client_id;
        let optimizer = if lr > 0.0 {
            Some(Optimizer::new(kind, lr)?)
        } else {
            None
        };
        Ok(Self {
            id,
            model: ClientModel::init(dims, seed, id)?,
            optimizer,
            sampler: BatchSampler::new(&shard.train, seed, id),
            shard,
        })
    }

    pub fn apply_update(&mut self) {
        if let Some(opt) = self.optimizer.as_mut() {
            opt.step(self.model.params_mut());
        }
    }
}
