use std::time::Instant;

use rayon::prelude::*;

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::Optimizer;
use crate::rng::domain;
use crate::split::{full_gradient, ClientModel, Encoder};
use crate::tensor::{flatten_values, load_values, Parameter};
use crate::transcript::{MessageKind, Transcript};

use super::client::BatchSampler;
use super::config::RoundConfig;
use super::metrics::MetricsRecord;
use super::training::{evaluate, sample_clients};

/// The assembled model trained by the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub client: ClientModel,
    pub encoder: Encoder,
}

impl GlobalModel {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let n_head = self.client.head_params().len();
        let (head, tail) = {
            let mut all = self.client.params_mut();
            let tail = all.split_off(n_head);
            (all, tail)
        };
        let mut out = head;
        out.extend(self.encoder.params_mut());
        out.extend(tail);
        out
    }

    /// Weights ordered `(w_H, w_E, w_T)`.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = flatten_values(self.client.head_params());
        out.extend(self.encoder.flat_values());
        out.extend(flatten_values(self.client.tail_params()));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        load_values(self.params_mut(), flat)
    }
}

#[derive(Debug, Clone)]
pub struct FedAvgRun {
    pub global: GlobalModel,
    pub metrics: Vec<MetricsRecord>,
    pub transcript: Transcript,
}

/// Each participant trains the whole model for `K` minibatch steps from
/// the global weights with a fresh optimizer at the client rate; the server
/// replaces the global model with the participants' uniform average every
/// round. The encoder starts from `encoder`, head and tail from a seeded
/// draw shared by all clients.
pub fn fedavg_baseline(config: &RoundConfig, dataset: &Dataset, shards: &[ClientShard], encoder: Encoder) -> Result<FedAvgRun> {
    config.validate()?;
    if shards.len() != config.clients {
        return Err(Error::Config(format!(
            "{} shards for M = {} clients",
            shards.len(),
            config.clients
        )));
    }
    if config.client_lr <= 0.0 {
        return Err(Error::Config("FedAvg needs a positive client learning rate".into()));
    }
    let mut global = GlobalModel {
        client: ClientModel::init_from(encoder.dims, config.seed, domain::FEDAVG_INIT, 0)?,
        encoder,
    };
    let mut samplers: Vec<BatchSampler> = shards
        .iter()
        .map(|s| BatchSampler::new(&s.train, config.seed, s.client_id))
        .collect();
    let mut transcript = Transcript::default();
    let mut metrics = Vec::with_capacity(config.rounds);
    let size = global.flat_values().len();

    for t in 0..config.rounds {
        let start = Instant::now();
        let sampled = sample_clients(config.clients, config.sample_ratio, t, config.seed)?;
        let results: Vec<(usize, Vec<f64>, f64)> = samplers
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| sampled.binary_search(i).is_ok())
            .map(|(i, sampler)| {
                let mut local = global.clone();
                let mut opt = Optimizer::new(config.client_optimizer, config.client_lr)?;
                let mut total = 0.0;
                for _ in 0..config.local_steps {
                    let (x, y) = dataset.gather(&sampler.next_batch(config.batch_size));
                    let (loss, _) = full_gradient(&mut local.client, &mut local.encoder, &x, &y)
                        .map_err(|e| e.in_context(format_args!("round {t} client {i}")))?;
                    total += loss;
                    opt.step(local.params_mut());
                }
                Ok((i, local.flat_values(), total / config.local_steps as f64))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut mean = Vec::new();
        let mut losses = Vec::with_capacity(results.len());
        for (n, (i, w, loss)) in results.into_iter().enumerate() {
            transcript.record(t, i, MessageKind::ModelDownload, size);
            transcript.record(t, i, MessageKind::ModelUpload, size);
            losses.push(loss);
            if n == 0 {
                mean = w;
            } else {
                let inv = 1.0 / (n + 1) as f64;
                mean.iter_mut().zip(&w).for_each(|(m, x)| *m += (x - *m) * inv);
            }
        }
        global.load_flat(&mean)?;

        let models = vec![&global.client; shards.len()];
        let eval = evaluate(&models, &global.encoder, dataset, shards)?;
        let (bytes_up, bytes_down) = transcript.round_bytes(t);
        metrics.push(MetricsRecord {
            round: t,
            participants: sampled.len(),
            mean_train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            max_train_loss: losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean_test_accuracy: eval.mean,
            sigma_g2: None,
            bytes_up,
            bytes_down,
            aggregated: true,
            wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(FedAvgRun {
        global,
        metrics,
        transcript,
    })
}
