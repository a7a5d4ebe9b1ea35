use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{estimate_sigma_g, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::rng::{domain, stream};
use crate::split::{predict, ClientModel, Encoder, StepTag};
use crate::tensor::{flatten_values, load_values};
use crate::transcript::{Event, MessageKind, Transcript};
use crate::zo::zo_messages;

use super::client::ClientState;
use super::config::{Method, RoundConfig};
use super::metrics::MetricsRecord;
use super::server::{server_update, ServerState};

/// `m = round(q·M)` distinct ids, ascending, from a shuffle seeded by
/// `(seed, round)`.
pub fn sample_clients(clients: usize, ratio: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    let m = (ratio * clients as f64).round() as usize;
    if !(ratio > 0.0 && ratio <= 1.0) || m < 1 || m > clients {
        return Err(Error::Config(format!(
            "cannot sample round(q·M) clients with q = {ratio}, M = {clients}"
        )));
    }
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(&mut stream(seed, domain::SAMPLING, &[round as u64]));
    let mut chosen = ids[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone)]
pub struct LocalStep {
    pub loss: f64,
    /// Present only at `k = K`.
    pub server_gradient: Option<Vec<f64>>,
    pub events: Vec<Event>,
}

/// One minibatch through head, encoder and tail followed by the client
/// optimizer step. `encoder` is this client's private copy of the round's
/// encoder snapshot; its weights are never changed here.
pub fn local_step(
    client: &mut ClientState,
    encoder: &mut Encoder,
    dataset: &Dataset,
    config: &RoundConfig,
    round: usize,
    k: usize,
) -> Result<LocalStep> {
    let tag = StepTag {
        client_id: client.id,
        round,
        step: k,
    };
    let mut events = Vec::new();
    let mut log = |kind: MessageKind, elements: usize| {
        events.push(Event {
            round,
            client: client.id,
            kind,
            elements,
        })
    };
    let batch = client.sampler.next_batch(config.batch_size);
    let (x, labels) = dataset.gather(&batch);

    let (features, head_trace) = client.model.head_forward(tag, &x)?;
    log(MessageKind::Feature, features.h.len());
    let (smashed, enc_trace) = encoder.forward_features(&features)?;
    log(MessageKind::Smashed, smashed.b.len());
    let (loss, tail_trace) = client.model.tail_forward_loss(&smashed, &labels)?;

    client.model.zero_grad();
    encoder.zero_grad();
    let smashed_grad = client.model.tail_backward(&tail_trace)?;
    log(MessageKind::SmashedGrad, smashed_grad.grad.len());
    let feature_grad = encoder.vjp(&enc_trace, &smashed_grad)?;
    log(MessageKind::FeatureGrad, feature_grad.grad.len());
    client.model.head_backward(&head_trace, &feature_grad)?;

    let server_gradient = if k == config.local_steps {
        Some(match config.method {
            Method::Pit => encoder.flat_grads(),
            Method::Ptzo => {
                let mut rng = stream(config.seed, domain::ZO_DIRECTION, &[round as u64, client.id as u64]);
                let ex = zo_messages(encoder, &client.model, &features, &labels, &config.zo, &mut rng)?;
                for (kind, n) in ex.messages {
                    log(kind, n);
                }
                ex.gradient
            }
        })
    } else {
        None
    };
    client.apply_update();
    Ok(LocalStep {
        loss,
        server_gradient,
        events,
    })
}

/// Per-client result of one round's `K` local steps.
#[derive(Debug, Clone)]
pub struct ClientRound {
    pub client: usize,
    pub losses: Vec<f64>,
    pub gradient: Vec<f64>,
    pub events: Vec<Event>,
}

fn client_round(
    client: &mut ClientState,
    snapshot: &Encoder,
    dataset: &Dataset,
    config: &RoundConfig,
    round: usize,
) -> Result<ClientRound> {
    let mut encoder = snapshot.clone();
    let mut losses = Vec::with_capacity(config.local_steps);
    let mut events = Vec::new();
    let mut gradient = None;
    for k in 1..=config.local_steps {
        let step = local_step(client, &mut encoder, dataset, config, round, k)
            .map_err(|e| e.in_context(format_args!("round {round} client {} step {k}", client.id)))?;
        losses.push(step.loss);
        events.extend(step.events);
        if step.server_gradient.is_some() {
            gradient = step.server_gradient;
        }
    }
    Ok(ClientRound {
        client: client.id,
        losses,
        gradient: gradient.expect("K >= 1 so the final step stores a gradient"),
        events,
    })
}

/// Uniform average of the participants' head and tail weights, taken in
/// ascending id order as a running mean, written to every client.
pub fn aggregate_clients(clients: &mut [ClientState], participants: &[usize], transcript: &mut Transcript, round: usize) -> Vec<f64> {
    let mut ids = participants.to_vec();
    ids.sort_unstable();
    let mut mean: Vec<f64> = Vec::new();
    for (n, &id) in ids.iter().enumerate() {
        let w = flatten_values(clients[id].model.params());
        if n == 0 {
            mean = w;
        } else {
            let inv = 1.0 / (n + 1) as f64;
            mean.iter_mut().zip(&w).for_each(|(m, x)| *m += (x - *m) * inv);
        }
        transcript.record(round, id, MessageKind::AggregateUpload, mean.len());
    }
    for c in clients.iter_mut() {
        load_values(c.model.params_mut(), &mean).expect("all clients share one architecture");
        transcript.record(round, c.id, MessageKind::AggregateBroadcast, mean.len());
    }
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    pub mean: f64,
}

/// Each client's accuracy on its own test shard with its head and tail and
/// the shared encoder; the mean is unweighted.
pub fn evaluate(models: &[&ClientModel], encoder: &Encoder, dataset: &Dataset, shards: &[ClientShard]) -> Result<Evaluation> {
    if models.len() != shards.len() || models.is_empty() {
        return Err(Error::Input(format!(
            "{} models for {} shards",
            models.len(),
            shards.len()
        )));
    }
    let per_client = models
        .par_iter()
        .zip(shards)
        .map(|(model, shard)| {
            if shard.test.is_empty() {
                return Err(Error::Input(format!("client {} has an empty test shard", shard.client_id)));
            }
            let (x, y) = dataset.gather(&shard.test);
            let pred = predict(model, encoder, &x)?;
            let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
            Ok(hits as f64 / y.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
    Ok(Evaluation { per_client, mean })
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub metrics: Vec<MetricsRecord>,
    pub transcript: Transcript,
}

/// Initial client and server states, as `run_training` would create them.
pub fn init_states(config: &RoundConfig, shards: &[ClientShard], encoder: Encoder) -> Result<(Vec<ClientState>, ServerState)> {
    config.validate()?;
    if shards.len() != config.clients {
        return Err(Error::Config(format!(
            "{} shards for M = {} clients",
            shards.len(),
            config.clients
        )));
    }
    let clients = shards
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.client_id != i {
                return Err(Error::Config(format!("shard {i} belongs to client {}", s.client_id)));
            }
            ClientState::new(encoder.dims, s.clone(), config.client_optimizer, config.client_lr, config.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clients, ServerState::new(encoder)))
}

pub fn run_training(config: &RoundConfig, dataset: &Dataset, shards: &[ClientShard], encoder: Encoder) -> Result<TrainingRun> {
    run_training_with(config, dataset, shards, encoder, 0)
}

/// As [`run_training`], running the σ_g² probe after every round `t` with
/// `(t + 1) % probe_every == 0`. The probe uses the mean of all clients'
/// head and tail weights.
pub fn run_training_with(
    config: &RoundConfig,
    dataset: &Dataset,
    shards: &[ClientShard],
    encoder: Encoder,
    probe_every: usize,
) -> Result<TrainingRun> {
    run_training_observed(config, dataset, shards, encoder, probe_every, |_| Ok(()))
}

/// State visible to an observer after a round completes.
pub struct RoundView<'a> {
    pub round: usize,
    pub clients: &'a [ClientState],
    pub server: &'a ServerState,
    pub record: &'a MetricsRecord,
}

/// As [`run_training_with`], calling `observe` after every round.
pub fn run_training_observed<F>(
    config: &RoundConfig,
    dataset: &Dataset,
    shards: &[ClientShard],
    encoder: Encoder,
    probe_every: usize,
    mut observe: F,
) -> Result<TrainingRun>
where
    F: FnMut(&RoundView<'_>) -> Result<()>,
{
    let (mut clients, mut server) = init_states(config, shards, encoder)?;
    let mut transcript = Transcript::default();
    let mut metrics = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let start = Instant::now();
        server.round = t;
        let sampled = sample_clients(config.clients, config.sample_ratio, t, config.seed)?;
        let snapshot = server.encoder.clone();
        let rounds: Vec<ClientRound> = clients
            .par_iter_mut()
            .filter(|c| sampled.binary_search(&c.id).is_ok())
            .map(|c| client_round(c, &snapshot, dataset, config, t))
            .collect::<Result<Vec<_>>>()?;

        let mut losses = Vec::with_capacity(rounds.len());
        for r in rounds {
            transcript.extend(r.events);
            losses.push(r.losses.iter().sum::<f64>() / r.losses.len() as f64);
            server.store_gradient(t, r.client, config.local_steps, r.gradient)?;
        }
        server_update(&mut server, &sampled, config.server_lr_at(t))?;

        let aggregated = t % config.fedround == 0;
        if aggregated {
            aggregate_clients(&mut clients, &sampled, &mut transcript, t);
        }

        let models: Vec<&ClientModel> = clients.iter().map(|c| &c.model).collect();
        let eval = evaluate(&models, &server.encoder, dataset, shards)?;
        let sigma_g2 = if probe_every > 0 && (t + 1) % probe_every == 0 {
            let probe_model = mean_model(&clients);
            let gv = estimate_sigma_g(&probe_model, &server.encoder, dataset, shards)?;
            Some((gv.mean, gv.max))
        } else {
            None
        };
        let (bytes_up, bytes_down) = transcript.round_bytes(t);
        metrics.push(MetricsRecord {
            round: t,
            participants: sampled.len(),
            mean_train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            max_train_loss: losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean_test_accuracy: eval.mean,
            sigma_g2,
            bytes_up,
            bytes_down,
            aggregated,
            wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        observe(&RoundView {
            round: t,
            clients: &clients,
            server: &server,
            record: metrics.last().expect("pushed above"),
        })?;
    }
    Ok(TrainingRun {
        clients,
        server,
        metrics,
        transcript,
    })
}

/// Uniform average of every client's head and tail weights.
pub fn mean_model(clients: &[ClientState]) -> ClientModel {
    let mut model = clients[0].model.clone();
    let mut mean = flatten_values(model.params());
    for (n, c) in clients.iter().enumerate().skip(1) {
        let inv = 1.0 / (n + 1) as f64;
        let w = flatten_values(c.model.params());
        mean.iter_mut().zip(&w).for_each(|(m, x)| *m += (x - *m) * inv);
    }
    load_values(model.params_mut(), &mean).expect("same architecture");
    model
}
