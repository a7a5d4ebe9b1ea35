//! Round protocol, aggregation, evaluation and the FedAvg baseline.

use fedsplit::data::{generate_synthetic, partition, ClientShard, Dataset, PartitionKind, PartitionSpec};
use fedsplit::federation::*;
use fedsplit::nn::{finite_difference_grad, Optimizer, OptimizerKind};
use fedsplit::rng::{domain, stream};
use fedsplit::split::{full_gradient, full_loss, predict, ClientModel, Encoder, ModelDims};
use fedsplit::tensor::{flatten_values, relative_error};
use fedsplit::transcript::MessageKind;
use fedsplit::zo::{zo_estimate, ZoConfig};

fn setup(clients: usize, seed: u64) -> (Dataset, Vec<ClientShard>, Encoder) {
    let data = generate_synthetic(80 * clients, 4, 3.0, seed).unwrap();
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        clients,
        seed,
        test_fraction: 0.25,
    };
    let shards = partition(&data, &spec).unwrap();
    let encoder = Encoder::init(ModelDims::desk_scale(4), seed).unwrap();
    (data, shards, encoder)
}

fn config(clients: usize) -> RoundConfig {
    RoundConfig {
        rounds: 4,
        clients,
        sample_ratio: 0.5,
        local_steps: 3,
        client_lr: 3e-3,
        server_lr: 1e-2,
        fedround: 2,
        batch_size: 16,
        seed: 11,
        ..RoundConfig::default()
    }
}

fn weights(run: &TrainingRun) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = run.clients.iter().map(|c| flatten_values(c.model.params())).collect();
    out.push(run.server.encoder.flat_values());
    out
}

#[test]
fn sampling_sizes_and_determinism() {
    assert_eq!(sample_clients(7, 1.0, 3, 0).unwrap(), (0..7).collect::<Vec<_>>());
    let s = sample_clients(100, 0.1, 0, 5).unwrap();
    assert_eq!(s.len(), 10);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s, sample_clients(100, 0.1, 0, 5).unwrap());
    let differing = (1..20).filter(|&t| sample_clients(100, 0.1, t, 5).unwrap() != s).count();
    assert!(differing >= 18);
    assert!(sample_clients(4, 0.1, 0, 0).unwrap_err().is_config());
    assert!(sample_clients(4, 0.0, 0, 0).unwrap_err().is_config());
}

#[test]
fn config_validation_and_lr_schedule() {
    let mut c = config(4);
    c.sample_ratio = 0.0;
    assert!(c.validate().unwrap_err().is_config());
    let mut c = config(4);
    c.local_steps = 0;
    assert!(c.validate().is_err());
    let mut c = config(4);
    c.fedround = 0;
    assert!(c.validate().is_err());
    let mut c = config(4);
    c.server_lr = 0.8;
    c.server_lr_decay = 0.5;
    c.server_lr_decay_every = 10;
    assert_eq!(c.server_lr_at(9), 0.8);
    assert_eq!(c.server_lr_at(10), 0.4);
    assert_eq!(c.server_lr_at(25), 0.2);
}

#[test]
fn zero_rounds_leave_initial_state() {
    let (data, shards, enc) = setup(4, 1);
    let mut cfg = config(4);
    cfg.rounds = 0;
    let run = run_training(&cfg, &data, &shards, enc.clone()).unwrap();
    assert!(run.metrics.is_empty());
    assert!(run.transcript.events.is_empty());
    let (clients, server) = init_states(&cfg, &shards, enc).unwrap();
    assert_eq!(run.server.encoder, server.encoder);
    for (a, b) in run.clients.iter().zip(&clients) {
        assert_eq!(a.model, b.model);
    }
}

#[test]
fn zero_learning_rates_store_the_initial_gradient() {
    let (data, shards, enc) = setup(2, 2);
    let cfg = RoundConfig {
        client_lr: 0.0,
        server_lr: 0.0,
        local_steps: 1,
        ..config(2)
    };
    let (mut clients, _) = init_states(&cfg, &shards, enc.clone()).unwrap();
    let before = clients[0].model.clone();
    let batch = clients[0].sampler.clone().next_batch(cfg.batch_size);
    let mut scratch = enc.clone();
    let step = local_step(&mut clients[0], &mut scratch, &data, &cfg, 0, 1).unwrap();
    assert_eq!(flatten_values(clients[0].model.params()), flatten_values(before.params()));
    assert_eq!(scratch.flat_values(), enc.flat_values());

    let (x, y) = data.gather(&batch);
    let mut model = before.clone();
    let mut e = enc.clone();
    full_gradient(&mut model, &mut e, &x, &y).unwrap();
    assert_eq!(step.server_gradient.unwrap(), e.flat_grads());

    let run = run_training(&RoundConfig { rounds: 3, ..cfg }, &data, &shards, enc.clone()).unwrap();
    assert_eq!(run.server.encoder, enc);
}

#[test]
fn option_one_gradient_matches_finite_differences() {
    let (data, shards, enc) = setup(2, 3);
    let cfg = RoundConfig {
        local_steps: 2,
        ..config(2)
    };
    let (mut clients, _) = init_states(&cfg, &shards, enc.clone()).unwrap();
    let mut scratch = enc.clone();
    let first = local_step(&mut clients[1], &mut scratch, &data, &cfg, 0, 1).unwrap();
    assert!(first.server_gradient.is_none());

    let model = clients[1].model.clone();
    let batch = clients[1].sampler.clone().next_batch(cfg.batch_size);
    let last = local_step(&mut clients[1], &mut scratch, &data, &cfg, 0, 2).unwrap();
    let stored = last.server_gradient.unwrap();

    let (x, y) = data.gather(&batch);
    let mut probe = enc.clone();
    let fd = finite_difference_grad(
        |w| {
            probe.load_flat(w)?;
            full_loss(&model, &probe, &x, &y)
        },
        &enc.flat_values(),
        1e-6,
    )
    .unwrap();
    let err = relative_error(&stored, &fd);
    assert!(err <= 1e-5, "relative error {err:e}");
}

#[test]
fn option_two_gradient_is_the_spsa_formula() {
    let (data, shards, enc) = setup(2, 4);
    let cfg = RoundConfig {
        local_steps: 1,
        method: Method::Ptzo,
        zo: ZoConfig {
            epsilon: 1e-3,
            num_directions: 3,
        },
        ..config(2)
    };
    let round = 6;
    let (mut clients, _) = init_states(&cfg, &shards, enc.clone()).unwrap();
    let model = clients[0].model.clone();
    let batch = clients[0].sampler.clone().next_batch(cfg.batch_size);
    let mut scratch = enc.clone();
    let step = local_step(&mut clients[0], &mut scratch, &data, &cfg, round, 1).unwrap();
    assert_eq!(scratch.flat_values(), enc.flat_values());

    let (x, y) = data.gather(&batch);
    let mut probe = enc.clone();
    let mut w = enc.flat_values();
    let mut rng = stream(cfg.seed, domain::ZO_DIRECTION, &[round as u64, 0]);
    let expected = zo_estimate(
        |w| {
            probe.load_flat(w)?;
            full_loss(&model, &probe, &x, &y)
        },
        &mut w,
        &cfg.zo,
        &mut rng,
    )
    .unwrap();
    assert_eq!(step.server_gradient.unwrap(), expected);
    let zo_kinds = step
        .events
        .iter()
        .filter(|e| matches!(e.kind, MessageKind::ZoSmashedPlus | MessageKind::ZoLossMinus))
        .count();
    assert_eq!(zo_kinds, 6);
}

#[test]
fn gradients_are_stored_only_at_the_final_step() {
    let (data, shards, enc) = setup(6, 5);
    for method in [Method::Pit, Method::Ptzo] {
        let cfg = RoundConfig {
            method,
            local_steps: 4,
            ..config(6)
        };
        let run = run_training(&cfg, &data, &shards, enc.clone()).unwrap();
        assert_eq!(run.server.storage_log.len(), cfg.rounds * 3);
        assert!(run.server.storage_log.iter().all(|s| s.step == cfg.local_steps));
        assert!(run.server.stored.is_empty());
        for t in 0..cfg.rounds {
            let ids: Vec<usize> = run
                .server
                .storage_log
                .iter()
                .filter(|s| s.round == t)
                .map(|s| s.client)
                .collect();
            assert_eq!(ids, sample_clients(6, 0.5, t, cfg.seed).unwrap());
        }
    }
}

#[test]
fn runs_are_bit_identical() {
    let (data, shards, enc) = setup(4, 6);
    for method in [Method::Pit, Method::Ptzo] {
        let cfg = RoundConfig { method, ..config(4) };
        let a = run_training_with(&cfg, &data, &shards, enc.clone(), 2).unwrap();
        let b = run_training_with(&cfg, &data, &shards, enc.clone(), 2).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.transcript.to_text(), b.transcript.to_text());
        assert_eq!(weights(&a), weights(&b));
        assert_eq!(a.metrics.iter().filter(|r| r.sigma_g2.is_some()).count(), 2);
    }
}

#[test]
fn non_participants_are_untouched_outside_aggregation() {
    let (data, shards, enc) = setup(6, 7);
    let cfg = RoundConfig {
        fedround: 5,
        ..config(6)
    };
    let one = run_training(&RoundConfig { rounds: 1, ..cfg }, &data, &shards, enc.clone()).unwrap();
    let two = run_training(&RoundConfig { rounds: 2, ..cfg }, &data, &shards, enc).unwrap();
    let sampled = sample_clients(6, 0.5, 1, cfg.seed).unwrap();
    for id in 0..6 {
        let same = one.clients[id].model == two.clients[id].model;
        assert_eq!(same, !sampled.contains(&id), "client {id}");
    }
}

#[test]
fn transcript_matches_message_formula() {
    let (data, shards, enc) = setup(6, 8);
    let dims = enc.dims;
    let feature = 16 * dims.tokens * dims.width;
    let client_params = dims.head_param_count() + dims.tail_param_count();
    for method in [Method::Pit, Method::Ptzo] {
        let cfg = RoundConfig { method, ..config(6) };
        let run = run_training(&cfg, &data, &shards, enc.clone()).unwrap();
        let (m, k) = (3, cfg.local_steps);
        for t in 0..cfg.rounds {
            let spec_kinds = [MessageKind::Feature, MessageKind::Smashed, MessageKind::FeatureGrad];
            let core: usize = spec_kinds.iter().map(|&kd| run.transcript.bytes_of_kind(t, kd)).sum();
            assert_eq!(core, 8 * m * k * 3 * feature);
            assert_eq!(run.transcript.bytes_of_kind(t, MessageKind::SmashedGrad), 8 * m * k * feature);
            let zo: usize = [
                MessageKind::ZoSmashedPlus,
                MessageKind::ZoSmashedMinus,
                MessageKind::ZoLossPlus,
                MessageKind::ZoLossMinus,
            ]
            .iter()
            .map(|&kd| run.transcript.bytes_of_kind(t, kd))
            .sum();
            let expected_zo = if method == Method::Ptzo { 8 * m * (2 * feature + 2) } else { 0 };
            assert_eq!(zo, expected_zo);
            let agg = run.transcript.bytes_of_kind(t, MessageKind::AggregateUpload)
                + run.transcript.bytes_of_kind(t, MessageKind::AggregateBroadcast);
            let expected_agg = if t % cfg.fedround == 0 { 8 * (m + 6) * client_params } else { 0 };
            assert_eq!(agg, expected_agg);
            let (up, down) = run.transcript.round_bytes(t);
            assert_eq!(up + down, core + run.transcript.bytes_of_kind(t, MessageKind::SmashedGrad) + zo + agg);
            assert_eq!((run.metrics[t].bytes_up, run.metrics[t].bytes_down), (up, down));
        }
    }
}

#[test]
fn aggregation_of_equal_weights_is_exact() {
    let (_, shards, enc) = setup(3, 9);
    let (mut clients, _) = init_states(&config(3), &shards, enc).unwrap();
    let shared = clients[0].model.clone();
    for c in clients.iter_mut() {
        c.model = shared.clone();
    }
    let mut tr = Default::default();
    aggregate_clients(&mut clients, &[0, 1, 2], &mut tr, 0);
    assert!(clients.iter().all(|c| c.model == shared));
}

#[test]
fn aggregation_of_two_is_the_midpoint_broadcast_to_all() {
    let (_, shards, enc) = setup(4, 10);
    let (mut clients, _) = init_states(&config(4), &shards, enc).unwrap();
    let a = flatten_values(clients[1].model.params());
    let b = flatten_values(clients[3].model.params());
    let mut tr = Default::default();
    aggregate_clients(&mut clients, &[3, 1], &mut tr, 0);
    for c in &clients {
        let w = flatten_values(c.model.params());
        for ((wi, ai), bi) in w.iter().zip(&a).zip(&b) {
            assert!((wi - (ai + bi) / 2.0).abs() <= 1e-15 * (1.0 + ai.abs() + bi.abs()));
        }
    }
}

#[test]
fn evaluation_edge_cases() {
    let (data, mut shards, enc) = setup(3, 11);
    let model = ClientModel::init(enc.dims, 0, 0).unwrap();
    // keep only the test points this model already gets right
    for s in shards.iter_mut() {
        let (x, y) = data.gather(&s.test);
        let pred = predict(&model, &enc, &x).unwrap();
        s.test = s.test.iter().zip(pred.iter().zip(&y)).filter(|(_, (p, t))| p == t).map(|(i, _)| *i).collect();
        assert!(!s.test.is_empty());
    }
    let eval = evaluate(&[&model, &model, &model], &enc, &data, &shards).unwrap();
    assert_eq!(eval.mean, 1.0);

    shards[1].test.clear();
    assert!(evaluate(&[&model, &model, &model], &enc, &data, &shards).is_err());
}

#[test]
fn untrained_model_is_at_chance_and_mean_is_order_free() {
    let data = generate_synthetic(4000, 4, 0.0, 12).unwrap();
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        clients: 4,
        seed: 12,
        test_fraction: 0.5,
    };
    let shards = partition(&data, &spec).unwrap();
    let enc = Encoder::init(ModelDims::desk_scale(4), 12).unwrap();
    let models: Vec<ClientModel> = (0..4).map(|i| ClientModel::init(enc.dims, 12, i).unwrap()).collect();
    let refs: Vec<&ClientModel> = models.iter().collect();
    let eval = evaluate(&refs, &enc, &data, &shards).unwrap();
    // 2000 test points, binomial sd ≈ 0.0097
    assert!((eval.mean - 0.25).abs() < 0.04, "{}", eval.mean);

    let order = [2, 0, 3, 1];
    let permuted_models: Vec<&ClientModel> = order.iter().map(|&i| &models[i]).collect();
    let permuted_shards: Vec<ClientShard> = order.iter().map(|&i| shards[i].clone()).collect();
    let other = evaluate(&permuted_models, &enc, &data, &permuted_shards).unwrap();
    assert!((other.mean - eval.mean).abs() < 1e-15);
}

#[test]
fn single_client_fedavg_is_centralized_training() {
    let (data, shards, enc) = setup(1, 13);
    let cfg = RoundConfig {
        clients: 1,
        sample_ratio: 1.0,
        local_steps: 3,
        rounds: 4,
        batch_size: 1000,
        ..config(1)
    };
    let run = fedavg_baseline(&cfg, &data, &shards, enc.clone()).unwrap();

    let (x, y) = data.gather(&{
        let mut t = shards[0].train.clone();
        t.sort_unstable();
        t
    });
    // zero rounds return the baseline's starting point
    let start = fedavg_baseline(&RoundConfig { rounds: 0, ..cfg }, &data, &shards, enc.clone()).unwrap();
    let mut client = start.global.client;
    let mut encoder = enc;
    for _ in 0..cfg.rounds {
        let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.client_lr).unwrap();
        client.params_mut().into_iter().for_each(|p| p.reset_state());
        encoder.params_mut().into_iter().for_each(|p| p.reset_state());
        for _ in 0..cfg.local_steps {
            full_gradient(&mut client, &mut encoder, &x, &y).unwrap();
            let mut params = client.head.params_mut();
            params.extend(encoder.params_mut());
            params.extend(client.tail.params_mut());
            opt.step(params);
        }
    }
    assert_eq!(flatten_values(run.global.client.params()), flatten_values(client.params()));
    assert_eq!(run.global.encoder.flat_values(), encoder.flat_values());
}

#[test]
fn fedavg_with_identical_shards_matches_one_client() {
    let (data, shards, enc) = setup(1, 14);
    let cfg = RoundConfig {
        clients: 1,
        sample_ratio: 1.0,
        rounds: 1,
        batch_size: 1000,
        ..config(1)
    };
    let single = fedavg_baseline(&cfg, &data, &shards, enc.clone()).unwrap();
    let copies: Vec<ClientShard> = (0..3)
        .map(|i| ClientShard {
            client_id: i,
            ..shards[0].clone()
        })
        .collect();
    let many = fedavg_baseline(&RoundConfig { clients: 3, ..cfg }, &data, &copies, enc).unwrap();
    assert_eq!(single.global.flat_values(), many.global.flat_values());
}

#[test]
fn mismatched_shards_are_config_errors() {
    let (data, shards, enc) = setup(3, 15);
    assert!(run_training(&config(4), &data, &shards, enc.clone()).unwrap_err().is_config());
    assert!(fedavg_baseline(&config(4), &data, &shards, enc).unwrap_err().is_config());
}
