use std::collections::BTreeSet;

use crate::data::{generate_synthetic, partition, PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{metrics_csv, run_training, server_update, RoundConfig, ServerState};
use crate::nn::{finite_difference_grad, Optimizer, OptimizerKind};
use crate::rng::{domain, stream};
use crate::split::{full_gradient, full_loss, ClientModel, Encoder, ModelDims};
use crate::tensor::{dot, flatten_values, load_values, relative_error, Tensor};
use crate::zo::{sample_direction, zo_estimate, ZoConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn ensure(ok: bool, detail: String) -> Result<String> {
    if ok {
        Ok(detail)
    } else {
        Err(Error::Input(detail))
    }
}

fn chain_gradient() -> Result<String> {
    let dims = ModelDims::desk_scale(4);
    let mut client = ClientModel::init(dims, 1, 0)?;
    let mut encoder = Encoder::init(dims, 1)?;
    let x = Tensor::randn(&[3, 64], 1.0, &mut stream(1, domain::PROBE, &[0]));
    let y = [0, 3, 1];
    let (_, analytic) = full_gradient(&mut client, &mut encoder, &x, &y)?;
    let head = dims.head_param_count();
    let enc = dims.encoder_param_count();
    let mut w = flatten_values(client.head_params());
    w.extend(encoder.flat_values());
    w.extend(flatten_values(client.tail_params()));
    let fd = finite_difference_grad(
        |v| {
            load_values(client.head.params_mut(), &v[..head])?;
            encoder.load_flat(&v[head..head + enc])?;
            load_values(client.tail.params_mut(), &v[head + enc..])?;
            full_loss(&client, &encoder, &x, &y)
        },
        &w,
        1e-6,
    )?;
    let err = relative_error(&analytic, &fd);
    ensure(err <= 1e-5, format!("relative error {err:.2e} over {} weights", w.len()))
}

fn zo_quadratic() -> Result<String> {
    let w0 = [3.0, -4.0];
    let mut w = w0.to_vec();
    let cfg = ZoConfig {
        epsilon: 0.5,
        num_directions: 1,
    };
    let g = zo_estimate(|v| Ok(0.5 * dot(v, v)), &mut w, &cfg, &mut stream(2, domain::ZO_DIRECTION, &[]))?;
    let z = sample_direction(2, &mut stream(2, domain::ZO_DIRECTION, &[])).z;
    let p = dot(z.data(), &w0);
    let err = g.iter().zip(z.data()).map(|(a, b)| (a - p * b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-10 && w == w0, format!("max deviation {err:.2e}"))
}

fn partitions() -> Result<String> {
    let data = generate_synthetic(500, 5, 2.0, 3)?;
    let kinds = [
        PartitionKind::Iid,
        PartitionKind::Dirichlet { alpha: 0.5 },
        PartitionKind::Pathological { classes_per_client: 2 },
    ];
    let mut trials = 0;
    for kind in kinds {
        for seed in 0..5 {
            let spec = PartitionSpec {
                kind,
                clients: 5,
                seed,
                test_fraction: 0.2,
            };
            let shards = partition(&data, &spec)?;
            let mut seen = BTreeSet::new();
            for s in &shards {
                if !s.train.iter().all(|i| seen.insert(*i)) {
                    return Err(Error::Partition(format!("{} seed {seed}: overlapping shards", spec.describe())));
                }
            }
            if let PartitionKind::Pathological { classes_per_client } = kind {
                for s in &shards {
                    let labels: BTreeSet<usize> = s.train.iter().map(|&i| data.labels[i]).collect();
                    if labels.len() != classes_per_client {
                        return Err(Error::Partition(format!("client {} holds {} classes", s.client_id, labels.len())));
                    }
                }
            }
            trials += 1;
        }
    }
    Ok(format!("{trials} partitions disjoint"))
}

fn server_cancellation() -> Result<String> {
    let mut s = ServerState::new(Encoder::init(ModelDims::desk_scale(4), 4)?);
    let before = s.encoder.flat_values();
    let g: Vec<f64> = (0..before.len()).map(|i| (i as f64).sin()).collect();
    s.store_gradient(0, 0, 1, g.clone())?;
    s.store_gradient(0, 1, 1, g.iter().map(|x| -x).collect())?;
    server_update(&mut s, &[0, 1], 0.5)?;
    ensure(s.encoder.flat_values() == before, "g and -g cancel".into())
}

fn centralized_equivalence() -> Result<String> {
    let data = generate_synthetic(200, 4, 3.0, 5)?;
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        clients: 1,
        seed: 5,
        test_fraction: 0.2,
    };
    let shards = partition(&data, &spec)?;
    let dims = ModelDims::desk_scale(4);
    let encoder = Encoder::init(dims, 5)?;
    let cfg = RoundConfig {
        rounds: 5,
        clients: 1,
        sample_ratio: 1.0,
        local_steps: 1,
        fedround: 1,
        batch_size: usize::MAX,
        client_lr: 1e-3,
        server_lr: 1e-2,
        seed: 5,
        ..RoundConfig::default()
    };
    let run = run_training(&cfg, &data, &shards, encoder.clone())?;

    let mut client = ClientModel::init(dims, 5, 0)?;
    let mut enc = encoder;
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.client_lr)?;
    let (x, y) = data.gather(&shards[0].train);
    for _ in 0..cfg.rounds {
        let (_, g) = full_gradient(&mut client, &mut enc, &x, &y)?;
        opt.step(client.params_mut());
        let head = dims.head_param_count();
        let step: Vec<f64> = g[head..head + dims.encoder_param_count()].to_vec();
        let w: Vec<f64> = enc.flat_values().iter().zip(&step).map(|(w, g)| w - cfg.server_lr * g).collect();
        enc.load_flat(&w)?;
    }
    let mut a = flatten_values(run.clients[0].model.params());
    a.extend(run.server.encoder.flat_values());
    let mut b = flatten_values(client.params());
    b.extend(enc.flat_values());
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-9, format!("max weight difference {diff:.2e} after {} steps", cfg.rounds))
}

fn determinism() -> Result<String> {
    let data = generate_synthetic(240, 4, 3.0, 6)?;
    let spec = PartitionSpec {
        kind: PartitionKind::Dirichlet { alpha: 0.5 },
        clients: 4,
        seed: 6,
        test_fraction: 0.2,
    };
    let shards = partition(&data, &spec)?;
    let encoder = Encoder::init(ModelDims::desk_scale(4), 6)?;
    let cfg = RoundConfig {
        rounds: 3,
        clients: 4,
        sample_ratio: 0.5,
        local_steps: 2,
        fedround: 2,
        batch_size: 8,
        client_lr: 1e-3,
        server_lr: 1e-2,
        seed: 6,
        ..RoundConfig::default()
    };
    let a = run_training(&cfg, &data, &shards, encoder.clone())?;
    let b = run_training(&cfg, &data, &shards, encoder)?;
    let same = metrics_csv(&a.metrics) == metrics_csv(&b.metrics)
        && a.transcript == b.transcript
        && a.server.encoder.flat_values() == b.server.encoder.flat_values();
    ensure(same, "two seeded runs agree byte for byte".into())
}

/// Quick oracle checks over the main components.
pub fn self_check() -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn() -> Result<String>); 6] = [
        ("split chain gradient vs finite differences", chain_gradient),
        ("spsa on a quadratic", zo_quadratic),
        ("partition invariants", partitions),
        ("server update cancellation", server_cancellation),
        ("single-client run vs centralized training", centralized_equivalence),
        ("seeded determinism", determinism),
    ];
    checks
        .iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
