//! Empirical estimators of smoothness, local gradient variance and
//! inter-client gradient dissimilarity at a fixed model.

use rand::seq::index::sample;
use rayon::prelude::*;

use super::dataset::Dataset;
use super::partition::ClientShard;
use crate::error::{Error, Result};
use crate::rng::{domain, stream};
use crate::split::{full_gradient, ClientModel, Encoder};
use crate::tensor::norm;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Full-batch gradient of the mean loss over `indices`, ordered `(w_H, w_E, w_T)`.
pub fn shard_gradient(
    client: &ClientModel,
    encoder: &Encoder,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::Partition("gradient requested on an empty shard".into()));
    }
    let (x, y) = dataset.gather(indices);
    let mut c = client.clone();
    let mut e = encoder.clone();
    Ok(full_gradient(&mut c, &mut e, &x, &y)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVariance {
    /// `‖∇f_i(w) − ∇F(w)‖²` per client, in shard order.
    pub deviations: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

/// Squared distance of each client's full-batch gradient from the uniform
/// average of all client gradients.
pub fn estimate_sigma_g(
    client: &ClientModel,
    encoder: &Encoder,
    dataset: &Dataset,
    shards: &[ClientShard],
) -> Result<GlobalVariance> {
    if shards.is_empty() {
        return Err(Error::Partition("no shards to probe".into()));
    }
    let grads = shards
        .par_iter()
        .map(|s| {
            shard_gradient(client, encoder, dataset, &s.train)
                .map_err(|e| e.in_context(format_args!("client {}", s.client_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = grads.len() as f64;
    let mut global = vec![0.0; grads[0].len()];
    for g in &grads {
        global.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    global.iter_mut().for_each(|a| *a /= m);
    let deviations: Vec<f64> = grads.iter().map(|g| sq_dist(g, &global)).collect();
    let max = deviations.iter().cloned().fold(0.0, f64::max);
    let mean = deviations.iter().sum::<f64>() / m;
    Ok(GlobalVariance {
        deviations,
        max,
        mean,
    })
}

/// Mean of `‖∇f_i(w; ξ) − ∇f_i(w)‖²` over `batches` minibatches of
/// `batch_size` drawn without replacement from the shard.
pub fn estimate_sigma_l(
    client: &ClientModel,
    encoder: &Encoder,
    dataset: &Dataset,
    shard: &ClientShard,
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    let n = shard.train.len();
    if batches == 0 || batch_size == 0 {
        return Err(Error::Input("sigma_l needs at least one non-empty batch".into()));
    }
    if batch_size > n {
        return Err(Error::Input(format!(
            "batch of {batch_size} exceeds shard of {n} (client {})",
            shard.client_id
        )));
    }
    let full = shard_gradient(client, encoder, dataset, &shard.train)?;
    let mut rng = stream(seed, domain::PROBE, &[shard.client_id as u64]);
    let mut total = 0.0;
    for _ in 0..batches {
        // sorted so that a full-size batch reproduces the full gradient exactly
        let mut pick: Vec<usize> = sample(&mut rng, n, batch_size).into_iter().map(|i| shard.train[i]).collect();
        pick.sort_unstable();
        let g = shard_gradient(client, encoder, dataset, &pick)?;
        total += sq_dist(&g, &full);
    }
    Ok(total / batches as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    /// `max ‖∇f(x) − ∇f(y)‖ / ‖x − y‖` over the usable pairs.
    pub estimate: f64,
    pub pairs_used: usize,
    /// Pairs skipped because `x == y`.
    pub skipped: usize,
}

/// Lower bound on the gradient Lipschitz constant from point pairs.
pub fn estimate_smoothness<F>(mut grad_at: F, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Smoothness>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut out = Smoothness {
        estimate: 0.0,
        pairs_used: 0,
        skipped: 0,
    };
    for (x, y) in pairs {
        let dist = sq_dist(x, y).sqrt();
        if dist == 0.0 {
            out.skipped += 1;
            continue;
        }
        let gx = grad_at(x)?;
        let gy = grad_at(y)?;
        out.estimate = out.estimate.max(sq_dist(&gx, &gy).sqrt() / dist);
        out.pairs_used += 1;
    }
    Ok(out)
}

/// Smoothness of client `shard`'s full-batch loss, probed with `pairs`
/// random pairs `(w + r·u, w + r·v)` for unit-variance Gaussian `u`, `v`
/// scaled to norm `radius`.
pub fn client_smoothness(
    client: &ClientModel,
    encoder: &Encoder,
    dataset: &Dataset,
    shard: &ClientShard,
    pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<Smoothness> {
    let mut c = client.clone();
    let mut e = encoder.clone();
    let base: Vec<f64> = {
        let mut v = crate::tensor::flatten_values(c.head_params());
        v.extend(e.flat_values());
        v.extend(crate::tensor::flatten_values(c.tail_params()));
        v
    };
    let mut rng = stream(seed, domain::PROBE, &[shard.client_id as u64, 1]);
    let offset = |rng: &mut crate::rng::SimRng| {
        let dir = crate::zo::sample_direction(base.len(), rng).z.into_data();
        let n = norm(&dir);
        base.iter().zip(&dir).map(|(b, d)| b + radius * d / n).collect::<Vec<f64>>()
    };
    let point_pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs).map(|_| (offset(&mut rng), offset(&mut rng))).collect();
    let (x, y) = dataset.gather(&shard.train);
    let head_len = c.dims.head_param_count();
    let enc_len = c.dims.encoder_param_count();
    estimate_smoothness(
        |w| {
            crate::tensor::load_values(c.head.params_mut(), &w[..head_len])?;
            e.load_flat(&w[head_len..head_len + enc_len])?;
            crate::tensor::load_values(c.tail.params_mut(), &w[head_len + enc_len..])?;
            Ok(full_gradient(&mut c, &mut e, &x, &y)?.1)
        },
        &point_pairs,
    )
}
