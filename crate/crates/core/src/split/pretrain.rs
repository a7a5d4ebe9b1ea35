use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Optimizer, OptimizerKind};
use crate::rng::{domain, stream};

use super::model::{ClientModel, Encoder, ModelDims};
use super::protocol::{full_gradient, predict};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-2,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    /// The throwaway head and tail trained alongside the encoder.
    pub scaffold: ClientModel,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Centralized Adam training of a full head + encoder + tail model on
/// public data. The encoder starts from the same seeded initialization
/// that a randomly initialized federation would use.
pub fn pretrain_encoder(
    dims: ModelDims,
    public: &Dataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if public.is_empty() {
        return Err(Error::Config("pre-training needs a non-empty public dataset".into()));
    }
    let mut encoder = Encoder::init(dims, seed)?;
    let mut scaffold = ClientModel::init_from(dims, seed, domain::PRETRAIN, 0)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), config.lr)?;
    let mut rng = stream(seed, domain::PRETRAIN, &[1]);

    let n = public.len();
    let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (x, y) = public.gather(chunk);
            let (loss, _) = full_gradient(&mut scaffold, &mut encoder, &x, &y)?;
            final_loss = loss;
            let mut params = scaffold.params_mut();
            params.extend(encoder.params_mut());
            opt.step(params);
        }
    }

    // hand over bare weights
    for p in encoder.params_mut() {
        p.zero_grad();
        p.reset_state();
    }
    let predicted = predict(&scaffold, &encoder, &public.features)?;
    let correct = predicted.iter().zip(&public.labels).filter(|(a, b)| a == b).count();
    Ok(PretrainOutcome {
        encoder,
        scaffold,
        train_accuracy: correct as f64 / n as f64,
        final_loss,
    })
}
