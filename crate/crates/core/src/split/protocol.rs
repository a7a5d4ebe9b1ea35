//! Messages and per-step traces exchanged across the split.
//!
//! Only [`FeatureBundle`], [`SmashedBundle`], [`SmashedGrad`] and
//! [`FeatureGrad`] cross between client and server. The `*Trace` values are
//! the activation caches each side keeps for its own backward pass; a
//! trace is bound to the (client, round, step) that produced it and is
//! rejected if paired with a message from any other step.

use crate::error::{Error, Result};
use crate::nn::{batch_cross_entropy, StackCache};
use crate::tensor::{flatten_grads, Tensor};

use super::model::{ClientModel, Encoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepTag {
    pub client_id: usize,
    pub round: usize,
    pub step: usize,
}

impl std::fmt::Display for StepTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "client {} round {} step {}",
            self.client_id, self.round, self.step
        )
    }
}

/// Intermediate feature `h`, client to server.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub tag: StepTag,
    pub h: Tensor,
}

/// Smashed feature `b = E(h)`, server to client.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedBundle {
    pub tag: StepTag,
    pub b: Tensor,
}

/// `∂L/∂b`, client to server.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedGrad {
    pub tag: StepTag,
    pub grad: Tensor,
}

/// `∂L/∂h`, server to client.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrad {
    pub tag: StepTag,
    pub grad: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    tag: StepTag,
    cache: StackCache,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    tag: StepTag,
    cache: StackCache,
}

#[derive(Debug, Clone)]
pub struct TailTrace {
    tag: StepTag,
    cache: StackCache,
    smashed_shape: Vec<usize>,
    logit_grad: Tensor,
}

fn check_tag(what: &str, trace: StepTag, message: StepTag) -> Result<()> {
    if trace == message {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "stale {what} trace: trace is from {trace}, message is from {message}"
        )))
    }
}

impl ClientModel {
    /// `h = H_i(ξ)` for a `[batch, input_dim]` minibatch.
    pub fn head_forward(&self, tag: StepTag, x: &Tensor) -> Result<(FeatureBundle, HeadTrace)> {
        if x.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Input(format!("empty minibatch for {tag}")));
        }
        let mut cache = StackCache::default();
        let h = self.head_apply(x, &mut cache)?;
        Ok((FeatureBundle { tag, h }, HeadTrace { tag, cache }))
    }

    /// Mean cross-entropy of the tail's logits on the smashed feature.
    pub fn tail_forward_loss(
        &self,
        smashed: &SmashedBundle,
        labels: &[usize],
    ) -> Result<(f64, TailTrace)> {
        let batch = smashed.b.shape().first().copied().unwrap_or(0);
        if labels.len() != batch {
            return Err(Error::Input(format!(
                "{} labels for a batch of {batch} ({})",
                labels.len(),
                smashed.tag
            )));
        }
        let mut cache = StackCache::default();
        let logits = self.tail_apply(&smashed.b, &mut cache)?;
        let (loss, logit_grad) = batch_cross_entropy(&logits, labels)?;
        Ok((
            loss,
            TailTrace {
                tag: smashed.tag,
                cache,
                smashed_shape: smashed.b.shape().to_vec(),
                logit_grad,
            },
        ))
    }

    /// Loss only, with no trace kept.
    pub fn tail_loss(&self, b: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.tail_apply(b, &mut StackCache::default())?;
        Ok(batch_cross_entropy(&logits, labels)?.0)
    }

    /// Backpropagates the tail; accumulates `∂L/∂w_T` and returns `∂L/∂b`.
    pub fn tail_backward(&mut self, trace: &TailTrace) -> Result<SmashedGrad> {
        let flat = self.tail.backward(&trace.cache, &trace.logit_grad)?;
        Ok(SmashedGrad {
            tag: trace.tag,
            grad: flat.reshape(&trace.smashed_shape)?,
        })
    }

    /// Backpropagates the head from the server's `∂L/∂h`; accumulates `∂L/∂w_H`.
    pub fn head_backward(&mut self, trace: &HeadTrace, grad: &FeatureGrad) -> Result<()> {
        check_tag("head", trace.tag, grad.tag)?;
        self.head.backward(&trace.cache, &grad.grad)?;
        Ok(())
    }
}

impl Encoder {
    /// `b = E(w_E; h)`.
    pub fn forward_features(&self, features: &FeatureBundle) -> Result<(SmashedBundle, EncoderTrace)> {
        let mut cache = StackCache::default();
        let b = self.blocks.forward(&features.h, &mut cache).map_err(|e| match e {
            Error::Shape { got, expected, .. } => Error::Protocol(format!(
                "feature from client {} in round {} has shape {got:?}, encoder expects {expected}",
                features.tag.client_id, features.tag.round
            )),
            other => other,
        })?;
        Ok((
            SmashedBundle {
                tag: features.tag,
                b,
            },
            EncoderTrace {
                tag: features.tag,
                cache,
            },
        ))
    }

    /// Smashed feature only, with no trace kept.
    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        self.blocks.forward(h, &mut StackCache::default())
    }

    /// Vector-Jacobian product through the encoder: accumulates `∂L/∂w_E`
    /// and returns `∂L/∂h`.
    pub fn vjp(&mut self, trace: &EncoderTrace, grad: &SmashedGrad) -> Result<FeatureGrad> {
        check_tag("encoder", trace.tag, grad.tag)?;
        let g = self.blocks.backward(&trace.cache, &grad.grad)?;
        Ok(FeatureGrad {
            tag: trace.tag,
            grad: g,
        })
    }
}

/// Every gradient produced by one reverse pass through the split chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainGrads {
    pub tail: Vec<f64>,
    pub smashed: Tensor,
    pub encoder: Vec<f64>,
    pub feature: Tensor,
    pub head: Vec<f64>,
}

/// Tail backward, encoder VJP, head backward. Gradients on both models are
/// zeroed first, so afterwards they hold exactly this step's gradients.
pub fn backward_chain(
    client: &mut ClientModel,
    encoder: &mut Encoder,
    head: &HeadTrace,
    enc: &EncoderTrace,
    tail: &TailTrace,
) -> Result<ChainGrads> {
    check_tag("encoder", enc.tag, tail.tag)?;
    check_tag("head", head.tag, tail.tag)?;
    client.zero_grad();
    encoder.zero_grad();
    let smashed = client.tail_backward(tail)?;
    let feature = encoder.vjp(enc, &smashed)?;
    client.head_backward(head, &feature)?;
    Ok(ChainGrads {
        tail: flatten_grads(client.tail_params()),
        smashed: smashed.grad,
        encoder: encoder.flat_grads(),
        feature: feature.grad,
        head: flatten_grads(client.head_params()),
    })
}

/// Loss of the assembled model `T(E(H(x)))`.
pub fn full_loss(client: &ClientModel, encoder: &Encoder, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let h = client.head_apply(x, &mut StackCache::default())?;
    let b = encoder.apply(&h)?;
    client.tail_loss(&b, labels)
}

/// Loss and gradient of the assembled model, gradient ordered
/// `(w_H, w_E, w_T)`. Leaves the gradients of both models populated.
pub fn full_gradient(
    client: &mut ClientModel,
    encoder: &mut Encoder,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let tag = StepTag {
        client_id: 0,
        round: 0,
        step: 0,
    };
    let (fb, ht) = client.head_forward(tag, x)?;
    let (sb, et) = encoder.forward_features(&fb)?;
    let (loss, tt) = client.tail_forward_loss(&sb, labels)?;
    let g = backward_chain(client, encoder, &ht, &et, &tt)?;
    let mut flat = g.head;
    flat.extend(g.encoder);
    flat.extend(g.tail);
    Ok((loss, flat))
}

/// Predicted classes of the assembled model.
pub fn predict(client: &ClientModel, encoder: &Encoder, x: &Tensor) -> Result<Vec<usize>> {
    let h = client.head_apply(x, &mut StackCache::default())?;
    let b = encoder.apply(&h)?;
    let logits = client.tail_apply(&b, &mut StackCache::default())?;
    let classes = client.dims.classes;
    Ok(logits.data().chunks(classes).map(crate::nn::argmax).collect())
}
