//! The head / encoder / tail decomposition and the messages that cross it.

mod checkpoint;
mod model;
mod pretrain;
mod protocol;

pub use checkpoint::Checkpoint;
pub use model::{ClientModel, Encoder, ModelDims};
pub use pretrain::{pretrain_encoder, PretrainConfig, PretrainOutcome};
pub use protocol::{
    backward_chain, full_gradient, full_loss, predict, ChainGrads, EncoderTrace, FeatureBundle,
    FeatureGrad, HeadTrace, SmashedBundle, SmashedGrad, StepTag, TailTrace,
};
