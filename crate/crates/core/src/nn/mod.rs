//! Dense neural-network kernel with hand-written forward and backward passes.

mod encoder;
pub mod gradcheck;
mod layer;
mod linear;
mod loss;
mod ops;
mod optim;

pub use encoder::{EncoderBlock, EncoderCache, EncoderDims};
pub use gradcheck::finite_difference_grad;
pub use layer::{Cache, Layer, LayerSpec, Stack, StackCache};
pub use linear::Linear;
pub use loss::{argmax, batch_cross_entropy, softmax_cross_entropy};
pub use optim::{Optimizer, OptimizerKind};
