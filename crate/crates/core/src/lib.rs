//! Federated split learning simulator.
//!
//! A model is cut into a per-client head, a server-side encoder and a
//! per-client tail. Clients run the head and tail; the server runs the
//! shared encoder and updates it once per round either from the exact
//! encoder gradient of each client's final local step or from a two-point
//! SPSA estimate of it.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod rng;
pub mod split;
pub mod tensor;
pub mod transcript;
pub mod zo;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
