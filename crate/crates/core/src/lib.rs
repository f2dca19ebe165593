//! Federated learning orchestration.
//!
//! A strategy-pluggable round engine, a framed binary protocol between server
//! and clients, a client runtime with a self-contained trainer, dataset
//! partitioners, and network/compute heterogeneity simulators.

pub mod client;
mod codec;

pub mod data;
pub mod local;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod server;
pub mod sim;
pub mod strategy;
pub mod tensor;
pub mod transport;

pub use codec::CodecError;
pub use protocol::{ConfigMap, ConfigValue, DisconnectReason, Message};
pub use rng::SeededRng;
pub use tensor::{DType, Tensor, TensorData, Weights};
