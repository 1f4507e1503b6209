//! Single-process simulator for federated multi-task learning with a shared
//! frozen encoder, per-client channel-pruned task predictors and
//! backbone-assisted heterogeneous aggregation, together with FedAvg,
//! FedDrop and overlap-only baselines and resource ledgers.

pub mod accounting;
pub mod container;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
