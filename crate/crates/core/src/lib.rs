//! Quantum-Train federated learning on a desk: a classically simulated
//! variational circuit generates the weights of a compact CNN through a small
//! mapping network, and clients federate only the compact circuit/mapping
//! parameters with FedAvg.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and the gradient checks use.

pub mod cnn;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod qstate;
pub mod qtmap;
pub mod scalar;
pub mod train;

pub use error::{QfedError, Result};
pub use scalar::Real;

pub type QuantumState = qstate::QuantumState<f64>;
pub type GateAngles = qstate::GateAngles<f64>;
pub type MappingModel = qtmap::MappingModel<f64>;
pub type ClassicalModel = cnn::ClassicalModel<f64>;
pub type Dataset = data::Dataset<f64>;
pub type AdamState = train::AdamState<f64>;
pub type ClientUpdate = fed::ClientUpdate<f64>;

/// Single-precision variants for memory- or speed-bound callers.
pub mod f32 {
    pub type QuantumState = crate::qstate::QuantumState<f32>;
    pub type MappingModel = crate::qtmap::MappingModel<f32>;
    pub type ClassicalModel = crate::cnn::ClassicalModel<f32>;
    pub type Dataset = crate::data::Dataset<f32>;
}
