//! Personalized federated learning over spiking neural networks.
//!
//! The crate trains LIF-based and ReLU networks that share one parameter
//! layout under four regimes (personalized or plain FL, spiking or
//! conventional backbone) and instruments training with gradient-drift,
//! envelope-stationarity, spike-sparsity and synaptic-energy measurements.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod model;
pub mod numerics;
pub mod spiking;

pub use error::{Error, Result};
pub use model::{build_model, ArchitectureSpec, Backbone, LayerSpec, Model, ModelParams, Network};
pub use numerics::{ParamGrad, Tensor};
pub use spiking::{LifConfig, LifState};
pub use data::{ClientPartition, Dataset, Sample};
pub use config::ExperimentConfig;
pub use federated::{Federation, Regime, TrainConfig};
