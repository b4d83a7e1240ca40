//! Federated reliability simulator.
//!
//! - [`nn`]: dense ReLU classifier with an extractor/head split and SGD
//! - [`data`]: synthetic blobs, CIFAR-10 binary loader, Dirichlet and quantity-skew partitions, OOD sets
//! - [`fed`]: FedAvg / FedProx round engine and head fine-tuning diagnostic
//! - [`aph`]: assembled projection heads and the inference cost model
//! - [`metrics`]: F-ECE, ECE, NLL, accuracy, predictive entropy
//! - [`harness`]: config files, persisted runs and experiment suites

pub mod aph;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;

pub use aph::{AphConfig, Averaging, CostModel, HeadEnsemble, Overhead};
pub use data::{ClientData, ClientPartition, Dataset, OodMode, PartitionPlan, OOD_LABEL};
pub use error::{Error, Result};
pub use fed::{FedConfig, FederationResult, Method, RoundLog};
pub use metrics::{CalibrationReport, OodReport, PredictionSet};
pub use nn::{Matrix, ModelParams, ModelSpec, Scope};
