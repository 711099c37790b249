//! Laboratory for subnetwork semirobustness on small feed-forward networks.
//!
//! The crate trains dense networks with its own reverse-mode autodiff, attacks
//! them with FGSM/PGD, measures how robust internal layers are through linear
//! probes, estimates class-conditional mutual information between consecutive
//! layers with a hash-based ensemble estimator, and runs the two experiment
//! protocols built on those measurements (layer-dependency thresholds and
//! linear-combination prediction from a frozen robust head).

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod lstsq;
pub mod metrics;
pub mod mi;
pub mod model;
pub mod probe;
pub mod protocols;
pub mod rng;
pub mod run;
pub mod second_order;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
