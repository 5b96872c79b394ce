//! Label-noise correction from per-sample overfitting dynamics.
//!
//! A primary model is trained on a noisy dataset and frozen. Each sample is
//! then overfitted individually from that frozen state, and the sequence of
//! model outputs along the way (its evolution cube) is fed to a secondary
//! evolution-to-label model that predicts the clean label. Repeating the
//! cycle gives a closed loop of super-epochs.

pub mod checkpoint;
pub mod config;
pub mod e2l;
pub mod data;
pub mod error;
pub mod evolution;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
