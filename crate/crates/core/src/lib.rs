//! Coronary artery calcium (CAC) scoring and six-class CNN classification
//! on CT volumes.
//!
//! The crate bundles a from-scratch convolutional network with its training
//! loop, a reference Agatston scorer that defines ground-truth labels, a
//! synthetic phantom generator, and the evaluation metrics used to compare
//! predictions against the scorer.

pub mod agatston;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::{LayerParams, LayerSpec, Mode};
pub use model::{build_model, Model, ModelConfig, NUM_CLASSES};
pub use tensor::{Real, Tensor};
