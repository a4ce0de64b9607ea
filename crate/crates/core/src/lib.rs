//! Deepfake face detection: dataset preparation, augmentation, the
//! autoencoder + hybrid-backbone detector, curriculum training, metrics and
//! GradCAM maps.

pub mod augment;
pub mod cam;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use error::{Error, ErrorKind, Result};
