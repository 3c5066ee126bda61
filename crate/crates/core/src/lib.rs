//! Semi-supervised segmentation with an encoder and twin decoders, trained
//! on pseudo-labels and regularized by an adversarially learned shape prior.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod conv;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod segmodel;
pub mod shape_prior;
pub mod trainer;

pub use error::{Error, Result};
