//! Closed-form global minima, posterior-collapse prediction and gradient
//! training for linear latent-variable models with a Gaussian encoder and
//! decoder.

pub mod closed_form;
pub mod collapse;
pub mod data;
pub mod decoder_variance;
pub mod error;
pub mod linalg;
pub mod spectrum;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
