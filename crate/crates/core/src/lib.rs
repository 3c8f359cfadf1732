//! Multimodal named entity recognition with bidirectional latent generation
//! between text and image features, built on a small reverse-mode autodiff
//! engine.

pub mod cli;
pub mod crf;
pub mod data;
pub mod error;
pub mod extractor;
pub mod mcg;
pub mod model;
pub mod nn;
pub mod scs;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
