pub mod analysis;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalprobe;
pub mod mae;
pub mod masking;
pub mod numerics;
pub mod pipeline;
pub mod plot;
pub mod tokenizers;

pub use error::{Error, Result};
