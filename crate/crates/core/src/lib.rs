//! Unsupervised part discovery by aligning learnable part representations
//! with dense pixel features.

pub mod archive;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod par;
pub mod partformer;
pub mod pipeline;
pub mod transfer;
pub mod types;

pub use config::RunConfig;
pub use error::{Error, Result};
