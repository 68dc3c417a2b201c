//! Modular vision backbones built from interchangeable spatial mixers.

pub mod analysis;
pub mod assembly;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mixing;
pub mod nn;

pub use error::{Result, SpachError};
