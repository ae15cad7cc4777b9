//! Deep clustering by mutual information and its alternating-direction variants.

pub mod autoencoder;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod posterior;
pub mod trainers;
pub mod updates;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
