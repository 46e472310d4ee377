//! Retrieval-augmented locomotion control.
//!
//! A learnable retriever selects motion clips from databases by weighting a
//! query vector, a controller tracks the retrieved reference in a surrogate
//! character environment, and a discriminator that sees retrieved future
//! states shapes both policies' rewards.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod eval;
pub mod features;
pub mod motion;
pub mod neural;
pub mod ragail;
pub mod retrieval;
pub mod rewards;
pub mod trainer;

pub use error::{Error, Result};
pub use nalgebra;
