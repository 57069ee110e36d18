//! Persona-grounded dialog with a latent choice over expanded persona
//! candidates.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod expansion;
pub mod generator;
pub mod hashing;
pub mod latent;
pub mod model;
pub mod oracle;
pub mod params;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
