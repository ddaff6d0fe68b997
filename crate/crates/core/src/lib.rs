//! Image-to-recipe generation: title captioning, ingredient set prediction,
//! instruction generation, evaluation metrics and LLM prompting applications.

pub mod apps;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod ingredients;
pub mod instructions;
pub mod metrics;
pub mod pipeline;
pub mod title;

pub use error::{Error, Result};
