//! Few-shot personalized response generation: a meta-learned
//! encoder-decoder conversation model conditioned on a task representation
//! aggregated over the speaker's social neighborhood.

pub mod aggregator;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod social;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use social::{SocialGraph, SpeakerId};
